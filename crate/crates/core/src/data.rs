//! Interaction logs, leave-one-out splits, batching and synthetic data.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Token ↔ contiguous id mapping; ids start at 1 (0 is padding).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn intern(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        let id = self.tokens.len() as u32;
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get((id as usize).checked_sub(1)?).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Writes `token<TAB>id` lines.
    pub fn write_mapping(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(w, "{t}\t{}", i + 1).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub timestamp: f64,
}

/// Ingested interactions, kept in input order, with per-user sequences
/// ordered by timestamp (ties keep input order).
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionLog {
    pub users: Vocab,
    pub items: Vocab,
    records: Vec<Interaction>,
    sequences: Vec<Vec<u32>>,
}

impl InteractionLog {
    /// Builds a log from raw `(user, item, timestamp)` token triples.
    pub fn from_raw<'a, I>(raw: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str, f64)>,
    {
        let mut users = Vocab::default();
        let mut items = Vocab::default();
        let records: Vec<Interaction> = raw
            .into_iter()
            .map(|(u, i, t)| Interaction {
                user: users.intern(u),
                item: items.intern(i),
                timestamp: t,
            })
            .collect();
        if records.is_empty() {
            return Err(Error::Data("interaction log is empty".into()));
        }
        let mut per_user: Vec<Vec<(f64, u32)>> = vec![Vec::new(); users.len()];
        for r in &records {
            per_user[r.user as usize - 1].push((r.timestamp, r.item));
        }
        let sequences = per_user
            .into_iter()
            .map(|mut v| {
                v.sort_by(|a, b| a.0.total_cmp(&b.0));
                v.into_iter().map(|(_, item)| item).collect()
            })
            .collect();
        Ok(Self {
            users,
            items,
            records,
            sequences,
        })
    }

    pub fn records(&self) -> &[Interaction] {
        &self.records
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// Time-ordered item ids of `user` (1-based id).
    pub fn sequence(&self, user: u32) -> &[u32] {
        &self.sequences[user as usize - 1]
    }

    pub fn sequences(&self) -> impl Iterator<Item = (u32, &[u32])> {
        self.sequences
            .iter()
            .enumerate()
            .map(|(i, s)| (i as u32 + 1, s.as_slice()))
    }

    /// Writes the log as `user<TAB>item<TAB>timestamp` with a header, in input order.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "user\titem\ttimestamp").map_err(io)?;
        for r in &self.records {
            writeln!(
                w,
                "{}\t{}\t{}",
                self.users.token(r.user).unwrap_or_default(),
                self.items.token(r.item).unwrap_or_default(),
                r.timestamp
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Reads a `user<TAB>item<TAB>timestamp` file; a first line starting with
/// `user` is treated as a header.
pub fn load_interactions(path: &Path) -> Result<InteractionLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if n == 0 && line.starts_with("user") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [user, item, ts] = fields.as_slice() else {
            return Err(parse_err(format!(
                "expected 3 tab-separated fields, found {}",
                fields.len()
            )));
        };
        if user.is_empty() || item.is_empty() {
            return Err(parse_err("empty user or item token".into()));
        }
        let ts: f64 = ts
            .trim()
            .parse()
            .ok()
            .filter(|t: &f64| t.is_finite())
            .ok_or_else(|| parse_err(format!("bad timestamp `{ts}`")))?;
        raw.push((*user, *item, ts));
    }
    if raw.is_empty() {
        return Err(Error::Data(format!("{} contains no interactions", path.display())));
    }
    InteractionLog::from_raw(raw)
}

/// One retained user under leave-one-out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSplit {
    pub user: u32,
    pub train: Vec<u32>,
    pub valid_target: u32,
    pub test_target: u32,
}

impl UserSplit {
    pub fn valid_context(&self) -> &[u32] {
        &self.train
    }

    pub fn test_context(&self) -> Vec<u32> {
        let mut c = self.train.clone();
        c.push(self.valid_target);
        c
    }

    /// Every item the user interacted with.
    pub fn history(&self) -> impl Iterator<Item = u32> + '_ {
        self.train.iter().copied().chain([self.valid_target, self.test_target])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Valid,
    Test,
}

impl std::str::FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" | "validation" => Ok(Self::Valid),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub users: Vec<UserSplit>,
    pub dropped: usize,
    pub num_items: usize,
}

impl Split {
    pub fn context_and_target(&self, user: &UserSplit, which: EvalSplit) -> (Vec<u32>, u32) {
        match which {
            EvalSplit::Valid => (user.train.clone(), user.valid_target),
            EvalSplit::Test => (user.test_context(), user.test_target),
        }
    }

    /// Next-item training pairs from each user's training prefix: inputs are
    /// the most recent `max_len` items before each target.
    pub fn training_examples(&self, max_len: usize) -> Vec<TrainExample> {
        self.users
            .iter()
            .filter(|u| u.train.len() >= 2)
            .map(|u| {
                let n = u.train.len();
                let start = (n - 1).saturating_sub(max_len);
                TrainExample {
                    input: u.train[start..n - 1].to_vec(),
                    targets: u.train[start + 1..n].to_vec(),
                }
            })
            .collect()
    }
}

/// Holds out the last interaction for test and the second-to-last for
/// validation; users with fewer than `min_len` interactions are dropped.
pub fn leave_one_out_split(log: &InteractionLog, min_len: usize) -> Split {
    let min_len = min_len.max(3);
    let mut users = Vec::new();
    let mut dropped = 0;
    for (user, seq) in log.sequences() {
        if seq.len() < min_len {
            dropped += 1;
            continue;
        }
        let n = seq.len();
        users.push(UserSplit {
            user,
            train: seq[..n - 2].to_vec(),
            valid_target: seq[n - 2],
            test_target: seq[n - 1],
        });
    }
    Split {
        users,
        dropped,
        num_items: log.num_items(),
    }
}

/// Input sequence with one next-item target per position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainExample {
    pub input: Vec<u32>,
    pub targets: Vec<u32>,
}

/// Left-padded `B × L` item matrix with true lengths and one target per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqBatch {
    ids: Vec<u32>,
    lengths: Vec<usize>,
    targets: Vec<u32>,
    max_len: usize,
}

impl SeqBatch {
    /// Keeps the most recent `max_len` items of each sequence.
    pub fn from_sequences(seqs: &[Vec<u32>], targets: &[u32], max_len: usize) -> Result<Self> {
        if seqs.len() != targets.len() {
            return Err(Error::Data(format!(
                "{} sequences but {} targets",
                seqs.len(),
                targets.len()
            )));
        }
        let mut ids = vec![0; seqs.len() * max_len];
        let mut lengths = Vec::with_capacity(seqs.len());
        for (b, s) in seqs.iter().enumerate() {
            let kept = &s[s.len().saturating_sub(max_len)..];
            let row = &mut ids[b * max_len..(b + 1) * max_len];
            row[max_len - kept.len()..].copy_from_slice(kept);
            lengths.push(kept.iter().filter(|&&v| v != 0).count());
        }
        Ok(Self {
            ids,
            lengths,
            targets: targets.to_vec(),
            max_len,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn targets(&self) -> &[u32] {
        &self.targets
    }

    /// Unpadded items of row `b`.
    pub fn sequence(&self, b: usize) -> &[u32] {
        let row = &self.ids[b * self.max_len..(b + 1) * self.max_len];
        &row[self.max_len - self.lengths[b]..]
    }
}

/// Parameters of the block-structured synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub blocks_per_user: usize,
    pub block_len: usize,
    pub noise_rate: f64,
    pub seed: u64,
    /// Items per interest cluster.
    pub cluster_size: usize,
}

impl SynthConfig {
    pub fn new(
        num_users: usize,
        num_items: usize,
        blocks_per_user: usize,
        block_len: usize,
        noise_rate: f64,
        seed: u64,
    ) -> Self {
        Self {
            num_users,
            num_items,
            blocks_per_user,
            block_len,
            noise_rate,
            seed,
            cluster_size: 10,
        }
    }
}

/// Users walk through `blocks_per_user` interest blocks; inside a block items
/// come from one cluster of `cluster_size` items, except a `noise_rate`
/// fraction drawn uniformly from the whole catalogue.
pub fn make_synthetic(cfg: &SynthConfig) -> Result<InteractionLog> {
    if cfg.num_users == 0 || cfg.num_items == 0 || cfg.blocks_per_user == 0 || cfg.block_len == 0 {
        return Err(Error::Config("synthetic generator needs positive sizes".into()));
    }
    if !(0.0..=1.0).contains(&cfg.noise_rate) {
        return Err(Error::Config(format!("noise rate {} outside [0, 1]", cfg.noise_rate)));
    }
    let cluster = cfg.cluster_size.clamp(1, cfg.num_items);
    let num_clusters = cfg.num_items / cluster;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let users: Vec<String> = (1..=cfg.num_users).map(|u| format!("u{u}")).collect();
    let items: Vec<String> = (1..=cfg.num_items).map(|i| format!("i{i}")).collect();
    let mut raw = Vec::with_capacity(cfg.num_users * cfg.blocks_per_user * cfg.block_len);
    for (u, user) in users.iter().enumerate() {
        let mut t = (u as f64) * 1e6;
        for _ in 0..cfg.blocks_per_user {
            let c = rng.gen_range(0..num_clusters);
            for _ in 0..cfg.block_len {
                let item = if rng.gen::<f64>() < cfg.noise_rate {
                    rng.gen_range(0..cfg.num_items)
                } else {
                    c * cluster + rng.gen_range(0..cluster)
                };
                raw.push((user.as_str(), items[item].as_str(), t));
                t += 60.0;
            }
        }
    }
    InteractionLog::from_raw(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn parses_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "a.tsv",
            "user\titem\ttimestamp\nalice\tx\t3\nbob\ty\t1\nalice\tz\t2\n",
        );
        let log = load_interactions(&p).unwrap();
        assert_eq!(log.records().len(), 3);
        assert_eq!(log.num_users(), 2);
        let alice = log.users.id("alice").unwrap();
        let (x, z) = (log.items.id("x").unwrap(), log.items.id("z").unwrap());
        assert_eq!(log.sequence(alice), &[z, x]);
        assert_eq!(log.items.id("x"), Some(1));
    }

    #[test]
    fn header_only_and_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "h.tsv", "user\titem\ttimestamp\n");
        assert!(matches!(load_interactions(&p), Err(Error::Data(_))));
        let p = write(&dir, "m.tsv", "a\tb\t1\na\tb\n");
        match load_interactions(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let p = write(&dir, "t.tsv", "a\tb\tsoon\n");
        assert!(matches!(load_interactions(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn ties_keep_input_order() {
        let log = InteractionLog::from_raw([("u", "a", 5.0), ("u", "b", 5.0), ("u", "c", 1.0)]).unwrap();
        assert_eq!(log.sequence(1), &[3, 1, 2]);
    }

    #[test]
    fn split_contract() {
        let log = InteractionLog::from_raw([
            ("u", "a", 1.0),
            ("u", "b", 2.0),
            ("u", "c", 3.0),
            ("u", "d", 4.0),
            ("v", "a", 1.0),
            ("v", "b", 2.0),
        ])
        .unwrap();
        let split = leave_one_out_split(&log, 3);
        assert_eq!(split.dropped, 1);
        let u = &split.users[0];
        assert_eq!(u.train, vec![1, 2]);
        assert_eq!(u.valid_target, 3);
        assert_eq!(u.test_target, 4);
        assert_eq!(u.test_context(), vec![1, 2, 3]);
    }

    #[test]
    fn training_examples_truncate_to_recent() {
        let split = Split {
            users: vec![UserSplit {
                user: 1,
                train: vec![1, 2, 3, 4, 5, 6],
                valid_target: 7,
                test_target: 8,
            }],
            dropped: 0,
            num_items: 8,
        };
        let ex = split.training_examples(3);
        assert_eq!(ex[0].input, vec![3, 4, 5]);
        assert_eq!(ex[0].targets, vec![4, 5, 6]);
    }

    #[test]
    fn batch_left_pads_and_truncates() {
        let b = SeqBatch::from_sequences(&[vec![1, 2, 3, 4], vec![5]], &[9, 9], 3).unwrap();
        assert_eq!(b.ids(), &[2, 3, 4, 0, 0, 5]);
        assert_eq!(b.sequence(0), &[2, 3, 4]);
        assert_eq!(b.sequence(1), &[5]);
    }

    #[test]
    fn synthetic_properties() {
        let cfg = SynthConfig::new(5, 40, 1, 20, 0.0, 3);
        let log = make_synthetic(&cfg).unwrap();
        for (_, seq) in log.sequences() {
            let clusters: HashSet<usize> = seq
                .iter()
                .map(|&i| {
                    let tok = log.items.token(i).unwrap();
                    (tok[1..].parse::<usize>().unwrap() - 1) / cfg.cluster_size
                })
                .collect();
            assert_eq!(clusters.len(), 1);
        }
        assert_eq!(make_synthetic(&cfg).unwrap(), log);
    }

    #[test]
    fn full_noise_is_uniform() {
        let cfg = SynthConfig::new(100, 50, 1, 100, 1.0, 7);
        let log = make_synthetic(&cfg).unwrap();
        let mut counts = vec![0usize; 50];
        for r in log.records() {
            let tok = log.items.token(r.item).unwrap();
            counts[tok[1..].parse::<usize>().unwrap() - 1] += 1;
        }
        let expected = 10_000.0 / 50.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-square critical value, 49 degrees of freedom, p = 0.001
        assert!(chi2 < 85.35, "chi2 = {chi2}");
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let log = make_synthetic(&SynthConfig::new(4, 30, 2, 5, 0.2, 1)).unwrap();
        let p = dir.path().join("s.tsv");
        log.write_tsv(&p).unwrap();
        assert_eq!(load_interactions(&p).unwrap(), log);
    }
}
