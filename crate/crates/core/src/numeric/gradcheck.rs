//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};

use super::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub id: ParamId,
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares analytic gradients of the scalar `f` with central differences.
///
/// The error for one entry is `|analytic − numeric| / max(1, |numeric|)`.
/// `limit` caps the entries visited per parameter (evenly strided).
pub fn grad_check<F>(
    f: F,
    store: &mut ParamStore,
    params: &[ParamId],
    h: f64,
    limit: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    let base = tape.value(loss).data()[0];
    if !base.is_finite() {
        return Err(Error::Eval(format!("objective is not finite: {base}")));
    }
    let grads = tape.backward(loss)?;
    drop(tape);

    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let v = f(&tape, store)?;
        let x = tape.value(v).data()[0];
        if x.is_finite() {
            Ok(x)
        } else {
            Err(Error::Eval(format!("objective is not finite: {x}")))
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        params: Vec::with_capacity(params.len()),
    };
    for &id in params {
        let n = store.get(id).len();
        let stride = limit.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        let analytic = grads.param(id).map(|t| t.data().to_vec());
        let mut check = ParamCheck {
            id,
            name: store.name(id).to_string(),
            entries_checked: 0,
            max_rel_error: 0.0,
            max_abs_grad: 0.0,
        };
        for idx in (0..n).step_by(stride) {
            let orig = store.get(id).data()[idx];
            store.get_mut(id).data_mut()[idx] = orig + h;
            let plus = eval(store);
            store.get_mut(id).data_mut()[idx] = orig - h;
            let minus = eval(store);
            store.get_mut(id).data_mut()[idx] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |g| g[idx]);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            check.max_rel_error = check.max_rel_error.max(err);
            check.max_abs_grad = check.max_abs_grad.max(a.abs());
            check.entries_checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    #[test]
    fn quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(3.0));
        let report = grad_check(
            |tape, s| {
                let x = tape.param(s, w);
                tape.mul(x, x)
            },
            &mut store,
            &[w],
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8);
        assert!((report.params[0].max_abs_grad - 6.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(f64::INFINITY));
        let r = grad_check(|tape, s| Ok(tape.param(s, w)), &mut store, &[w], 1e-5, None);
        assert!(matches!(r, Err(Error::Eval(_))));
    }

    #[test]
    fn tape_ops_pass_grad_check() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut rand_t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let mut store = ParamStore::new();
        let x = store.add("x", rand_t(&[3, 4]));
        let w = store.add("w", rand_t(&[4, 5]));
        let b = store.add("b", rand_t(&[5]));
        let g = store.add("gamma", rand_t(&[5]));
        let be = store.add("beta", rand_t(&[5]));
        let u = store.add("u", rand_t(&[2, 5]));
        let ids = [x, w, b, g, be, u];
        let report = grad_check(
            |tape, s| {
                let xv = tape.param(s, x);
                let y = tape.affine(xv, tape.param(s, w), tape.param(s, b))?;
                let y = tape.gelu(y);
                let y = tape.layer_norm(y, tape.param(s, g), tape.param(s, be))?;
                let z = tape.matmul_t(y, tape.param(s, u))?; // 3x2
                let sg = tape.sigmoid(z);
                let c = tape.concat_cols(sg, z)?;
                let c = tape.slice_cols(c, 1, 4)?;
                let c = tape.slice_rows(c, 0, 2)?;
                let e = tape.gather_rows(xv, &[2, 0, 2])?;
                let e = tape.mul(e, e)?;
                let ce = tape.cross_entropy(c, &[1, 2], &[0])?;
                let total = tape.add(tape.sum(e), ce)?;
                let d = tape.sub(total, tape.scale(ce, 0.5))?;
                Ok(d)
            },
            &mut store,
            &ids,
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }
}
