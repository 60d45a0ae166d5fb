//! Reverse-mode differentiation over tensor-valued operations.
//!
//! Every operation evaluates eagerly and, when any input requires a
//! gradient, pushes a closure mapping the output gradient to input
//! gradients. [`Tape::backward`] replays those closures in reverse order.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::ops::{self, gelu, gelu_grad, moments, sigmoid};
use super::Tensor;

/// Handle to a named parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    param: Option<ParamId>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    by_param: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Accumulated gradient for a parameter; `None` when it was not reached.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn var(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(p, t)| (*p, t))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Leaf holding a copy of a parameter; its gradient is reported under `id`.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        self.push(Node {
            value: Rc::new(store.get(id).clone()),
            requires_grad: true,
            param: Some(id),
            parents: Vec::new(),
            backward: None,
        })
    }

    /// Leaf that requires a gradient but is not a stored parameter.
    pub fn input(&self, value: Tensor) -> Var {
        self.push(Node {
            value: Rc::new(value),
            requires_grad: true,
            param: None,
            parents: Vec::new(),
            backward: None,
        })
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Node {
            value: Rc::new(value),
            requires_grad: false,
            param: None,
            parents: Vec::new(),
            backward: None,
        })
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records an operation. `backward` receives the output gradient and must
    /// return one gradient per parent, in order, with matching shapes.
    pub fn record<F>(&self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor) -> Vec<Tensor> + 'static,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        self.push(Node {
            value: Rc::new(value),
            requires_grad,
            param: None,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
        })
    }

    /// Propagates d(loss)/d(·) back through every recorded operation.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::filled(nodes[loss.0].value.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].as_ref() else {
                continue;
            };
            let parent_grads = backward(g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        let mut by_param: Vec<(ParamId, Tensor)> = Vec::new();
        for (node, g) in nodes.iter().zip(&grads) {
            if let (Some(pid), Some(g)) = (node.param, g) {
                match by_param.iter_mut().find(|(p, _)| *p == pid) {
                    Some((_, acc)) => acc.add_assign(g),
                    None => by_param.push((pid, g.clone())),
                }
            }
        }
        by_param.sort_by_key(|(p, _)| *p);
        Ok(Gradients {
            by_node: grads,
            by_param,
        })
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul(&bv)?;
        let shape_a = av.shape().to_vec();
        Ok(self.record(out, &[a, b], move |g| {
            let ga = g.matmul_t(&bv).expect("matmul grad").reshape(&shape_a).expect("shape");
            let gb = av.t_matmul(g).expect("matmul grad");
            vec![ga, gb]
        }))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.matmul_t(&bv)?;
        Ok(self.record(out, &[a, b], move |g| {
            let ga = g.matmul(&bv).expect("matmul_t grad");
            let gb = g.t_matmul(&av).expect("matmul_t grad");
            vec![ga, gb]
        }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(&self.value(b))?;
        Ok(self.record(out, &[a, b], |g| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(&self.value(b))?;
        Ok(self.record(out, &[a, b], |g| vec![g.clone(), g.scale(-1.0)]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.mul(&bv)?;
        Ok(self.record(out, &[a, b], move |g| {
            vec![g.mul(&bv).expect("shape"), g.mul(&av).expect("shape")]
        }))
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        self.record(out, &[x], move |g| vec![g.scale(s)])
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c {
            return Err(Error::Dimension(format!(
                "bias of {} entries for rows of width {c}",
                bv.len()
            )));
        }
        let mut out = (*xv).clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let bias_shape = bv.shape().to_vec();
        Ok(self.record(out, &[x, bias], move |g| {
            let mut gb = vec![0.0; c];
            for r in 0..g.rows() {
                for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                    *acc += v;
                }
            }
            vec![g.clone(), Tensor::new(&bias_shape, gb).expect("shape")]
        }))
    }

    /// `x · w + b` for a row-major batch `x`.
    pub fn affine(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let saved = out.clone();
        self.record(out, &[x], move |g| {
            let mut gx = g.clone();
            for (v, s) in gx.data_mut().iter_mut().zip(saved.data()) {
                *v *= s * (1.0 - s);
            }
            vec![gx]
        })
    }

    pub fn gelu(&self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv.map(gelu);
        self.record(out, &[x], move |g| {
            let mut gx = g.clone();
            for (v, &xi) in gx.data_mut().iter_mut().zip(xv.data()) {
                *v *= gelu_grad(xi);
            }
            vec![gx]
        })
    }

    /// Elementwise product with a constant tensor (dropout masks, gates held fixed).
    pub fn mul_const(&self, x: Var, c: Tensor) -> Result<Var> {
        let out = self.value(x).mul(&c)?;
        Ok(self.record(out, &[x], move |g| vec![g.mul(&c).expect("shape")]))
    }

    pub fn sum(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        self.record(Tensor::scalar(xv.sum()), &[x], move |g| {
            vec![Tensor::filled(&shape, g.data()[0])]
        })
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let out = ops::layer_norm(&xv, &gv, &bv)?;
        let d = xv.cols();
        let rows = xv.rows();
        let (gshape, bshape) = (gv.shape().to_vec(), bv.shape().to_vec());
        Ok(self.record(out, &[x, gamma, beta], move |g| {
            let mut gx = Tensor::zeros(xv.shape());
            let mut ggamma = vec![0.0; d];
            let mut gbeta = vec![0.0; d];
            let n = d as f64;
            let mut xhat = vec![0.0; d];
            let mut dxhat = vec![0.0; d];
            for r in 0..rows {
                let xr = xv.row(r);
                let gr = g.row(r);
                let (mean, inv_std) = moments(xr);
                for k in 0..d {
                    xhat[k] = (xr[k] - mean) * inv_std;
                    ggamma[k] += gr[k] * xhat[k];
                    gbeta[k] += gr[k];
                    dxhat[k] = gr[k] * gv.data()[k];
                }
                let sum_d: f64 = dxhat.iter().sum();
                let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                let out = gx.row_mut(r);
                for k in 0..d {
                    out[k] = inv_std / n * (n * dxhat[k] - sum_d - xhat[k] * sum_dx);
                }
            }
            vec![
                gx,
                Tensor::new(&gshape, ggamma).expect("shape"),
                Tensor::new(&bshape, gbeta).expect("shape"),
            ]
        }))
    }

    /// `[a | b]` along columns.
    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::Dimension(format!(
                "concat_cols row counts differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Tensor::new(&[rows, ca + cb], data)?;
        Ok(self.record(out, &[a, b], move |g| {
            vec![g.slice_cols(0, ca), g.slice_cols(ca, ca + cb)]
        }))
    }

    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.cols() {
            return Err(Error::Dimension(format!(
                "column slice {start}..{end} of {:?}",
                xv.shape()
            )));
        }
        let out = xv.slice_cols(start, end);
        let (rows, cols) = (xv.rows(), xv.cols());
        Ok(self.record(out, &[x], move |g| {
            let mut gx = Tensor::zeros(&[rows, cols]);
            for r in 0..rows {
                gx.row_mut(r)[start..end].copy_from_slice(g.row(r));
            }
            vec![gx]
        }))
    }

    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.rows() {
            return Err(Error::Dimension(format!(
                "row slice {start}..{end} of {:?}",
                xv.shape()
            )));
        }
        let out = xv.slice_rows(start, end);
        let shape = xv.shape().to_vec();
        let c = xv.cols();
        Ok(self.record(out, &[x], move |g| {
            let mut gx = Tensor::zeros(&shape);
            gx.data_mut()[start * c..end * c].copy_from_slice(g.data());
            vec![gx]
        }))
    }

    /// Picks rows of `table` by index; the gradient scatters back into those rows.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (n, c) = (tv.rows(), tv.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Data(format!("row id {bad} out of range for {n} rows")));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(&[ids.len(), c], data)?;
        let ids = ids.to_vec();
        let shape = tv.shape().to_vec();
        Ok(self.record(out, &[table], move |g| {
            let mut gt = Tensor::zeros(&shape);
            for (r, &i) in ids.iter().enumerate() {
                for (acc, v) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                    *acc += v;
                }
            }
            vec![gt]
        }))
    }

    /// Mean negative log-likelihood of `targets` under a row-wise softmax of
    /// `logits`. Columns listed in `excluded` never receive probability mass.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize], excluded: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, c) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(Error::Dimension(format!(
                "{} targets for {rows} rows of logits",
                targets.len()
            )));
        }
        if rows == 0 {
            return Err(Error::Data("cross entropy over zero rows".into()));
        }
        for &t in targets {
            if t >= c || excluded.contains(&t) {
                return Err(Error::Data(format!("invalid target column {t}")));
            }
        }
        let mut mask = vec![true; rows * c];
        for r in 0..rows {
            for &e in excluded {
                mask[r * c + e] = false;
            }
        }
        let probs = ops::masked_softmax(&lv, Some(&mask), 1)?;
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            // log-softmax directly for accuracy when p underflows
            let row = lv.row(r);
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| mask[r * c + j])
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| mask[r * c + j])
                    .map(|(_, &v)| (v - max).exp())
                    .sum::<f64>()
                    .ln();
            loss += lse - row[t];
        }
        let inv = 1.0 / rows as f64;
        let targets = targets.to_vec();
        Ok(self.record(Tensor::scalar(loss * inv), &[logits], move |g| {
            let mut gl = probs.scale(g.data()[0] * inv);
            for (r, &t) in targets.iter().enumerate() {
                gl.row_mut(r)[t] -= g.data()[0] * inv;
            }
            vec![gl]
        }))
    }
}
