//! Reverse-mode differentiation over an explicit tape.
//!
//! Every primitive application is appended as a node holding its inputs,
//! its forward value, and the branch decisions it took (leaky-ReLU sign,
//! max-pool winner, trilinear cell). The tape can be replayed from its
//! leaves, either re-deciding branches or with the recorded decisions held
//! fixed; the latter evaluates the smooth piece the recording lives on.

use std::collections::HashMap;

use crate::activation::Activation;
use crate::conv;
use crate::error::{Error, Result};
use crate::loss;
use crate::pool;
use crate::tensor::Tensor;
use crate::warp;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Kind {
    Leaf,
    Conv { stride: usize, pad: usize, bias: bool },
    ConvTranspose { bias: bool },
    Act(Activation),
    MaxPool,
    Upsample,
    Concat,
    Slice { start: usize, len: usize },
    Linear(Vec<f64>),
    Mul,
    MatVec,
    Reshape(Vec<usize>),
    Sum,
    Warp,
    LocalNcc { window: usize, eps: f64 },
    Smoothness,
}

#[derive(Clone, Debug)]
enum Branch {
    None,
    Mask(Vec<bool>),
    Argmax(Vec<u32>),
    Cells(Vec<[i32; 3]>),
}

#[derive(Clone, Debug)]
struct Node {
    kind: Kind,
    inputs: Vec<usize>,
    value: Tensor,
    branch: Branch,
    needs_grad: bool,
}

/// How branch decisions are made when the tape is re-evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branches {
    /// Decide afresh from the new values (plain function evaluation).
    Free,
    /// Reuse the decisions recorded in the forward pass.
    Frozen,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn vol_dims_of(t: &Tensor) -> Result<[usize; 3]> {
    t.vol_dims()
}

/// Evaluate one primitive. `frozen` supplies recorded branch decisions.
fn evaluate(kind: &Kind, ins: &[&Tensor], frozen: Option<&Branch>) -> Result<(Tensor, Branch)> {
    Ok(match kind {
        Kind::Leaf => unreachable!("leaves are not evaluated"),
        Kind::Conv { stride, pad, bias } => {
            let b = bias.then(|| ins[2]);
            (conv::conv3d(ins[0], ins[1], b, *stride, *pad)?, Branch::None)
        }
        Kind::ConvTranspose { bias } => {
            let b = bias.then(|| ins[2]);
            (conv::conv3d_transpose(ins[0], ins[1], b)?, Branch::None)
        }
        Kind::Act(act @ Activation::LeakyRelu(s)) => match frozen {
            Some(Branch::Mask(m)) => (Activation::apply_masked(*s, ins[0], m), Branch::None),
            _ => (act.apply(ins[0]), Branch::Mask(Activation::leaky_mask(ins[0]))),
        },
        Kind::Act(act) => (act.apply(ins[0]), Branch::None),
        Kind::MaxPool => match frozen {
            Some(Branch::Argmax(a)) => (pool::max_pool2_frozen(ins[0], a)?, Branch::None),
            _ => {
                let (y, a) = pool::max_pool2(ins[0])?;
                (y, Branch::Argmax(a))
            }
        },
        Kind::Upsample => (pool::upsample2(ins[0])?, Branch::None),
        Kind::Concat => {
            let (_, dims) = ins[0].map_dims()?;
            let mut c = 0;
            let mut data = Vec::new();
            for t in ins {
                let (ci, di) = t.map_dims()?;
                if di != dims {
                    return Err(Error::dim("concat: spatial extents differ"));
                }
                c += ci;
                data.extend_from_slice(t.data());
            }
            (Tensor::new(vec![c, dims[0], dims[1], dims[2]], data)?, Branch::None)
        }
        Kind::Slice { start, len } => {
            let shape = ins[0].shape();
            if start + len > shape[0] || *len == 0 {
                return Err(Error::dim(format!("slice {start}..{} of {shape:?}", start + len)));
            }
            let inner: usize = shape[1..].iter().product();
            let mut s = shape.to_vec();
            s[0] = *len;
            let data = ins[0].data()[start * inner..(start + len) * inner].to_vec();
            (Tensor::new(s, data)?, Branch::None)
        }
        Kind::Linear(coef) => {
            let mut out = ins[0].scale(coef[0]);
            for (t, &k) in ins.iter().zip(coef).skip(1) {
                if t.shape() != out.shape() {
                    return Err(Error::dim(format!(
                        "linear combination of {:?} and {:?}",
                        out.shape(),
                        t.shape()
                    )));
                }
                for (o, v) in out.data_mut().iter_mut().zip(t.data()) {
                    *o += k * v;
                }
            }
            (out, Branch::None)
        }
        Kind::Mul => (ins[0].zip(ins[1], |a, b| a * b)?, Branch::None),
        Kind::MatVec => {
            let (m, k) = match ins[0].shape() {
                &[m, k] if ins[1].shape() == [k] => (m, k),
                s => {
                    return Err(Error::dim(format!(
                        "matvec {s:?} × {:?}",
                        ins[1].shape()
                    )))
                }
            };
            let w = ins[0].data();
            let x = ins[1].data();
            let out = (0..m)
                .map(|r| w[r * k..(r + 1) * k].iter().zip(x).map(|(a, b)| a * b).sum())
                .collect();
            (Tensor::new(vec![m], out)?, Branch::None)
        }
        Kind::Reshape(shape) => (ins[0].clone().reshape(shape)?, Branch::None),
        Kind::Sum => (Tensor::scalar(ins[0].sum()), Branch::None),
        Kind::Warp => {
            let dims = vol_dims_of(ins[0])?;
            let (c, fd) = ins[1].map_dims()?;
            if c != 3 || fd != dims {
                return Err(Error::dim("warp: field must be [3,D,H,W] on the volume grid"));
            }
            let cells = match frozen {
                Some(Branch::Cells(c)) => Some(c.as_slice()),
                _ => None,
            };
            let (out, cells) = warp::warp_forward(ins[0].data(), dims, ins[1].data(), cells);
            (Tensor::new(dims.to_vec(), out)?, Branch::Cells(cells))
        }
        Kind::LocalNcc { window, eps } => {
            let dims = vol_dims_of(ins[0])?;
            if ins[1].shape() != ins[0].shape() || dims.iter().any(|d| d < window) {
                return Err(Error::dim("local NCC: shape mismatch or window too large"));
            }
            let v = loss::local_ncc_forward(ins[0].data(), ins[1].data(), dims, *window, *eps);
            (Tensor::scalar(v), Branch::None)
        }
        Kind::Smoothness => {
            let (c, dims) = ins[0].map_dims()?;
            if c != 3 {
                return Err(Error::dim("smoothness: field must have 3 channels"));
            }
            (Tensor::scalar(loss::smoothness_forward(ins[0].data(), dims)), Branch::None)
        }
    })
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant (`requires_grad = false`) or a learnable input.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            kind: Kind::Leaf,
            inputs: Vec::new(),
            value,
            branch: Branch::None,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, kind: Kind, inputs: Vec<Var>) -> Result<Var> {
        let ins: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, branch) = evaluate(&kind, &ins, None)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            kind,
            inputs: inputs.iter().map(|v| v.0).collect(),
            value,
            branch,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(Kind::Conv { stride, pad, bias: b.is_some() }, ins)
    }

    pub fn conv3d_transpose(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push(Kind::ConvTranspose { bias: b.is_some() }, ins)
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Result<Var> {
        self.push(Kind::Act(kind), vec![x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.act(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.act(x, Activation::Tanh)
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        self.push(Kind::MaxPool, vec![x])
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        self.push(Kind::Upsample, vec![x])
    }

    /// Channel-wise concatenation of `[C_i,D,H,W]` maps.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::dim("concat of nothing"));
        }
        self.push(Kind::Concat, xs.to_vec())
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Kind::Slice { start, len }, vec![x])
    }

    /// `Σ c_i·x_i` over equal-shaped tensors.
    pub fn linear(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::dim("empty linear combination"));
        }
        let coef = terms.iter().map(|t| t.1).collect();
        self.push(Kind::Linear(coef), terms.iter().map(|t| t.0).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear(&[(a, 1.0), (b, 1.0)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Kind::Mul, vec![a, b])
    }

    /// `[M,K] × [K] → [M]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        self.push(Kind::MatVec, vec![w, x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.push(Kind::Reshape(shape.to_vec()), vec![x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Kind::Sum, vec![x])
    }

    /// Backward trilinear warp of a `[D,H,W]` volume by a `[3,D,H,W]` field.
    pub fn warp(&mut self, vol: Var, field: Var) -> Result<Var> {
        self.push(Kind::Warp, vec![vol, field])
    }

    /// Mean windowed NCC (scalar).
    pub fn local_ncc(&mut self, a: Var, b: Var, window: usize, eps: f64) -> Result<Var> {
        if window % 2 == 0 {
            return Err(Error::config("NCC window must be odd"));
        }
        self.push(Kind::LocalNcc { window, eps }, vec![a, b])
    }

    /// Squared forward-difference penalty of a `[3,D,H,W]` field (scalar).
    pub fn smoothness(&mut self, field: Var) -> Result<Var> {
        self.push(Kind::Smoothness, vec![field])
    }

    /// Reverse accumulation from a one-element node. The returned map holds
    /// a gradient for every node that depends on a `requires_grad` leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Consistency(format!(
                "backward from non-scalar node of shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.kind, Kind::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if g.shape() != node.value.shape() {
                return Err(Error::Consistency(format!(
                    "gradient shape {:?} for node {id} of shape {:?}",
                    g.shape(),
                    node.value.shape()
                )));
            }
            let contribs = self.local_backward(node, &g)?;
            for (slot, contrib) in node.inputs.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                match &mut grads[*slot] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a += v;
                        }
                    }
                    empty => *empty = Some(c),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn local_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let val = |k: usize| &self.nodes[node.inputs[k]].value;
        let want = |k: usize| self.wants(node.inputs[k]);
        Ok(match &node.kind {
            Kind::Leaf => Vec::new(),
            Kind::Conv { stride, pad, bias } => {
                let (dx, dw, db) =
                    conv::conv3d_backward(val(0), val(1), *bias, *stride, *pad, g, want(0))?;
                vec![dx, want(1).then_some(dw), db.filter(|_| *bias && want(2))]
            }
            Kind::ConvTranspose { bias } => {
                let (dx, dw, db) = conv::conv3d_transpose_backward(val(0), val(1), *bias, g, want(0))?;
                vec![dx, want(1).then_some(dw), db.filter(|_| *bias && want(2))]
            }
            Kind::Act(a) => {
                let mask = match &node.branch {
                    Branch::Mask(m) => Some(m.as_slice()),
                    _ => None,
                };
                vec![Some(a.backward(&node.value, mask, g))]
            }
            Kind::MaxPool => {
                let Branch::Argmax(arg) = &node.branch else {
                    return Err(Error::Consistency("max-pool node lost its argmax".into()));
                };
                vec![Some(pool::max_pool2_backward(val(0).shape(), arg, g))]
            }
            Kind::Upsample => vec![Some(pool::upsample2_backward(val(0).shape(), g)?)],
            Kind::Concat => {
                let mut off = 0;
                node.inputs
                    .iter()
                    .map(|&i| {
                        let t = &self.nodes[i].value;
                        let part = Tensor::new(t.shape().to_vec(), g.data()[off..off + t.len()].to_vec());
                        off += t.len();
                        part.map(Some)
                    })
                    .collect::<Result<_>>()?
            }
            Kind::Slice { start, len } => {
                let full = val(0);
                let inner: usize = full.shape()[1..].iter().product();
                let mut d = Tensor::zeros(full.shape());
                d.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
                vec![Some(d)]
            }
            Kind::Linear(coef) => coef
                .iter()
                .enumerate()
                .map(|(k, &c)| want(k).then(|| g.scale(c)))
                .collect(),
            Kind::Mul => vec![
                want(0).then(|| g.zip(val(1), |a, b| a * b)).transpose()?,
                want(1).then(|| g.zip(val(0), |a, b| a * b)).transpose()?,
            ],
            Kind::MatVec => {
                let w = val(0);
                let x = val(1);
                let (m, k) = (w.shape()[0], w.shape()[1]);
                let dw = want(0).then(|| {
                    Tensor::from_fn(&[m, k], |i| g.data()[i / k] * x.data()[i % k])
                });
                let dx = want(1).then(|| {
                    let mut d = vec![0.0; k];
                    for r in 0..m {
                        let gr = g.data()[r];
                        for (dj, wj) in d.iter_mut().zip(&w.data()[r * k..(r + 1) * k]) {
                            *dj += gr * wj;
                        }
                    }
                    Tensor::new(vec![k], d)
                });
                vec![dw, dx.transpose()?]
            }
            Kind::Reshape(_) => vec![Some(g.clone().reshape(val(0).shape())?)],
            Kind::Sum => vec![Some(Tensor::full(val(0).shape(), g.item()))],
            Kind::Warp => {
                let Branch::Cells(cells) = &node.branch else {
                    return Err(Error::Consistency("warp node lost its cells".into()));
                };
                let dims = val(0).vol_dims()?;
                let (dv, df) =
                    warp::warp_backward(val(0).data(), dims, val(1).data(), cells, g.data(), want(0), want(1));
                vec![
                    dv.map(|d| Tensor::new(val(0).shape().to_vec(), d)).transpose()?,
                    df.map(|d| Tensor::new(val(1).shape().to_vec(), d)).transpose()?,
                ]
            }
            Kind::LocalNcc { window, eps } => {
                let dims = val(0).vol_dims()?;
                let (da, db) =
                    loss::local_ncc_backward(val(0).data(), val(1).data(), dims, *window, *eps, g.item());
                vec![
                    want(0).then(|| Tensor::new(dims.to_vec(), da)).transpose()?,
                    want(1).then(|| Tensor::new(dims.to_vec(), db)).transpose()?,
                ]
            }
            Kind::Smoothness => {
                let (_, dims) = val(0).map_dims()?;
                let d = loss::smoothness_backward(val(0).data(), dims, g.item());
                vec![Some(Tensor::new(val(0).shape().to_vec(), d)?)]
            }
        })
    }

    /// Re-evaluate `output` with leaf values replaced by `overrides`. Only
    /// nodes downstream of an overridden leaf are recomputed.
    pub fn eval_with(&self, overrides: &[(Var, &Tensor)], output: Var, branches: Branches) -> Result<Tensor> {
        let mut fresh: HashMap<usize, Tensor> = HashMap::new();
        for (v, t) in overrides {
            if !matches!(self.nodes[v.0].kind, Kind::Leaf) {
                return Err(Error::Consistency(format!("node {} is not a leaf", v.0)));
            }
            if t.shape() != self.nodes[v.0].value.shape() {
                return Err(Error::dim("override shape differs from leaf shape"));
            }
            fresh.insert(v.0, (*t).clone());
        }
        let start = overrides.iter().map(|o| o.0 .0).min().unwrap_or(output.0);
        for id in start..=output.0 {
            let node = &self.nodes[id];
            if matches!(node.kind, Kind::Leaf) || !node.inputs.iter().any(|i| fresh.contains_key(i)) {
                continue;
            }
            let ins: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|i| fresh.get(i).unwrap_or(&self.nodes[*i].value))
                .collect();
            let frozen = (branches == Branches::Frozen).then_some(&node.branch);
            let (v, _) = evaluate(&node.kind, &ins, frozen)?;
            fresh.insert(id, v);
        }
        Ok(fresh.remove(&output.0).unwrap_or_else(|| self.nodes[output.0].value.clone()))
    }

    /// Recompute every node from the leaves and require bit-identical values.
    pub fn verify_replay(&self) -> Result<()> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let v = if matches!(node.kind, Kind::Leaf) {
                node.value.clone()
            } else {
                let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
                evaluate(&node.kind, &ins, None)?.0
            };
            let same = v.shape() == node.value.shape()
                && v.data().iter().zip(node.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(Error::Consistency(format!("replay of node {id} differs from record")));
            }
            values.push(v);
        }
        Ok(())
    }
}

/// Per-node gradients from [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zero-filled if the loss does not depend on it.
    pub fn of(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[2, 3], |i| i as f64), true);
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_square_gives_x() {
        let mut t = Tape::new();
        let xv = Tensor::from_fn(&[5], |i| i as f64 - 2.5);
        let x = t.leaf(xv.clone(), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let half = t.linear(&[(s, 0.5)]).unwrap();
        let g = t.backward(half).unwrap();
        assert_eq!(g.get(x).unwrap(), &xv);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(t.backward(x), Err(Error::Consistency(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.leaf(Tensor::full(&[3], 2.0), false);
        let x = t.leaf(Tensor::full(&[3], 1.0), true);
        let p = t.mul(c, x).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn replay_is_bit_identical_and_frozen_eval_matches_record() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[2, 4, 4, 4], |_| rng.random_range(-1.0..1.0)), false);
        let w = t.leaf(Tensor::from_fn(&[3, 2, 3, 3, 3], |_| rng.random_range(-0.3..0.3)), true);
        let b = t.leaf(Tensor::zeros(&[3]), true);
        let y = t.conv3d(x, w, Some(b), 1, 1).unwrap();
        let a = t.act(y, Activation::LeakyRelu(0.2)).unwrap();
        let p = t.max_pool2(a).unwrap();
        let s = t.sum(p).unwrap();
        t.verify_replay().unwrap();
        let wv = t.value(w).clone();
        for mode in [Branches::Free, Branches::Frozen] {
            let again = t.eval_with(&[(w, &wv)], s, mode).unwrap();
            assert_eq!(again.item().to_bits(), t.value(s).item().to_bits());
        }
    }
}
