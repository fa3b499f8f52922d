//! Convolutional and fully connected LSTM cells.
//!
//! Gate tensors are stacked along the leading axis in the order
//! input, forget, candidate, output, so one convolution per operand
//! produces all four pre-activations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GATES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Candidate = 2,
    Output = 3,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LstmInit {
    pub forget_bias: f64,
}

impl Default for LstmInit {
    fn default() -> Self {
        Self { forget_bias: 1.0 }
    }
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let a = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-a..a))
}

fn gate_bias(hidden: usize, init: LstmInit) -> Tensor {
    Tensor::from_fn(&[GATES * hidden], |i| {
        if i / hidden == Gate::Forget as usize {
            init.forget_bias
        } else {
            0.0
        }
    })
}

fn rows(t: &Tensor, gate: Gate, hidden: usize) -> Tensor {
    let inner: usize = t.shape()[1..].iter().product();
    let start = gate as usize * hidden * inner;
    let mut shape = t.shape().to_vec();
    shape[0] = hidden;
    Tensor::new(shape, t.data()[start..start + hidden * inner].to_vec()).expect("gate slice")
}

/// `w: [4H, C_in, k, k, k]`, `u: [4H, H, k, k, k]`, `b: [4H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmParams {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

impl ConvLstmParams {
    pub fn shapes(c_in: usize, hidden: usize, k: usize) -> [Vec<usize>; 3] {
        [
            vec![GATES * hidden, c_in, k, k, k],
            vec![GATES * hidden, hidden, k, k, k],
            vec![GATES * hidden],
        ]
    }

    pub fn zeros(c_in: usize, hidden: usize, k: usize) -> Self {
        let [w, u, b] = Self::shapes(c_in, hidden, k);
        Self {
            w: Tensor::zeros(&w),
            u: Tensor::zeros(&u),
            b: Tensor::zeros(&b),
        }
    }

    pub fn init(c_in: usize, hidden: usize, k: usize, init: LstmInit, rng: &mut impl Rng) -> Self {
        let [w, u, _] = Self::shapes(c_in, hidden, k);
        let k3 = k * k * k;
        Self {
            w: uniform(&w, c_in * k3, rng),
            u: uniform(&u, hidden * k3, rng),
            b: gate_bias(hidden, init),
        }
    }

    pub fn from_parts(w: Tensor, u: Tensor, b: Tensor) -> Result<Self> {
        let p = Self { w, u, b };
        p.validate()?;
        Ok(p)
    }

    pub fn hidden(&self) -> usize {
        self.w.shape()[0] / GATES
    }

    pub fn input_channels(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.w.shape()[2]
    }

    pub fn count(&self) -> usize {
        self.w.len() + self.u.len() + self.b.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ws = self.w.shape();
        if ws.len() != 5 || ws[0] == 0 || ws[0] % GATES != 0 || !matches!(ws[2], 1 | 3) {
            return Err(Error::dim(format!("ConvLSTM input kernels {ws:?}")));
        }
        let [w, u, b] = Self::shapes(ws[1], ws[0] / GATES, ws[2]);
        if self.w.shape() != w || self.u.shape() != u || self.b.shape() != b {
            return Err(Error::dim(format!(
                "ConvLSTM parameter shapes {:?} {:?} {:?}",
                self.w.shape(),
                self.u.shape(),
                self.b.shape()
            )));
        }
        self.w.check_finite("ConvLSTM W")?;
        self.u.check_finite("ConvLSTM U")?;
        self.b.check_finite("ConvLSTM b")
    }

    pub fn gate_w(&self, g: Gate) -> Tensor {
        rows(&self.w, g, self.hidden())
    }

    pub fn gate_u(&self, g: Gate) -> Tensor {
        rows(&self.u, g, self.hidden())
    }

    pub fn gate_b(&self, g: Gate) -> Tensor {
        rows(&self.b, g, self.hidden())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl ConvLstmState {
    pub fn zeros(hidden: usize, dims: [usize; 3]) -> Self {
        let shape = [hidden, dims[0], dims[1], dims[2]];
        Self {
            h: Tensor::zeros(&shape),
            c: Tensor::zeros(&shape),
        }
    }
}

/// Node handles produced by one cell step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub i: Var,
    pub f: Var,
    pub g: Var,
    pub o: Var,
    pub c: Var,
    pub h: Var,
}

/// Gate algebra on stacked pre-activations `z`.
fn cell(tape: &mut Tape, z: Var, c_prev: Var, hidden: usize) -> Result<StepVars> {
    let zi = tape.slice(z, 0, hidden)?;
    let zf = tape.slice(z, hidden, hidden)?;
    let zg = tape.slice(z, 2 * hidden, hidden)?;
    let zo = tape.slice(z, 3 * hidden, hidden)?;
    let i = tape.sigmoid(zi)?;
    let f = tape.sigmoid(zf)?;
    let g = tape.tanh(zg)?;
    let o = tape.sigmoid(zo)?;
    let ig = tape.mul(i, g)?;
    let fc = tape.mul(f, c_prev)?;
    let c = tape.add(ig, fc)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok(StepVars { i, f, g, o, c, h })
}

/// A ConvLSTM cell whose parameters live on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
    pub hidden: usize,
    pub kernel: usize,
}

impl ConvLstmVars {
    pub fn bind(tape: &mut Tape, p: &ConvLstmParams, requires_grad: bool) -> Result<Self> {
        p.validate()?;
        Ok(Self {
            w: tape.leaf(p.w.clone(), requires_grad),
            u: tape.leaf(p.u.clone(), requires_grad),
            b: tape.leaf(p.b.clone(), requires_grad),
            hidden: p.hidden(),
            kernel: p.kernel(),
        })
    }

    pub fn step(&self, tape: &mut Tape, x: Var, h: Var, c: Var) -> Result<StepVars> {
        let hs = tape.value(h).shape();
        if hs != tape.value(c).shape() || hs.first() != Some(&self.hidden) {
            return Err(Error::dim(format!(
                "ConvLSTM state {hs:?} / {:?} for hidden size {}",
                tape.value(c).shape(),
                self.hidden
            )));
        }
        if tape.value(x).shape()[1..] != hs[1..] {
            return Err(Error::dim("ConvLSTM input and state grids differ"));
        }
        let pad = self.kernel / 2;
        let zx = tape.conv3d(x, self.w, Some(self.b), 1, pad)?;
        let zh = tape.conv3d(h, self.u, None, 1, pad)?;
        let z = tape.add(zx, zh)?;
        cell(tape, z, c, self.hidden)
    }
}

pub fn convlstm_step(p: &ConvLstmParams, x: &Tensor, prev: &ConvLstmState) -> Result<ConvLstmState> {
    let mut tape = Tape::new();
    let cell = ConvLstmVars::bind(&mut tape, p, false)?;
    let x = tape.leaf(x.clone(), false);
    let h = tape.leaf(prev.h.clone(), false);
    let c = tape.leaf(prev.c.clone(), false);
    let s = cell.step(&mut tape, x, h, c)?;
    Ok(ConvLstmState {
        h: tape.value(s.h).clone(),
        c: tape.value(s.c).clone(),
    })
}

/// Hidden states after each element of `xs`.
pub fn convlstm_unroll(p: &ConvLstmParams, xs: &[Tensor], init: &ConvLstmState) -> Result<Vec<Tensor>> {
    if xs.is_empty() {
        return Err(Error::dim("empty ConvLSTM sequence"));
    }
    if xs.iter().any(|x| x.shape() != xs[0].shape()) {
        return Err(Error::dim("ConvLSTM sequence shapes differ"));
    }
    let mut state = init.clone();
    let mut out = Vec::with_capacity(xs.len());
    for x in xs {
        state = convlstm_step(p, x, &state)?;
        out.push(state.h.clone());
    }
    Ok(out)
}

/// `w: [4H, F]`, `u: [4H, H]`, `b: [4H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLstmParams {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

impl DenseLstmParams {
    pub fn shapes(features: usize, hidden: usize) -> [Vec<usize>; 3] {
        [
            vec![GATES * hidden, features],
            vec![GATES * hidden, hidden],
            vec![GATES * hidden],
        ]
    }

    pub fn zeros(features: usize, hidden: usize) -> Self {
        let [w, u, b] = Self::shapes(features, hidden);
        Self {
            w: Tensor::zeros(&w),
            u: Tensor::zeros(&u),
            b: Tensor::zeros(&b),
        }
    }

    pub fn init(features: usize, hidden: usize, init: LstmInit, rng: &mut impl Rng) -> Self {
        let [w, u, _] = Self::shapes(features, hidden);
        Self {
            w: uniform(&w, features, rng),
            u: uniform(&u, hidden, rng),
            b: gate_bias(hidden, init),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w.shape()[0] / GATES
    }

    pub fn features(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn count(&self) -> usize {
        self.w.len() + self.u.len() + self.b.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ws = self.w.shape();
        if ws.len() != 2 || ws[0] == 0 || ws[0] % GATES != 0 {
            return Err(Error::dim(format!("dense LSTM input weights {ws:?}")));
        }
        let [w, u, b] = Self::shapes(ws[1], ws[0] / GATES);
        if self.w.shape() != w || self.u.shape() != u || self.b.shape() != b {
            return Err(Error::dim("dense LSTM parameter shapes are inconsistent"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl DenseLstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(&[hidden]),
            c: Tensor::zeros(&[hidden]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DenseLstmVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
    pub hidden: usize,
}

impl DenseLstmVars {
    pub fn bind(tape: &mut Tape, p: &DenseLstmParams, requires_grad: bool) -> Result<Self> {
        p.validate()?;
        Ok(Self {
            w: tape.leaf(p.w.clone(), requires_grad),
            u: tape.leaf(p.u.clone(), requires_grad),
            b: tape.leaf(p.b.clone(), requires_grad),
            hidden: p.hidden(),
        })
    }

    pub fn step(&self, tape: &mut Tape, x: Var, h: Var, c: Var) -> Result<StepVars> {
        if tape.value(h).shape() != [self.hidden] || tape.value(c).shape() != [self.hidden] {
            return Err(Error::dim("dense LSTM state size differs from hidden size"));
        }
        let zx = tape.matvec(self.w, x)?;
        let zh = tape.matvec(self.u, h)?;
        let z = tape.linear(&[(zx, 1.0), (zh, 1.0), (self.b, 1.0)])?;
        cell(tape, z, c, self.hidden)
    }
}

pub fn dense_lstm_step(p: &DenseLstmParams, x: &Tensor, prev: &DenseLstmState) -> Result<DenseLstmState> {
    let mut tape = Tape::new();
    let cell = DenseLstmVars::bind(&mut tape, p, false)?;
    let x = tape.leaf(x.clone(), false);
    let h = tape.leaf(prev.h.clone(), false);
    let c = tape.leaf(prev.c.clone(), false);
    let s = cell.step(&mut tape, x, h, c)?;
    Ok(DenseLstmState {
        h: tape.value(s.h).clone(),
        c: tape.value(s.c).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::sigmoid;
    use crate::autodiff::Branches;
    use crate::gradcheck::{check_tape, sample_coords};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], a: f64, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-a..a))
    }

    fn random_params(c_in: usize, hid: usize, k: usize, rng: &mut ChaCha8Rng) -> ConvLstmParams {
        let [w, u, b] = ConvLstmParams::shapes(c_in, hid, k);
        ConvLstmParams::from_parts(rand_t(&w, 0.4, rng), rand_t(&u, 0.4, rng), rand_t(&b, 0.4, rng)).unwrap()
    }

    /// Zero-padded correlation of one output channel, one site.
    fn corr(k: &Tensor, o: usize, x: &Tensor, d: [usize; 3], at: [usize; 3]) -> f64 {
        let (cin, ks) = (k.shape()[1], k.shape()[2]);
        let r = (ks / 2) as isize;
        let mut s = 0.0;
        for ci in 0..cin {
            for a in 0..ks {
                for b in 0..ks {
                    for e in 0..ks {
                        let z = at[0] as isize + a as isize - r;
                        let y = at[1] as isize + b as isize - r;
                        let xx = at[2] as isize + e as isize - r;
                        if z < 0 || y < 0 || xx < 0 || z >= d[0] as isize || y >= d[1] as isize || xx >= d[2] as isize {
                            continue;
                        }
                        let kv = k.data()[(((o * cin + ci) * ks + a) * ks + b) * ks + e];
                        let xv = x.data()[((ci * d[0] + z as usize) * d[1] + y as usize) * d[2] + xx as usize];
                        s += kv * xv;
                    }
                }
            }
        }
        s
    }

    /// Straight-line cell equations, one site and channel at a time.
    fn oracle(p: &ConvLstmParams, x: &Tensor, prev: &ConvLstmState) -> ConvLstmState {
        let hid = p.hidden();
        let d = x.map_dims().unwrap().1;
        let n = d[0] * d[1] * d[2];
        let mut h = vec![0.0; hid * n];
        let mut c = vec![0.0; hid * n];
        let pre = |g: Gate, ch: usize, at: [usize; 3]| {
            corr(&p.gate_w(g), ch, x, d, at) + corr(&p.gate_u(g), ch, &prev.h, d, at) + p.gate_b(g).data()[ch]
        };
        for ch in 0..hid {
            for z in 0..d[0] {
                for y in 0..d[1] {
                    for xx in 0..d[2] {
                        let at = [z, y, xx];
                        let i = sigmoid(pre(Gate::Input, ch, at));
                        let f = sigmoid(pre(Gate::Forget, ch, at));
                        let g = pre(Gate::Candidate, ch, at).tanh();
                        let o = sigmoid(pre(Gate::Output, ch, at));
                        let idx = ch * n + (z * d[1] + y) * d[2] + xx;
                        c[idx] = i * g + f * prev.c.data()[idx];
                        h[idx] = o * c[idx].tanh();
                    }
                }
            }
        }
        let shape = prev.h.shape().to_vec();
        ConvLstmState {
            h: Tensor::new(shape.clone(), h).unwrap(),
            c: Tensor::new(shape, c).unwrap(),
        }
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
        a.shape() == b.shape()
            && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol * x.abs().max(y.abs()).max(1.0))
    }

    #[test]
    fn zero_params_fixed_points() {
        let p = ConvLstmParams::zeros(2, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&[2, 3, 3, 3], 1.0, &mut rng);
        let s = convlstm_step(&p, &x, &ConvLstmState::zeros(3, [3, 3, 3])).unwrap();
        assert!(s.h.data().iter().chain(s.c.data()).all(|&v| v == 0.0));

        let c0 = rand_t(&[3, 3, 3, 3], 2.0, &mut rng);
        let prev = ConvLstmState { h: rand_t(&[3, 3, 3, 3], 0.9, &mut rng), c: c0.clone() };
        let s = convlstm_step(&p, &x, &prev).unwrap();
        assert_eq!(s.c, c0.scale(0.5));
        assert!(close(&s.h, &c0.map(|v| 0.5 * (0.5 * v).tanh()), 1e-15));
    }

    #[test]
    fn zero_params_gates_are_half() {
        let p = ConvLstmParams::zeros(1, 2, 3);
        let mut tape = Tape::new();
        let cell = ConvLstmVars::bind(&mut tape, &p, false).unwrap();
        let x = tape.leaf(Tensor::full(&[1, 2, 2, 2], 3.0), false);
        let h = tape.leaf(Tensor::zeros(&[2, 2, 2, 2]), false);
        let c = tape.leaf(Tensor::zeros(&[2, 2, 2, 2]), false);
        let s = cell.step(&mut tape, x, h, c).unwrap();
        for g in [s.i, s.f, s.o] {
            assert!(tape.value(g).data().iter().all(|&v| v == 0.5));
        }
        assert!(tape.value(s.g).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let p = random_params(2, 2, 3, &mut rng);
            let x = rand_t(&[2, 3, 3, 3], 1.0, &mut rng);
            let prev = ConvLstmState { h: rand_t(&[2, 3, 3, 3], 0.9, &mut rng), c: rand_t(&[2, 3, 3, 3], 1.5, &mut rng) };
            let got = convlstm_step(&p, &x, &prev).unwrap();
            let want = oracle(&p, &x, &prev);
            assert!(close(&got.h, &want.h, 1e-12) && close(&got.c, &want.c, 1e-12));
        }
    }

    #[test]
    fn unroll_equals_chained_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(2, 3, 3, &mut rng);
        let xs: Vec<Tensor> = (0..3).map(|_| rand_t(&[2, 2, 3, 2], 1.0, &mut rng)).collect();
        let init = ConvLstmState::zeros(3, [2, 3, 2]);
        let hs = convlstm_unroll(&p, &xs, &init).unwrap();
        let mut s = init.clone();
        for (x, h) in xs.iter().zip(&hs) {
            s = convlstm_step(&p, x, &s).unwrap();
            assert_eq!(&s.h, h);
        }
        assert_eq!(convlstm_unroll(&p, &xs[..1], &init).unwrap()[0], convlstm_step(&p, &xs[0], &init).unwrap().h);
        let z = convlstm_unroll(&ConvLstmParams::zeros(2, 3, 3), &xs, &init).unwrap();
        assert!(z.iter().all(|h| h.data().iter().all(|&v| v == 0.0)));
        assert!(convlstm_unroll(&p, &[], &init).is_err());
    }

    #[test]
    fn shape_errors() {
        let p = ConvLstmParams::zeros(2, 3, 3);
        let x = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(convlstm_step(&p, &x, &ConvLstmState::zeros(3, [3, 3, 3])), Err(Error::Dimension(_))));
        let x = Tensor::zeros(&[2, 3, 3, 3]);
        assert!(matches!(convlstm_step(&p, &x, &ConvLstmState::zeros(2, [3, 3, 3])), Err(Error::Dimension(_))));
        assert!(matches!(convlstm_step(&p, &x, &ConvLstmState::zeros(3, [3, 3, 4])), Err(Error::Dimension(_))));
    }

    #[test]
    fn dense_two_unit_hand_case() {
        // H = 1, F = 1: w = [0.5, −0.5, 1, 2], u = [0.1, 0.2, 0.3, 0.4], b = 0
        let p = DenseLstmParams {
            w: Tensor::new(vec![4, 1], vec![0.5, -0.5, 1.0, 2.0]).unwrap(),
            u: Tensor::new(vec![4, 1], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            b: Tensor::zeros(&[4]),
        };
        let prev = DenseLstmState {
            h: Tensor::new(vec![1], vec![1.0]).unwrap(),
            c: Tensor::new(vec![1], vec![2.0]).unwrap(),
        };
        let s = dense_lstm_step(&p, &Tensor::new(vec![1], vec![1.0]).unwrap(), &prev).unwrap();
        // i = σ(0.6), f = σ(−0.3), g = tanh(1.3), o = σ(2.4)
        let i = 1.0 / (1.0 + (-0.6f64).exp());
        let f = 1.0 / (1.0 + 0.3f64.exp());
        let g = 1.3f64.tanh();
        let o = 1.0 / (1.0 + (-2.4f64).exp());
        let c = i * g + f * 2.0;
        assert!((s.c.data()[0] - c).abs() < 1e-15);
        assert!((s.h.data()[0] - o * c.tanh()).abs() < 1e-15);

        // two units, diagonal weights: each unit evolves independently
        let mut p2 = DenseLstmParams::zeros(2, 2);
        for gi in 0..4 {
            for u in 0..2 {
                p2.w.data_mut()[(gi * 2 + u) * 2 + u] = p.w.data()[gi] * (u + 1) as f64;
            }
        }
        let x2 = Tensor::new(vec![2], vec![1.0, 0.5]).unwrap();
        let s2 = dense_lstm_step(&p2, &x2, &DenseLstmState::zeros(2)).unwrap();
        for u in 0..2 {
            let pre = |gi: usize| p.w.data()[gi] * (u + 1) as f64 * x2.data()[u];
            let c = sigmoid(pre(0)) * pre(2).tanh();
            assert!((s2.c.data()[u] - c).abs() < 1e-15);
            assert!((s2.h.data()[u] - sigmoid(pre(3)) * c.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn dense_zero_params_fixed_points() {
        let p = DenseLstmParams::zeros(4, 3);
        let prev = DenseLstmState { h: Tensor::full(&[3], 0.3), c: Tensor::full(&[3], -1.2) };
        let s = dense_lstm_step(&p, &Tensor::full(&[4], 5.0), &prev).unwrap();
        assert_eq!(s.c, Tensor::full(&[3], -0.6));
        assert!(dense_lstm_step(&p, &Tensor::zeros(&[3]), &prev).is_err());
    }

    #[test]
    fn dense_matches_center_only_conv_on_single_site() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (f, hid) = (3, 2);
        let p = random_params(f, hid, 1, &mut rng);
        let dense = DenseLstmParams {
            w: p.w.clone().reshape(&[4 * hid, f]).unwrap(),
            u: p.u.clone().reshape(&[4 * hid, hid]).unwrap(),
            b: p.b.clone(),
        };
        let x = rand_t(&[f, 1, 1, 1], 1.0, &mut rng);
        let prev = ConvLstmState { h: rand_t(&[hid, 1, 1, 1], 0.9, &mut rng), c: rand_t(&[hid, 1, 1, 1], 1.0, &mut rng) };
        let a = convlstm_step(&p, &x, &prev).unwrap();
        let b = dense_lstm_step(
            &dense,
            &x.clone().reshape(&[f]).unwrap(),
            &DenseLstmState { h: prev.h.clone().reshape(&[hid]).unwrap(), c: prev.c.clone().reshape(&[hid]).unwrap() },
        )
        .unwrap();
        assert!(close(&a.h.reshape(&[hid]).unwrap(), &b.h, 1e-14));
        assert!(close(&a.c.reshape(&[hid]).unwrap(), &b.c, 1e-14));

        // a 3³ kernel with only its centre tap set acts like the 1³ kernel
        let mut p3 = ConvLstmParams::zeros(f, hid, 3);
        for o in 0..4 * hid {
            for ci in 0..f {
                p3.w.data_mut()[(o * f + ci) * 27 + 13] = p.w.data()[o * f + ci];
            }
            for ci in 0..hid {
                p3.u.data_mut()[(o * hid + ci) * 27 + 13] = p.u.data()[o * hid + ci];
            }
        }
        p3.b = p.b.clone();
        let c = convlstm_step(&p3, &x, &prev).unwrap();
        assert!(close(&c.h.reshape(&[hid]).unwrap(), &b.h, 1e-14));
    }

    #[test]
    fn pointwise_cell_commutes_with_site_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(2, 2, 1, &mut rng);
        let dims = [2, 2, 3];
        let n = 12;
        let x = rand_t(&[2, 2, 2, 3], 1.0, &mut rng);
        let prev = ConvLstmState { h: rand_t(&[2, 2, 2, 3], 0.9, &mut rng), c: rand_t(&[2, 2, 2, 3], 1.0, &mut rng) };
        let perm: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % n).collect();
        let permute = |t: &Tensor| {
            let c = t.shape()[0];
            Tensor::from_fn(t.shape(), |i| t.data()[(i / n) * n + perm[i % n]]).reshape(&[c, dims[0], dims[1], dims[2]]).unwrap()
        };
        let a = convlstm_step(&p, &permute(&x), &ConvLstmState { h: permute(&prev.h), c: permute(&prev.c) }).unwrap();
        let b = convlstm_step(&p, &x, &prev).unwrap();
        assert_eq!(a.h, permute(&b.h));
        assert_eq!(a.c, permute(&b.c));
    }

    #[test]
    fn two_step_unroll_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_params(2, 2, 3, &mut rng);
        let mut tape = Tape::new();
        let cell = ConvLstmVars::bind(&mut tape, &p, true).unwrap();
        let mut h = tape.leaf(Tensor::zeros(&[2, 3, 3, 3]), false);
        let mut c = tape.leaf(Tensor::zeros(&[2, 3, 3, 3]), false);
        let target = tape.leaf(rand_t(&[2, 3, 3, 3], 1.0, &mut rng), false);
        for _ in 0..2 {
            let x = tape.leaf(rand_t(&[2, 3, 3, 3], 1.0, &mut rng), true);
            let s = cell.step(&mut tape, x, h, c).unwrap();
            h = s.h;
            c = s.c;
        }
        let prod = tape.mul(h, target).unwrap();
        let loss = tape.sum(prod).unwrap();
        let g = tape.backward(loss).unwrap();
        let leaves = [cell.w, cell.u, cell.b];
        let sizes: Vec<usize> = leaves.iter().map(|&v| tape.value(v).len()).collect();
        let coords = sample_coords(&sizes, 200, 1);
        let r = check_tape(&tape, loss, &leaves, &g, &coords, 1e-4, Branches::Free).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn init_forget_bias_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ConvLstmParams::init(4, 3, 3, LstmInit::default(), &mut rng);
        assert_eq!(p.gate_b(Gate::Forget).data(), &[1.0; 3]);
        assert_eq!(p.gate_b(Gate::Input).data(), &[0.0; 3]);
        let a = (1.0 / 108.0f64).sqrt();
        assert!(p.w.data().iter().all(|v| v.abs() <= a));
        assert_eq!(p.count(), 4 * (27 * 7 * 3 + 3));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn gate_ranges_and_state_bounds(seed in 0u64..10_000, scale in 0.1f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(2, 2, 3, &mut rng);
            let mut tape = Tape::new();
            let cell = ConvLstmVars::bind(&mut tape, &p, false).unwrap();
            let x = tape.leaf(rand_t(&[2, 2, 2, 2], scale, &mut rng), false);
            let h = tape.leaf(rand_t(&[2, 2, 2, 2], 0.99, &mut rng), false);
            let c0 = rand_t(&[2, 2, 2, 2], 3.0 * scale, &mut rng);
            let c = tape.leaf(c0.clone(), false);
            let s = cell.step(&mut tape, x, h, c).unwrap();
            for g in [s.i, s.f, s.o] {
                prop_assert!(tape.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
            prop_assert!(tape.value(s.h).data().iter().all(|v| v.abs() < 1.0));
            for (ct, cp) in tape.value(s.c).data().iter().zip(c0.data()) {
                prop_assert!(ct.abs() <= cp.abs() + 1.0);
            }
        }
    }
}
