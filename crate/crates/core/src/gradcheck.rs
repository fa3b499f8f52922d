//! Central finite-difference checks of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Branches, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::net::{MotionNet, NetConfig, NetVariant};
use crate::tensor::Tensor;
use crate::train::window_objective;

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Flat coordinate with the largest error.
    pub worst: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    fn record(&mut self, coord: usize, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(REL_FLOOR);
        self.checked += 1;
        if err > self.max_rel_error || self.checked == 1 {
            self.max_rel_error = err;
            self.worst = coord;
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }
}

/// Compare `analytic[i]` with `(f(p + h·e_i) − f(p − h·e_i)) / 2h` at each
/// coordinate in `coords`.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    coords: &[usize],
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    if analytic.len() != params.len() {
        return Err(Error::dim("gradient and parameter lengths differ"));
    }
    if let Some(i) = params.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("parameter {i} is not finite")));
    }
    let mut p = params.to_vec();
    let mut report = GradCheckReport::default();
    for &i in coords {
        let orig = p[i];
        p[i] = orig + h;
        let fp = f(&p)?;
        p[i] = orig - h;
        let fm = f(&p)?;
        p[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!("objective not finite near coordinate {i}")));
        }
        report.record(i, analytic[i], (fp - fm) / (2.0 * h));
    }
    Ok(report)
}

/// `n` coordinates in `0..sizes.iter().sum()`: one from every block first
/// (so every tensor is touched), the rest uniform. Sorted, without repeats
/// when possible.
pub fn sample_coords(sizes: &[usize], n: usize, seed: u64) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = std::collections::BTreeSet::new();
    let mut off = 0;
    for &s in sizes {
        if s > 0 && picked.len() < n {
            picked.insert(off + rng.random_range(0..s));
        }
        off += s;
    }
    let target = n.min(total);
    while picked.len() < target {
        picked.insert(rng.random_range(0..total));
    }
    picked.into_iter().collect()
}

/// Finite-difference check of every gradient flowing into `leaves`, by
/// re-evaluating the recorded tape. `coords` index the concatenation of
/// the leaves' elements.
pub fn check_tape(
    tape: &Tape,
    loss: Var,
    leaves: &[Var],
    grads: &Gradients,
    coords: &[usize],
    h: f64,
    branches: Branches,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let sizes: Vec<usize> = leaves.iter().map(|&v| tape.value(v).len()).collect();
    let mut report = GradCheckReport::default();
    for &c in coords {
        let (mut leaf, mut local) = (0, c);
        while local >= sizes[leaf] {
            local -= sizes[leaf];
            leaf += 1;
            if leaf == sizes.len() {
                return Err(Error::Range(format!("coordinate {c} beyond parameters")));
            }
        }
        let var = leaves[leaf];
        let base = tape.value(var);
        let analytic = grads.get(var).map_or(0.0, |g| g.data()[local]);
        let mut plus = base.clone();
        plus.data_mut()[local] += h;
        let mut minus = base.clone();
        minus.data_mut()[local] -= h;
        let fp = tape.eval_with(&[(var, &plus)], loss, branches)?.item();
        let fm = tape.eval_with(&[(var, &minus)], loss, branches)?.item();
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!("objective not finite near coordinate {c}")));
        }
        report.record(c, analytic, (fp - fm) / (2.0 * h));
    }
    Ok(report)
}

/// Settings of the end-to-end gradient check of a motion network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelCheckConfig {
    pub variant: NetVariant,
    pub extents: [usize; 3],
    pub frames: usize,
    pub coords: usize,
    pub h: f64,
    /// Flow-head init spread, large enough that the warp sees real motion.
    pub flow_init_std: f64,
    pub lambda: f64,
    pub ncc_window: usize,
    pub seed: u64,
}

impl Default for ModelCheckConfig {
    fn default() -> Self {
        Self {
            variant: NetVariant::BConvLstm,
            extents: [16, 16, 32],
            frames: 2,
            coords: 200,
            h: 1e-4,
            flow_init_std: 0.05,
            lambda: 1.0,
            ncc_window: 9,
            seed: 0,
        }
    }
}

/// Compare backpropagated parameter gradients of the full training
/// objective (network, warp, local NCC, smoothness) on random frames with
/// central differences, with activation branches frozen at the base point.
pub fn model_gradcheck(cfg: &ModelCheckConfig) -> Result<GradCheckReport> {
    if cfg.frames == 0 || cfg.coords == 0 {
        return Err(Error::config("gradient check needs at least one frame and one coordinate"));
    }
    let mut net_cfg = NetConfig::new(cfg.variant, cfg.extents);
    net_cfg.flow_init_std = cfg.flow_init_std;
    let net = MotionNet::new(net_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut vol = || Tensor::from_fn(&cfg.extents, |_| rng.random_range(0.0..1.0));
    let reference = vol();
    let moving: Vec<Tensor> = (0..cfg.frames).map(|_| vol()).collect();
    let loss_cfg = LossConfig {
        lambda: cfg.lambda,
        ncc_window: cfg.ncc_window,
        ncc_epsilon: 1e-5,
    };
    loss_cfg.validate()?;
    let mut tape = Tape::new();
    let bound = net.params().bind(&mut tape);
    let refs: Vec<&Tensor> = moving.iter().collect();
    let (loss, _, _) = window_objective(&net, &mut tape, &bound, &reference, &refs, &loss_cfg)?;
    let grads = tape.backward(loss)?;
    let leaves = bound.vars().to_vec();
    let sizes: Vec<usize> = leaves.iter().map(|&v| tape.value(v).len()).collect();
    let coords = sample_coords(&sizes, cfg.coords, cfg.seed);
    check_tape(&tape, loss, &leaves, &grads, &coords, cfg.h, Branches::Frozen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;

    #[test]
    fn quadratic_is_exact_to_rounding() {
        let f = |p: &[f64]| -> Result<f64> { Ok(p.iter().map(|x| 1.5 * x * x - 2.0 * x).sum()) };
        let p = vec![0.3, -1.2, 2.0];
        let g: Vec<f64> = p.iter().map(|x| 3.0 * x - 2.0).collect();
        let r = grad_check(f, &p, &g, 1e-4, &[0, 1, 2]).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn cubic_error_is_second_order() {
        // central difference of x³ is off by exactly h²
        let f = |p: &[f64]| -> Result<f64> { Ok(p[0].powi(3)) };
        let r = grad_check(f, &[2.0], &[12.0], 1e-3, &[0]).unwrap();
        assert!((r.worst_numeric - 12.0 - 1e-6).abs() < 1e-9, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient_and_bad_inputs() {
        let f = |p: &[f64]| -> Result<f64> { Ok(p[0] * p[0]) };
        let r = grad_check(f, &[1.0], &[3.0], 1e-4, &[0]).unwrap();
        assert!(r.max_rel_error > 0.3);
        assert!(grad_check(f, &[1.0], &[2.0], 0.0, &[0]).is_err());
        assert!(matches!(grad_check(f, &[f64::NAN], &[2.0], 1e-4, &[0]), Err(Error::Numeric(_))));
        let g = |_: &[f64]| -> Result<f64> { Ok(f64::INFINITY) };
        assert!(matches!(grad_check(g, &[1.0], &[2.0], 1e-4, &[0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn sampling_touches_every_block() {
        let c = sample_coords(&[3, 1000, 2], 20, 1);
        assert_eq!(c.len(), 20);
        assert!(c.iter().any(|&i| i < 3));
        assert!(c.iter().any(|&i| i >= 1003));
        assert_eq!(c, sample_coords(&[3, 1000, 2], 20, 1));
    }

    #[test]
    fn tape_check_on_tanh_conv() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[1, 4, 4, 4], |i| ((i * 37) % 11) as f64 / 11.0), false);
        let w = t.leaf(Tensor::from_fn(&[2, 1, 3, 3, 3], |i| ((i * 13) % 7) as f64 / 20.0 - 0.15), true);
        let y = t.conv3d(x, w, None, 1, 1).unwrap();
        let a = t.act(y, Activation::Tanh).unwrap();
        let s = t.sum(a).unwrap();
        let g = t.backward(s).unwrap();
        let coords: Vec<usize> = (0..54).collect();
        let r = check_tape(&t, s, &[w], &g, &coords, 1e-4, Branches::Free).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn model_check_on_small_stacked_net() {
        let cfg = ModelCheckConfig {
            variant: NetVariant::SConvLstm,
            extents: [16, 16, 16],
            coords: 30,
            seed: 5,
            ..ModelCheckConfig::default()
        };
        let r = model_gradcheck(&cfg).unwrap();
        assert_eq!(r.checked, 30);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn model_check_rejects_empty_request() {
        let cfg = ModelCheckConfig { frames: 0, ..ModelCheckConfig::default() };
        assert!(model_gradcheck(&cfg).is_err());
    }
}
