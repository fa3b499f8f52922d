//! Voxel-wise Patlak fitting, normalized fitting error, and the Ki/Vb
//! alignment metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::FrameSeries;
use crate::tensor::Tensor;

/// Default Patlak start time (min).
pub const T_STAR: f64 = 20.0;
/// F-18 half-life (min).
pub const F18_HALF_LIFE: f64 = 109.77;

/// Sampled plasma input function. The first sample is at `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputFunction {
    times: Vec<f64>,
    values: Vec<f64>,
    /// Trapezoidal integral up to each sample.
    cumulative: Vec<f64>,
}

impl InputFunction {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times.len() != values.len() {
            return Err(Error::config("input function needs ≥ 2 samples with matching values"));
        }
        if times[0] != 0.0 {
            return Err(Error::config("input function must start at t = 0"));
        }
        if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("input function times must be strictly increasing"));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("input function values must be finite and ≥ 0"));
        }
        let mut cumulative = Vec::with_capacity(times.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for k in 1..times.len() {
            acc += 0.5 * (values[k] + values[k - 1]) * (times[k] - times[k - 1]);
            cumulative.push(acc);
        }
        Ok(Self {
            times,
            values,
            cumulative,
        })
    }

    /// Sample `f` on a uniform grid `0, dt, …, t_end`.
    pub fn sampled(f: impl Fn(f64) -> f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && t_end > 0.0) {
            return Err(Error::config("sampling step and end time must be positive"));
        }
        let n = (t_end / dt).ceil() as usize;
        let times: Vec<f64> = (0..=n).map(|k| (k as f64 * dt).min(t_end)).collect();
        let values = times.iter().map(|&t| f(t)).collect();
        Self::new(times, values)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let last = *self.times.last().expect("nonempty");
        if !(t >= 0.0 && t <= last) {
            return Err(Error::Range(format!("time {t} outside input-function range [0, {last}]")));
        }
        let k = self.times.partition_point(|&s| s <= t).clamp(1, self.times.len() - 1);
        Ok((k - 1, t - self.times[k - 1]))
    }

    /// Linear interpolation of C_P.
    pub fn value_at(&self, t: f64) -> Result<f64> {
        let (k, dt) = self.locate(t)?;
        let slope = (self.values[k + 1] - self.values[k]) / (self.times[k + 1] - self.times[k]);
        Ok(self.values[k] + slope * dt)
    }
}

/// Trapezoidal `∫₀ᵗ C_P(τ) dτ`, exact for piecewise-linear C_P.
pub fn cumulative_input(ifn: &InputFunction, t: f64) -> Result<f64> {
    let (k, dt) = ifn.locate(t)?;
    let v = ifn.value_at(t)?;
    Ok(ifn.cumulative[k] + 0.5 * (ifn.values[k] + v) * dt)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeActivityCurve {
    pub mid_times: Vec<f64>,
    pub values: Vec<f64>,
    pub durations: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum WeightModel {
    Uniform,
    /// `w_k = Δt_k · exp(−ln2/T½ · t_k)`.
    Decay { half_life_min: f64 },
}

impl Default for WeightModel {
    fn default() -> Self {
        WeightModel::Decay {
            half_life_min: F18_HALF_LIFE,
        }
    }
}

impl WeightModel {
    pub fn weight(&self, mid_time: f64, duration: f64) -> f64 {
        match *self {
            WeightModel::Uniform => 1.0,
            WeightModel::Decay { half_life_min } => duration * (-std::f64::consts::LN_2 / half_life_min * mid_time).exp(),
        }
    }
}

/// Regression weights for the frames after t*.
#[derive(Clone, Debug, PartialEq)]
pub struct FitWeights(Vec<f64>);

impl FitWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config("fit weights must be positive"));
        }
        Ok(Self(w))
    }

    pub fn from_model(model: WeightModel, mid_times: &[f64], durations: &[f64]) -> Result<Self> {
        Self::new(mid_times.iter().zip(durations).map(|(&t, &d)| model.weight(t, d)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PatlakFit {
    pub ki: f64,
    pub vb: f64,
    /// Singular normal equations; `ki = 0` and `vb` is the C_T/C_P ratio.
    pub degenerate: bool,
}

/// Regressors of the frames after t*, shared by every voxel of a series.
#[derive(Clone, Debug, PartialEq)]
pub struct PatlakDesign {
    /// Indices of the fitted frames within the full curve.
    pub frames: Vec<usize>,
    pub integral: Vec<f64>,
    pub plasma: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PatlakDesign {
    /// `weights` has one entry per frame with `t_k ≥ t_star`.
    pub fn new(mid_times: &[f64], ifn: &InputFunction, t_star: f64, weights: &FitWeights) -> Result<Self> {
        let frames: Vec<usize> = (0..mid_times.len()).filter(|&k| mid_times[k] >= t_star).collect();
        if frames.len() < 2 {
            return Err(Error::Config(format!("{} frames after t* = {t_star}; need ≥ 2", frames.len())));
        }
        if weights.values().len() != frames.len() {
            return Err(Error::dim(format!(
                "{} weights for {} frames after t*",
                weights.values().len(),
                frames.len()
            )));
        }
        let mut integral = Vec::with_capacity(frames.len());
        let mut plasma = Vec::with_capacity(frames.len());
        for &k in &frames {
            let cp = ifn.value_at(mid_times[k])?;
            if cp <= 0.0 {
                return Err(Error::Config(format!("C_P({}) is not positive", mid_times[k])));
            }
            integral.push(cumulative_input(ifn, mid_times[k])?);
            plasma.push(cp);
        }
        Ok(Self {
            frames,
            integral,
            plasma,
            weights: weights.values().to_vec(),
        })
    }

    /// Design with weights from a model evaluated at the fitted frames.
    pub fn with_model(mid_times: &[f64], durations: &[f64], ifn: &InputFunction, t_star: f64, model: WeightModel) -> Result<Self> {
        let (t, d): (Vec<f64>, Vec<f64>) = mid_times
            .iter()
            .zip(durations)
            .filter(|(t, _)| **t >= t_star)
            .map(|(&t, &d)| (t, d))
            .unzip();
        Self::new(mid_times, ifn, t_star, &FitWeights::from_model(model, &t, &d)?)
    }

    pub fn n(&self) -> usize {
        self.frames.len()
    }

    /// Weighted least squares of `C_T = Ki·∫C_P + Vb·C_P` on the full curve `ct`.
    pub fn fit(&self, ct: &[f64]) -> PatlakFit {
        // columns scaled to unit weighted norm before solving
        let (mut s11, mut s22) = (0.0, 0.0);
        for k in 0..self.n() {
            s11 += self.weights[k] * self.integral[k] * self.integral[k];
            s22 += self.weights[k] * self.plasma[k] * self.plasma[k];
        }
        let (n1, n2) = (s11.sqrt(), s22.sqrt());
        let (mut a12, mut r1, mut r2) = (0.0, 0.0, 0.0);
        for (k, &f) in self.frames.iter().enumerate() {
            let (x1, x2, w) = (self.integral[k] / n1, self.plasma[k] / n2, self.weights[k]);
            a12 += w * x1 * x2;
            r1 += w * x1 * ct[f];
            r2 += w * x2 * ct[f];
        }
        let det = 1.0 - a12 * a12;
        if !(det > 1e-12) {
            return PatlakFit {
                ki: 0.0,
                vb: r2 / n2,
                degenerate: true,
            };
        }
        PatlakFit {
            ki: (r1 - a12 * r2) / det / n1,
            vb: (r2 - a12 * r1) / det / n2,
            degenerate: false,
        }
    }

    pub fn predict(&self, fit: &PatlakFit, k: usize) -> f64 {
        fit.ki * self.integral[k] + fit.vb * self.plasma[k]
    }

    /// `Σ w_k(Ĉ−C)² / ((n−2)·Σ (w_k C_k / n)²)`.
    pub fn nfe(&self, ct: &[f64], fit: &PatlakFit) -> Result<f64> {
        let n = self.n();
        if n < 3 {
            return Err(Error::Undefined(format!("NFE needs ≥ 3 frames after t*, got {n}")));
        }
        let (mut num, mut den) = (0.0, 0.0);
        for (k, &f) in self.frames.iter().enumerate() {
            let w = self.weights[k];
            num += w * (self.predict(fit, k) - ct[f]).powi(2);
            den += (w * ct[f] / n as f64).powi(2);
        }
        if den == 0.0 {
            return Err(Error::Undefined("NFE denominator is zero (all activities zero)".into()));
        }
        Ok(num / ((n - 2) as f64 * den))
    }
}

pub fn patlak_fit(tac: &TimeActivityCurve, ifn: &InputFunction, t_star: f64, w: &FitWeights) -> Result<PatlakFit> {
    check_tac(tac)?;
    Ok(PatlakDesign::new(&tac.mid_times, ifn, t_star, w)?.fit(&tac.values))
}

pub fn nfe(tac: &TimeActivityCurve, fitted: &PatlakFit, ifn: &InputFunction, w: &FitWeights, t_star: f64) -> Result<f64> {
    check_tac(tac)?;
    PatlakDesign::new(&tac.mid_times, ifn, t_star, w)?.nfe(&tac.values, fitted)
}

fn check_tac(tac: &TimeActivityCurve) -> Result<()> {
    if tac.values.len() != tac.mid_times.len() || tac.durations.len() != tac.mid_times.len() {
        return Err(Error::dim("time-activity curve lengths differ"));
    }
    crate::series::validate_timing(&tac.mid_times, &tac.durations)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParametricMaps {
    pub ki: Tensor,
    pub vb: Tensor,
    pub nfe: Tensor,
    /// 1 where the voxel was below the activity floor or its fit was singular.
    pub degenerate: Tensor,
}

impl ParametricMaps {
    pub fn valid(&self) -> Vec<bool> {
        self.degenerate.data().iter().map(|&d| d == 0.0).collect()
    }

    /// Mean and maximum NFE over valid voxels.
    pub fn nfe_summary(&self) -> Result<(f64, f64)> {
        summarize(&self.nfe, &self.valid())
    }
}

/// Mean and maximum of `t` over `mask`.
pub fn summarize(t: &Tensor, mask: &[bool]) -> Result<(f64, f64)> {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut max = f64::NEG_INFINITY;
    for (&v, &m) in t.data().iter().zip(mask) {
        if m {
            n += 1;
            sum += v;
            max = max.max(v);
        }
    }
    if n == 0 {
        return Err(Error::Undefined("no voxels in mask".into()));
    }
    Ok((sum / n as f64, max))
}

/// Fit every voxel. Voxels whose mean activity after t* is at most 1e-6 of
/// the series maximum are masked as degenerate with all maps 0.
pub fn parametric_maps(series: &FrameSeries, ifn: &InputFunction, t_star: f64, weights: WeightModel) -> Result<ParametricMaps> {
    let design = PatlakDesign::with_model(series.mid_times(), series.durations(), ifn, t_star, weights)?;
    let dims = series.dims().to_vec();
    let n_vox: usize = dims.iter().product();
    let vmax = series
        .frames()
        .iter()
        .flat_map(|f| f.data().iter().copied())
        .fold(0.0f64, f64::max);
    let floor = 1e-6 * vmax;
    let mut ki = vec![0.0; n_vox];
    let mut vb = vec![0.0; n_vox];
    let mut nf = vec![0.0; n_vox];
    let mut deg = vec![0.0; n_vox];
    let mut ct = vec![0.0; series.len()];
    for i in 0..n_vox {
        for (k, f) in series.frames().iter().enumerate() {
            ct[k] = f.data()[i];
        }
        let mean = design.frames.iter().map(|&k| ct[k]).sum::<f64>() / design.n() as f64;
        if !(mean > floor) {
            deg[i] = 1.0;
            continue;
        }
        let fit = design.fit(&ct);
        ki[i] = fit.ki;
        vb[i] = fit.vb;
        match design.nfe(&ct, &fit) {
            Ok(e) => nf[i] = e,
            Err(_) => deg[i] = 1.0,
        }
        if fit.degenerate {
            deg[i] = 1.0;
        }
    }
    Ok(ParametricMaps {
        ki: Tensor::new(dims.clone(), ki)?,
        vb: Tensor::new(dims.clone(), vb)?,
        nfe: Tensor::new(dims.clone(), nf)?,
        degenerate: Tensor::new(dims, deg)?,
    })
}

fn entropy(counts: impl Iterator<Item = u64>, total: f64) -> f64 {
    -counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / total;
            p * p.ln()
        })
        .sum::<f64>()
}

fn bin_indices(x: &[f64], bins: usize) -> Result<Vec<usize>> {
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !(hi > lo) {
        return Err(Error::Undefined("constant image has zero entropy".into()));
    }
    let scale = bins as f64 / (hi - lo);
    Ok(x.iter().map(|&v| (((v - lo) * scale) as usize).min(bins - 1)).collect())
}

/// `(H(A) + H(B)) / H(A,B)` from a `bins × bins` joint histogram over each
/// image's min–max range.
pub fn nmi_values(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim("NMI inputs differ in length or are empty"));
    }
    if bins < 2 {
        return Err(Error::config("NMI needs ≥ 2 bins"));
    }
    let ia = bin_indices(a, bins)?;
    let ib = bin_indices(b, bins)?;
    let mut ha = vec![0u64; bins];
    let mut hb = vec![0u64; bins];
    let mut joint = vec![0u64; bins * bins];
    for (&x, &y) in ia.iter().zip(&ib) {
        ha[x] += 1;
        hb[y] += 1;
        joint[x * bins + y] += 1;
    }
    let n = a.len() as f64;
    let hj = entropy(joint.into_iter(), n);
    if hj == 0.0 {
        return Err(Error::Undefined("joint entropy is zero".into()));
    }
    Ok((entropy(ha.into_iter(), n) + entropy(hb.into_iter(), n)) / hj)
}

pub fn nmi(a: &Tensor, b: &Tensor, bins: usize) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("NMI inputs differ in shape"));
    }
    nmi_values(a.data(), b.data(), bins)
}

/// Pearson correlation.
pub fn global_ncc_values(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim("NCC inputs differ in length or are empty"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("NCC of a constant image".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn global_ncc(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("NCC inputs differ in shape"));
    }
    global_ncc_values(a.data(), b.data())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RoiStats {
    pub mean: f64,
    pub max: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn roi_stats(ki: &Tensor, mask: &[bool]) -> Result<RoiStats> {
    if mask.len() != ki.len() {
        return Err(Error::dim("ROI mask and map differ in size"));
    }
    let vals: Vec<f64> = ki.data().iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    if vals.is_empty() {
        return Err(Error::Undefined("empty ROI mask".into()));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(RoiStats {
        mean,
        max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        std: var.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn biexp(t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else {
            (1.0 - (-4.0 * t).exp()) * (3.0 * (-0.5 * t).exp() + 1.2 * (-0.01 * t).exp())
        }
    }

    fn ifn() -> InputFunction {
        InputFunction::sampled(biexp, 90.0, 0.05).unwrap()
    }

    fn mids() -> (Vec<f64>, Vec<f64>) {
        crate::series::uniform_timing(8, 22.5, 5.0)
    }

    fn gen(ifn: &InputFunction, t: &[f64], ki: f64, vb: f64) -> Vec<f64> {
        t.iter()
            .map(|&t| ki * cumulative_input(ifn, t).unwrap() + vb * ifn.value_at(t).unwrap())
            .collect()
    }

    #[test]
    fn quadrature_exact_cases() {
        let c = InputFunction::new(vec![0.0, 1.0, 3.0, 10.0], vec![2.0; 4]).unwrap();
        assert!((cumulative_input(&c, 7.3).unwrap() - 14.6).abs() < 1e-12);
        let l = InputFunction::new(vec![0.0, 0.5, 4.0, 10.0], vec![0.0, 1.5, 12.0, 30.0]).unwrap();
        for t in [0.0, 0.3, 2.0, 9.99] {
            assert!((cumulative_input(&l, t).unwrap() - 1.5 * t * t).abs() < 1e-12);
        }
        assert!(matches!(cumulative_input(&l, 10.5), Err(Error::Range(_))));
        assert!(matches!(cumulative_input(&l, -0.1), Err(Error::Range(_))));
        assert!(InputFunction::new(vec![0.0, 1.0, 1.0], vec![0.0; 3]).is_err());
        assert!(InputFunction::new(vec![0.5, 1.0], vec![0.0; 2]).is_err());
    }

    #[test]
    fn quadrature_matches_dense_reference() {
        // midpoint rule on 10⁶ panels as the reference integral of the sampled curve
        let f = ifn();
        let t = 47.5;
        let n = 1_000_000;
        let h = t / n as f64;
        let reference: f64 = (0..n).map(|k| f.value_at((k as f64 + 0.5) * h).unwrap()).sum::<f64>() * h;
        let got = cumulative_input(&f, t).unwrap();
        assert!(((got - reference) / reference).abs() < 1e-6);
    }

    #[test]
    fn exact_recovery() {
        let f = ifn();
        let (t, d) = mids();
        let tac = TimeActivityCurve { values: gen(&f, &t, 0.01, 0.05), mid_times: t.clone(), durations: d.clone() };
        let w = FitWeights::from_model(WeightModel::default(), &t, &d).unwrap();
        let fit = patlak_fit(&tac, &f, T_STAR, &w).unwrap();
        assert!(((fit.ki - 0.01) / 0.01).abs() < 1e-10);
        assert!(((fit.vb - 0.05) / 0.05).abs() < 1e-10);
        assert!(nfe(&tac, &fit, &f, &w, T_STAR).unwrap() <= 1e-12);

        let pure = TimeActivityCurve { values: gen(&f, &t, 0.0, 0.05), mid_times: t, durations: d };
        let fit = patlak_fit(&pure, &f, T_STAR, &w).unwrap();
        assert!(fit.ki.abs() < 1e-12 && (fit.vb - 0.05).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn exact_for_any_positive_weights(
            ki in 1e-4f64..0.1, vb in 1e-3f64..1.0,
            w in proptest::collection::vec(0.01f64..10.0, 8),
        ) {
            let f = ifn();
            let (t, d) = mids();
            let tac = TimeActivityCurve { values: gen(&f, &t, ki, vb), mid_times: t, durations: d };
            let w = FitWeights::new(w).unwrap();
            let fit = patlak_fit(&tac, &f, T_STAR, &w).unwrap();
            prop_assert!(((fit.ki - ki) / ki).abs() <= 1e-10);
            prop_assert!(((fit.vb - vb) / vb).abs() <= 1e-10);
            prop_assert!(nfe(&tac, &fit, &f, &w, T_STAR).unwrap() <= 1e-12);
        }

        #[test]
        fn nfe_scale_invariant(seed in 0u64..1000, k in 0.01f64..100.0) {
            let f = ifn();
            let (t, d) = mids();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = gen(&f, &t, 0.02, 0.1).iter().map(|v| v * (1.0 + 0.05 * rng.random_range(-1.0..1.0))).collect();
            let w = FitWeights::from_model(WeightModel::default(), &t, &d).unwrap();
            let a = TimeActivityCurve { values: vals.clone(), mid_times: t.clone(), durations: d.clone() };
            let b = TimeActivityCurve { values: vals.iter().map(|v| v * k).collect(), mid_times: t, durations: d };
            let ea = nfe(&a, &patlak_fit(&a, &f, T_STAR, &w).unwrap(), &f, &w, T_STAR).unwrap();
            let eb = nfe(&b, &patlak_fit(&b, &f, T_STAR, &w).unwrap(), &f, &w, T_STAR).unwrap();
            prop_assert!((ea - eb).abs() <= 1e-9 * ea.max(1e-300));
        }
    }

    #[test]
    fn inverse_square_plasma_weights_equal_patlak_coordinate_ols() {
        let f = ifn();
        let (t, d) = mids();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vals: Vec<f64> = gen(&f, &t, 0.015, 0.3).iter().map(|v| v + 0.01 * rng.random_range(-1.0..1.0)).collect();
        let cp: Vec<f64> = t.iter().map(|&x| f.value_at(x).unwrap()).collect();
        let w = FitWeights::new(cp.iter().map(|c| 1.0 / (c * c)).collect()).unwrap();
        let tac = TimeActivityCurve { values: vals.clone(), mid_times: t.clone(), durations: d };
        let fit = patlak_fit(&tac, &f, T_STAR, &w).unwrap();
        // ordinary least squares of y = C_T/C_P on x = ∫C_P / C_P
        let x: Vec<f64> = t.iter().zip(&cp).map(|(&s, c)| cumulative_input(&f, s).unwrap() / c).collect();
        let y: Vec<f64> = vals.iter().zip(&cp).map(|(v, c)| v / c).collect();
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let slope = sxy / sxx;
        assert!((fit.ki - slope).abs() < 1e-10 * slope.abs());
        assert!((fit.vb - (my - slope * mx)).abs() < 1e-9);
    }

    #[test]
    fn nfe_hand_case() {
        // C_P = 1 everywhere ⇒ ∫C_P = t; frames at 21, 22, 23 with C_T = 1, 2, 2
        let f = InputFunction::new(vec![0.0, 30.0], vec![1.0, 1.0]).unwrap();
        let tac = TimeActivityCurve { mid_times: vec![21.0, 22.0, 23.0], values: vec![1.0, 2.0, 2.0], durations: vec![1.0; 3] };
        let w = FitWeights::new(vec![1.0; 3]).unwrap();
        let fit = patlak_fit(&tac, &f, T_STAR, &w).unwrap();
        // line through (21,1),(22,2),(23,2): slope 0.5, intercept 5/3 − 0.5·22 = −28/3
        assert!((fit.ki - 0.5).abs() < 1e-10);
        assert!((fit.vb + 28.0 / 3.0).abs() < 1e-9);
        // residuals −1/6, 1/3, −1/6 ⇒ Σ = 1/6; denominator (3−2)·(1+4+4)/9 = 1
        let e = nfe(&tac, &fit, &f, &w, T_STAR).unwrap();
        assert!((e - 1.0 / 6.0).abs() < 1e-10);
        let zero = TimeActivityCurve { values: vec![0.0; 3], ..tac };
        assert!(matches!(nfe(&zero, &fit, &f, &w, T_STAR), Err(Error::Undefined(_))));
    }

    #[test]
    fn degenerate_fit_falls_back_to_ratio() {
        // ∫C_P / C_P = 15 at t = 30, 40, 50 makes the two regressors collinear
        let f = InputFunction::new(vec![0.0, 30.0, 40.0, 50.0], vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        let t = vec![30.0, 40.0, 50.0];
        let tac = TimeActivityCurve { values: t.iter().map(|&x| 0.2 * f.value_at(x).unwrap()).collect(), mid_times: t, durations: vec![1.0; 3] };
        let w = FitWeights::new(vec![1.0; 3]).unwrap();
        let fit = patlak_fit(&tac, &f, T_STAR, &w).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.ki, 0.0);
        assert!((fit.vb - 0.2).abs() < 1e-12);
    }

    #[test]
    fn too_few_frames_after_t_star() {
        let f = ifn();
        let tac = TimeActivityCurve { mid_times: vec![5.0, 10.0, 25.0], values: vec![1.0; 3], durations: vec![1.0; 3] };
        assert!(patlak_fit(&tac, &f, T_STAR, &FitWeights::new(vec![1.0]).unwrap()).is_err());
    }

    fn binom_tail(n: u64, k: u64) -> f64 {
        // P(X ≥ k), X ~ Bin(n, ½)
        let mut ln_c = 0.0f64;
        let mut total = 0.0;
        for i in 0..=n {
            if i > 0 {
                ln_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
            }
            if i >= k {
                total += (ln_c - n as f64 * std::f64::consts::LN_2).exp();
            }
        }
        total
    }

    #[test]
    fn noise_raises_nfe() {
        let f = ifn();
        let (t, d) = mids();
        let w = FitWeights::from_model(WeightModel::default(), &t, &d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let noise = Normal::new(0.0, 0.02).unwrap();
        // mildly curved tissue curve: not exactly on the Patlak line
        let base: Vec<f64> = gen(&f, &t, 0.01, 0.1).iter().zip(&t).map(|(v, s)| v * (1.0 - 0.002 * s)).collect();
        let tac = TimeActivityCurve { values: base.clone(), mid_times: t.clone(), durations: d.clone() };
        let e0 = nfe(&tac, &patlak_fit(&tac, &f, T_STAR, &w).unwrap(), &f, &w, T_STAR).unwrap();
        let mut wins = 0;
        for _ in 0..100 {
            let noisy = TimeActivityCurve { values: base.iter().map(|v| v + noise.sample(&mut rng)).collect(), ..tac.clone() };
            let e = nfe(&noisy, &patlak_fit(&noisy, &f, T_STAR, &w).unwrap(), &f, &w, T_STAR).unwrap();
            wins += (e > e0) as u64;
        }
        assert!(binom_tail(100, wins) < 0.01, "{wins}/100");
    }

    fn series_of(frames: Vec<Tensor>) -> FrameSeries {
        let (m, d) = mids();
        FrameSeries::new(frames, m, d, [1.0; 3]).unwrap()
    }

    #[test]
    fn maps_uniform_and_zero() {
        let f = ifn();
        let (t, _) = mids();
        let v = gen(&f, &t, 0.012, 0.07);
        let s = series_of(v.iter().map(|&x| Tensor::full(&[3, 3, 3], x)).collect());
        let m = parametric_maps(&s, &f, T_STAR, WeightModel::default()).unwrap();
        assert!(m.ki.data().iter().all(|k| (k - 0.012).abs() < 1e-12));
        assert!(m.degenerate.data().iter().all(|&d| d == 0.0));
        let z = series_of((0..8).map(|_| Tensor::zeros(&[3, 3, 3])).collect());
        let m = parametric_maps(&z, &f, T_STAR, WeightModel::default()).unwrap();
        assert!(m.degenerate.data().iter().all(|&d| d == 1.0));
        assert!(m.nfe_summary().is_err());
    }

    #[test]
    fn nmi_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[10, 10, 10], |_| rng.random_range(0.0..1.0));
        assert_eq!(nmi(&x, &x, 64).unwrap(), 2.0);
        let big: Vec<f64> = (0..400_000).map(|_| rng.random_range(0.0..1.0)).collect();
        let other: Vec<f64> = (0..400_000).map(|_| rng.random_range(0.0..1.0)).collect();
        let v = nmi_values(&big, &other, 16).unwrap();
        assert!((v - 1.0).abs() < 0.05, "{v}");
        let y = Tensor::from_fn(&[10, 10, 10], |_| rng.random_range(0.0..1.0));
        assert!((nmi(&x, &y, 64).unwrap() - nmi(&y, &x, 64).unwrap()).abs() < 1e-14);
        assert!(matches!(nmi(&x, &Tensor::full(&[10, 10, 10], 1.0), 64), Err(Error::Undefined(_))));
    }

    #[test]
    fn ncc_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(&[10, 10, 10], |_| rng.random_range(0.0..1.0));
        let y = Tensor::from_fn(&[10, 10, 10], |_| rng.random_range(0.0..1.0));
        assert!((global_ncc(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((global_ncc(&x, &x.scale(-1.0)).unwrap() + 1.0).abs() < 1e-15);
        // direct textbook formula
        let n = 1000.0;
        let (a, b) = (x.data(), y.data());
        let sa: f64 = a.iter().sum();
        let sb: f64 = b.iter().sum();
        let sab: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        let saa: f64 = a.iter().map(|p| p * p).sum();
        let sbb: f64 = b.iter().map(|q| q * q).sum();
        let r = (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt());
        let got = global_ncc(&x, &y).unwrap();
        assert!((got - r).abs() <= 1e-12 * r.abs().max(1e-3) * 1e3, "{got} {r}");
        assert_eq!(got, global_ncc(&y, &x).unwrap());
        assert!(global_ncc(&x, &Tensor::full(&[10, 10, 10], 2.0)).is_err());
    }

    #[test]
    fn roi_stat_cases() {
        let k = Tensor::new(vec![1, 1, 3], vec![0.0, 2.0, 5.0]).unwrap();
        let s = roi_stats(&k, &[false, false, true]).unwrap();
        assert_eq!((s.mean, s.max, s.std), (5.0, 5.0, 0.0));
        let s = roi_stats(&k, &[true, true, false]).unwrap();
        assert_eq!((s.mean, s.max, s.std), (1.0, 2.0, 1.0));
        assert!(matches!(roi_stats(&k, &[false; 3]), Err(Error::Undefined(_))));
    }
}
