//! Preprocessing, window construction, Adam training and application of a
//! trained network to full-resolution series.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossTerms};
use crate::net::{FramePairSequence, MotionNet};
use crate::params::ParamSet;
use crate::series::FrameSeries;
use crate::tensor::{idx3, Tensor};
use crate::warp::{self, resample_field, DisplacementField, ResampleDirection};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch (0 = no cap).
    pub max_steps: usize,
    pub lambda: f64,
    pub ncc_window: usize,
    pub ncc_epsilon: f64,
    pub seed: u64,
    pub downsample_factor: usize,
    /// Intensity cutoff (SUV) applied to network inputs.
    pub cutoff: f64,
    pub noise_sigma: f64,
    pub window_length: usize,
    pub reference_index: usize,
    /// Frames before this index are neither used nor corrected.
    pub first_correctable: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 1,
            epochs: 1,
            max_steps: 0,
            lambda: 1.0,
            ncc_window: 9,
            ncc_epsilon: 1e-5,
            seed: 0,
            downsample_factor: 4,
            cutoff: 2.5,
            noise_sigma: 0.01,
            window_length: 5,
            reference_index: 0,
            first_correctable: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            ncc_window: self.ncc_window,
            ncc_epsilon: self.ncc_epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss().validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size != 1 {
            return Err(Error::config("batch_size is fixed at 1"));
        }
        if self.window_length == 0 || self.downsample_factor == 0 {
            return Err(Error::config("window_length and downsample_factor must be positive"));
        }
        if !(self.cutoff > 0.0) || !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::config("cutoff must be positive and noise_sigma nonnegative"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return Err(Error::config("Adam betas must lie in [0, 1) and epsilon be positive"));
        }
        Ok(())
    }

    /// Step budget: `epochs` passes over `windows`, capped by `max_steps`.
    pub fn total_steps(&self, windows: usize) -> usize {
        let s = self.epochs * windows;
        if self.max_steps > 0 {
            s.min(self.max_steps)
        } else {
            s
        }
    }
}

/// Clamp values above the cutoff to `cutoff + N(0, σ²)`; other voxels are untouched.
pub fn preprocess(frame: &Tensor, cutoff: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("noise sigma {sigma} must be nonnegative")));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = frame.clone();
    for v in out.data_mut() {
        if *v > cutoff {
            *v = if sigma == 0.0 { cutoff } else { cutoff + normal.sample(rng) };
        }
    }
    Ok(out)
}

/// Mean over non-overlapping `f³` blocks.
pub fn downsample_mean(vol: &Tensor, f: usize) -> Result<Tensor> {
    let dims = vol.vol_dims()?;
    if f == 0 || dims.iter().any(|d| d % f != 0) {
        return Err(Error::dim(format!("extents {dims:?} not divisible by {f}")));
    }
    if f == 1 {
        return Ok(vol.clone());
    }
    let nd = [dims[0] / f, dims[1] / f, dims[2] / f];
    let mut out = vec![0.0; nd.iter().product()];
    let x = vol.data();
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                out[idx3(nd, d / f, h / f, w / f)] += x[idx3(dims, d, h, w)];
            }
        }
    }
    let k = 1.0 / (f * f * f) as f64;
    out.iter_mut().for_each(|v| *v *= k);
    Tensor::new(nd.to_vec(), out)
}

/// Placement of the downsampled grid inside the network's extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WorkingGrid {
    pub full: [usize; 3],
    pub coarse: [usize; 3],
    pub extents: [usize; 3],
    /// Corner of the coarse grid inside the padded extents.
    pub offset: [usize; 3],
    pub factor: usize,
}

impl WorkingGrid {
    pub fn new(full: [usize; 3], factor: usize, extents: [usize; 3]) -> Result<Self> {
        if factor == 0 || full.iter().any(|d| d % factor != 0) {
            return Err(Error::dim(format!("extents {full:?} not divisible by {factor}")));
        }
        let coarse = full.map(|d| d / factor);
        if (0..3).any(|a| coarse[a] > extents[a]) {
            return Err(Error::dim(format!(
                "downsampled grid {coarse:?} exceeds network extents {extents:?}"
            )));
        }
        let offset = [0, 1, 2].map(|a| (extents[a] - coarse[a]) / 2);
        Ok(Self {
            full,
            coarse,
            extents,
            offset,
            factor,
        })
    }

    /// Downsample then zero-pad into the network extents.
    pub fn to_working(&self, vol: &Tensor) -> Result<Tensor> {
        if vol.vol_dims()? != self.full {
            return Err(Error::dim("frame does not match the working grid's source extents"));
        }
        let small = downsample_mean(vol, self.factor)?;
        Ok(pad_into(&small, self.extents, self.offset, 1))
    }

    /// Cut the coarse region out of a `[C,extents]` map.
    pub fn crop(&self, t: &Tensor) -> Result<Tensor> {
        let (c, dims) = t.map_dims()?;
        if dims != self.extents {
            return Err(Error::dim("map does not match network extents"));
        }
        let n_in: usize = dims.iter().product();
        let n_out: usize = self.coarse.iter().product();
        let o = self.offset;
        let cd = self.coarse;
        let data = (0..c * n_out)
            .map(|i| {
                let (ch, r) = (i / n_out, i % n_out);
                let (d, h, w) = (r / (cd[1] * cd[2]), (r / cd[2]) % cd[1], r % cd[2]);
                t.data()[ch * n_in + idx3(dims, d + o[0], h + o[1], w + o[2])]
            })
            .collect();
        Tensor::new(vec![c, cd[0], cd[1], cd[2]], data)
    }

    /// Working-grid field → full-resolution field.
    pub fn field_to_full(&self, field: &DisplacementField, spacing_full: [f64; 3]) -> Result<DisplacementField> {
        let cropped = DisplacementField::new(self.crop(field.tensor())?, spacing_full.map(|s| s * self.factor as f64))?;
        if self.factor == 1 {
            return DisplacementField::new(cropped.into_tensor(), spacing_full);
        }
        let up = resample_field(&cropped, self.factor, ResampleDirection::Up)?;
        DisplacementField::new(up.into_tensor(), spacing_full)
    }
}

fn pad_into(t: &Tensor, extents: [usize; 3], offset: [usize; 3], channels: usize) -> Tensor {
    let dims = {
        let s = t.shape();
        [s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]]
    };
    let n_in: usize = dims.iter().product();
    let n_out: usize = extents.iter().product();
    let mut out = vec![0.0; channels * n_out];
    for c in 0..channels {
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    out[c * n_out + idx3(extents, d + offset[0], h + offset[1], w + offset[2])] =
                        t.data()[c * n_in + idx3(dims, d, h, w)];
                }
            }
        }
    }
    let mut shape = if channels == 1 && t.shape().len() == 3 { vec![] } else { vec![channels] };
    shape.extend_from_slice(&extents);
    Tensor::new(shape, out).expect("padded shape")
}

/// Frame indices of every consecutive window over the correctable frames.
pub fn window_indices(n_frames: usize, cfg: &TrainConfig) -> Result<Vec<Vec<usize>>> {
    if cfg.reference_index >= n_frames {
        return Err(Error::Config(format!(
            "reference index {} outside a {n_frames}-frame series",
            cfg.reference_index
        )));
    }
    let first = cfg.first_correctable;
    let usable = n_frames.saturating_sub(first);
    if cfg.window_length == 0 || usable < cfg.window_length {
        return Err(Error::Config(format!(
            "{usable} correctable frames, window length {}",
            cfg.window_length
        )));
    }
    Ok((first..=n_frames - cfg.window_length)
        .map(|s| (s..s + cfg.window_length).collect())
        .collect())
}

/// Pair each window of the series with its reference frame.
pub fn make_windows(series: &FrameSeries, cfg: &TrainConfig) -> Result<Vec<FramePairSequence>> {
    let reference = series.frame(cfg.reference_index).clone();
    window_indices(series.len(), cfg)?
        .into_iter()
        .map(|w| FramePairSequence::new(reference.clone(), w.iter().map(|&k| series.frame(k).clone()).collect()))
        .collect()
}

/// Network inputs of one series: working grid plus cutoff and noise.
/// Noise is drawn once per frame from `rng`.
pub fn prepare_frames(series: &FrameSeries, grid: &WorkingGrid, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
    series
        .frames()
        .iter()
        .map(|f| preprocess(&grid.to_working(f)?, cfg.cutoff, cfg.noise_sigma, rng))
        .collect()
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || grads.iter().zip(params.tensors()).any(|(g, p)| g.shape() != p.shape()) {
            return Err(Error::Consistency("gradient and parameter layouts differ".into()));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
    pub similarity_term: f64,
    pub smoothness_term: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub terms: LossTerms,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub trace: Vec<EpochLoss>,
    pub steps: usize,
}

/// Record the objective of one window on `tape`.
pub(crate) fn window_objective(
    net: &MotionNet,
    tape: &mut Tape,
    params: &crate::params::BoundParams,
    reference: &Tensor,
    moving: &[&Tensor],
    loss: &LossConfig,
) -> Result<(Var, Vec<Var>, Vec<Var>)> {
    let r = tape.leaf(reference.clone(), false);
    let mv: Vec<Var> = moving.iter().map(|m| tape.leaf((*m).clone(), false)).collect();
    let inputs: Vec<Var> = moving
        .iter()
        .map(|m| Tensor::stack(&[m, reference]).map(|x| tape.leaf(x, false)))
        .collect::<Result<_>>()?;
    let fields = net.forward(tape, params, &inputs)?;
    let mut terms = Vec::new();
    let mut sims = Vec::new();
    let mut smooths = Vec::new();
    for (&m, &f) in mv.iter().zip(&fields) {
        let w = tape.warp(m, f)?;
        let s = tape.local_ncc(r, w, loss.ncc_window, loss.ncc_epsilon)?;
        let g = tape.smoothness(f)?;
        terms.push((s, -1.0));
        terms.push((g, loss.lambda));
        sims.push(s);
        smooths.push(g);
    }
    Ok((tape.linear(&terms)?, sims, smooths))
}

/// Adam at batch size 1 over shuffled windows of every series.
pub fn train(net: &mut MotionNet, series: &[FrameSeries], cfg: &TrainConfig) -> Result<TrainReport> {
    train_observed(net, series, cfg, |_| {})
}

pub fn train_observed(
    net: &mut MotionNet,
    series: &[FrameSeries],
    cfg: &TrainConfig,
    mut observe: impl FnMut(&StepRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    let loss = cfg.loss();
    let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);

    let mut prepared = Vec::with_capacity(series.len());
    let mut windows = Vec::new();
    for (s, fs) in series.iter().enumerate() {
        let grid = WorkingGrid::new(fs.dims(), cfg.downsample_factor, net.config().extents)?;
        prepared.push(prepare_frames(fs, &grid, cfg, &mut noise)?);
        windows.extend(window_indices(fs.len(), cfg)?.into_iter().map(|w| (s, w)));
    }
    if windows.is_empty() {
        return Err(Error::config("no training windows"));
    }

    let total = cfg.total_steps(windows.len());
    let mut adam = AdamState::new(net.params(), cfg.adam);
    let mut trace = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        if step >= total {
            break;
        }
        windows.shuffle(&mut order_rng);
        let mut acc = (0.0, 0.0, 0.0, 0usize);
        for (s, w) in &windows {
            if step >= total {
                break;
            }
            let frames = &prepared[*s];
            let reference = &frames[cfg.reference_index];
            let moving: Vec<&Tensor> = w.iter().map(|&k| &frames[k]).collect();
            let mut tape = Tape::new();
            let bound = net.params().bind(&mut tape);
            let (total_var, sims, smooths) = window_objective(net, &mut tape, &bound, reference, &moving, &loss)?;
            let mut terms = LossTerms::default();
            for (j, (&a, &b)) in sims.iter().zip(&smooths).enumerate() {
                let (sv, gv) = (tape.value(a).item(), tape.value(b).item());
                if !sv.is_finite() {
                    return Err(Error::Numeric(format!("step {step}: similarity term of slot {j} is not finite")));
                }
                if !gv.is_finite() {
                    return Err(Error::Numeric(format!("step {step}: smoothness term of slot {j} is not finite")));
                }
                terms.similarity -= sv;
                terms.smoothness += gv;
            }
            terms.total = tape.value(total_var).item();
            let grads = tape.backward(total_var)?;
            let g: Vec<Tensor> = bound
                .vars()
                .iter()
                .zip(net.params().tensors())
                .map(|(&v, p)| grads.of(v, p.shape()))
                .collect();
            if let Some(bad) = g.iter().position(|t| t.data().iter().any(|x| !x.is_finite())) {
                return Err(Error::Numeric(format!(
                    "step {step}: gradient of `{}` is not finite",
                    net.params().names()[bad]
                )));
            }
            adam.update(net.params_mut(), &g, cfg.learning_rate)?;
            observe(&StepRecord { step, epoch, terms });
            acc.0 += terms.total;
            acc.1 += terms.similarity;
            acc.2 += terms.smoothness;
            acc.3 += 1;
            step += 1;
        }
        let n = acc.3 as f64;
        trace.push(EpochLoss {
            epoch,
            mean_loss: acc.0 / n,
            similarity_term: acc.1 / n,
            smoothness_term: acc.2 / n,
        });
    }
    Ok(TrainReport { trace, steps: step })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correction {
    pub corrected: FrameSeries,
    /// Full-resolution field per frame (zero for uncorrected frames).
    pub fields: Vec<DisplacementField>,
}

/// Estimate fields on the working grid in consecutive windows, bring them
/// to full resolution and warp the original frames. The reference frame and
/// frames before `first_correctable` pass through unchanged.
pub fn apply(net: &MotionNet, series: &FrameSeries, cfg: &TrainConfig) -> Result<Correction> {
    cfg.validate()?;
    let n = series.len();
    if cfg.reference_index >= n {
        return Err(Error::Config(format!("reference index {} outside the series", cfg.reference_index)));
    }
    let grid = WorkingGrid::new(series.dims(), cfg.downsample_factor, net.config().extents)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inputs = prepare_frames(series, &grid, cfg, &mut rng)?;
    let spacing = series.spacing_mm();
    let mut fields: Vec<DisplacementField> = (0..n).map(|_| DisplacementField::zeros(series.dims(), spacing)).collect();
    let todo: Vec<usize> = (cfg.first_correctable..n).filter(|&k| k != cfg.reference_index).collect();
    for chunk in todo.chunks(cfg.window_length.max(1)) {
        let seq = FramePairSequence::new(
            inputs[cfg.reference_index].clone(),
            chunk.iter().map(|&k| inputs[k].clone()).collect(),
        )?;
        for (&k, f) in chunk.iter().zip(net.estimate_displacements(&seq)?) {
            fields[k] = grid.field_to_full(&f, spacing)?;
        }
    }
    let frames = series
        .frames()
        .iter()
        .zip(&fields)
        .enumerate()
        .map(|(k, (frame, f))| {
            if todo.contains(&k) {
                warp::warp(frame, f)
            } else {
                Ok(frame.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Correction {
        corrected: series.with_frames(frames)?,
        fields,
    })
}
