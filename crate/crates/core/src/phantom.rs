//! Synthetic dynamic phantom with known kinetics and known inter-frame motion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classify::{Label, RoiRecord};
use crate::error::{Error, Result};
use crate::patlak::{self, cumulative_input, InputFunction, ParametricMaps, WeightModel};
use crate::series::FrameSeries;
use crate::tensor::{idx3, Tensor};
use crate::warp::{warp, DisplacementField};

/// Plasma input `C_P(t) = s·[(a1·t − a2 − a3)·e^{l1·t} + a2·e^{l2·t} + a3·e^{l3·t}]`,
/// zero at injection and strictly positive afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputCurve {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub scale: f64,
    /// Sampling step (min) of the tabulated curve used for fitting.
    pub dt: f64,
    /// End of the tabulated curve (min).
    pub t_end: f64,
}

impl Default for InputCurve {
    fn default() -> Self {
        Self {
            a1: 851.1225,
            a2: 21.8798,
            a3: 20.8113,
            l1: -4.133859,
            l2: -0.01043449,
            l3: -0.1190996,
            scale: 0.1,
            dt: 0.01,
            t_end: 90.0,
        }
    }
}

impl InputCurve {
    pub fn eval(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        self.scale
            * ((self.a1 * t - self.a2 - self.a3) * (self.l1 * t).exp() + self.a2 * (self.l2 * t).exp() + self.a3 * (self.l3 * t).exp())
    }

    pub fn tabulate(&self) -> Result<InputFunction> {
        InputFunction::sampled(|t| self.eval(t), self.t_end, self.dt)
    }
}

/// The default input curve evaluated at `t` (min).
pub fn analytic_input_function(t: f64) -> f64 {
    InputCurve::default().eval(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Ellipsoid,
    Box,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionRole {
    Tissue,
    Tumor,
    Benign,
    Malignant,
}

/// A painted region. Ki varies as `ki + (ki_peak − ki)·(1 − ρ²)` with the
/// normalized radius ρ ∈ [0,1]; without `ki_peak` it is uniform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub name: String,
    pub shape: ShapeKind,
    pub role: RegionRole,
    /// Voxel coordinates of the centre.
    pub center: [f64; 3],
    /// Semi-axes in voxels.
    pub radii: [f64; 3],
    pub ki: f64,
    pub vb: f64,
    #[serde(default)]
    pub ki_peak: Option<f64>,
}

impl Region {
    /// Normalized radius of voxel `p`; inside when ≤ 1.
    pub fn rho(&self, p: [f64; 3]) -> f64 {
        let q: [f64; 3] = std::array::from_fn(|a| (p[a] - self.center[a]) / self.radii[a]);
        match self.shape {
            ShapeKind::Ellipsoid => q.iter().map(|v| v * v).sum::<f64>().sqrt(),
            ShapeKind::Box => q.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        }
    }

    pub fn ki_at(&self, rho: f64) -> f64 {
        match self.ki_peak {
            Some(peak) => self.ki + (peak - self.ki) * (1.0 - rho * rho),
            None => self.ki,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub voxel_mm: [f64; 3],
    /// Kinetics outside every region.
    pub background_ki: f64,
    pub background_vb: f64,
    /// Painted in order; later regions overwrite earlier ones.
    pub regions: Vec<Region>,
}

/// Voxel-wise ground truth: region label (index into `regions`) and kinetics.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomTruth {
    pub labels: Vec<Option<usize>>,
    pub ki: Tensor,
    pub vb: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LesionConfig {
    pub benign: usize,
    pub malignant: usize,
    pub radius: f64,
    pub benign_ki: [f64; 2],
    pub malignant_ki: [f64; 2],
    pub vb: [f64; 2],
    /// Peak-to-edge Ki ratio inside each lesion.
    pub peak_ratio: f64,
}

impl Default for LesionConfig {
    fn default() -> Self {
        Self {
            benign: 4,
            malignant: 8,
            radius: 1.5,
            benign_ki: [0.006, 0.011],
            malignant_ki: [0.011, 0.024],
            vb: [0.03, 0.10],
            peak_ratio: 1.6,
        }
    }
}

impl LesionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: [f64; 2]| r[0] >= 0.0 && r[0] < r[1] && r[1].is_finite();
        if !(ok(self.benign_ki) && ok(self.malignant_ki) && ok(self.vb)) {
            return Err(Error::config("lesion Ki and Vb ranges must be nonnegative and nonempty"));
        }
        if !(self.radius > 0.0 && self.radius.is_finite() && self.peak_ratio >= 0.0) {
            return Err(Error::config("lesion radius must be positive and peak_ratio ≥ 0"));
        }
        Ok(())
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::config("phantom extents must be positive"));
        }
        if self.voxel_mm.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::config("phantom voxel size must be positive"));
        }
        if !(self.background_ki >= 0.0 && self.background_vb >= 0.0) {
            return Err(Error::config("background kinetics must be ≥ 0"));
        }
        for r in &self.regions {
            for a in 0..3 {
                if !(r.center[a] >= -0.5 && r.center[a] <= self.dims[a] as f64 - 0.5) {
                    return Err(Error::Config(format!("region {} centre lies outside the grid", r.name)));
                }
                if !(r.radii[a] > 0.0 && r.radii[a].is_finite()) {
                    return Err(Error::Config(format!("region {} radii must be positive", r.name)));
                }
            }
            if !(r.ki >= 0.0 && r.vb >= 0.0 && r.ki_peak.is_none_or(|p| p >= 0.0)) {
                return Err(Error::Config(format!("region {} kinetics must be ≥ 0", r.name)));
            }
        }
        if self.regions.iter().filter(|r| r.role == RegionRole::Tumor).count() > 1 {
            return Err(Error::config("at most one tumor region"));
        }
        Ok(())
    }

    /// Desk-scale torso: body, an organ, a blood pool, a graded tumor and
    /// randomly placed lesions (positions and kinetics drawn from `seed`).
    pub fn desk(seed: u64, lesions: &LesionConfig) -> Result<Self> {
        lesions.validate()?;
        let dims = [16, 16, 32];
        let tissue = |name: &str, shape, center, radii, ki, vb| Region {
            name: name.into(),
            shape,
            role: RegionRole::Tissue,
            center,
            radii,
            ki,
            vb,
            ki_peak: None,
        };
        let body = tissue("body", ShapeKind::Ellipsoid, [7.5, 7.5, 15.5], [6.0, 6.0, 13.0], 0.0015, 0.05);
        let mut regions = vec![
            body.clone(),
            tissue("organ", ShapeKind::Ellipsoid, [8.0, 9.0, 8.5], [3.5, 3.5, 4.5], 0.003, 0.25),
            tissue("blood-pool", ShapeKind::Box, [6.0, 6.0, 24.5], [1.5, 1.5, 2.0], 0.0, 0.9),
        ];
        let tumor = Region {
            name: "tumor".into(),
            shape: ShapeKind::Ellipsoid,
            role: RegionRole::Tumor,
            center: [7.5, 8.5, 17.0],
            radii: [2.6, 2.6, 3.2],
            ki: 0.004,
            vb: 0.05,
            ki_peak: Some(0.0385),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut placed: Vec<([f64; 3], f64)> = vec![(tumor.center, tumor.radii[2])];
        let mut out = Vec::new();
        let n = lesions.benign + lesions.malignant;
        let mut attempts = 0;
        while out.len() < n {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::Config(format!("could not place {n} lesions in the body")));
            }
            let c: [f64; 3] = std::array::from_fn(|a| rng.random_range(1..dims[a] - 1) as f64);
            if body.rho(c) > 0.8 {
                continue;
            }
            if placed.iter().any(|(p, r)| dist(*p, c) < r + lesions.radius + 0.5) {
                continue;
            }
            let malignant = out.len() >= lesions.benign;
            let range = if malignant { lesions.malignant_ki } else { lesions.benign_ki };
            let ki = rng.random_range(range[0]..range[1]);
            let vb = rng.random_range(lesions.vb[0]..lesions.vb[1]);
            placed.push((c, lesions.radius));
            out.push(Region {
                name: format!("lesion{:02}", out.len()),
                shape: ShapeKind::Ellipsoid,
                role: if malignant { RegionRole::Malignant } else { RegionRole::Benign },
                center: c,
                radii: [lesions.radius; 3],
                ki,
                vb,
                ki_peak: Some(ki * lesions.peak_ratio),
            });
        }
        regions.push(tumor);
        regions.extend(out);
        let spec = Self {
            dims,
            voxel_mm: [4.0; 3],
            background_ki: 0.0,
            background_vb: 0.0,
            regions,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn truth(&self) -> Result<PhantomTruth> {
        self.validate()?;
        let [d, h, w] = self.dims;
        let n = self.n_voxels();
        let mut labels = vec![None; n];
        let mut ki = vec![self.background_ki; n];
        let mut vb = vec![self.background_vb; n];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = idx3(self.dims, z, y, x);
                    let p = [z as f64, y as f64, x as f64];
                    for (r_idx, r) in self.regions.iter().enumerate() {
                        let rho = r.rho(p);
                        if rho <= 1.0 {
                            labels[i] = Some(r_idx);
                            ki[i] = r.ki_at(rho);
                            vb[i] = r.vb;
                        }
                    }
                }
            }
        }
        Ok(PhantomTruth {
            labels,
            ki: Tensor::new(self.dims.to_vec(), ki)?,
            vb: Tensor::new(self.dims.to_vec(), vb)?,
        })
    }

    pub fn tumor_index(&self) -> Result<usize> {
        self.regions
            .iter()
            .position(|r| r.role == RegionRole::Tumor)
            .ok_or_else(|| Error::config("phantom has no tumor region"))
    }

    /// Lesion regions as (index, label).
    pub fn lesions(&self) -> Vec<(usize, Label)> {
        self.regions
            .iter()
            .enumerate()
            .filter_map(|(i, r)| match r.role {
                RegionRole::Benign => Some((i, Label::Benign)),
                RegionRole::Malignant => Some((i, Label::Malignant)),
                _ => None,
            })
            .collect()
    }
}

impl PhantomTruth {
    pub fn mask(&self, region: usize) -> Vec<bool> {
        self.labels.iter().map(|l| *l == Some(region)).collect()
    }

    /// Voxels inside any region.
    pub fn body(&self) -> Vec<bool> {
        self.labels.iter().map(|l| l.is_some()).collect()
    }

    /// Voxels whose 26 neighbours all carry the same label.
    pub fn interior(&self, dims: [usize; 3]) -> Vec<bool> {
        let [d, h, w] = dims;
        let mut out = vec![false; self.labels.len()];
        for z in 1..d.saturating_sub(1) {
            for y in 1..h.saturating_sub(1) {
                for x in 1..w.saturating_sub(1) {
                    let l = self.labels[idx3(dims, z, y, x)];
                    let mut same = true;
                    for dz in 0..3 {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                same &= self.labels[idx3(dims, z + dz - 1, y + dy - 1, x + dx - 1)] == l;
                            }
                        }
                    }
                    out[idx3(dims, z, y, x)] = same;
                }
            }
        }
        out
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

/// Noise-free activity `Ki·∫C_P + Vb·C_P` at `t`, plus zero-mean Gaussian
/// noise with standard deviation `noise_sigma` times the clean value. Each
/// frame draws from its own stream of `seed`.
pub fn simulate_frames(
    spec: &PhantomSpec,
    ifn: &InputFunction,
    mid_times: &[f64],
    durations: &[f64],
    noise_sigma: f64,
    seed: u64,
) -> Result<FrameSeries> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::config("noise sigma must be ≥ 0"));
    }
    crate::series::validate_timing(mid_times, durations)?;
    let truth = spec.truth()?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut frames = Vec::with_capacity(mid_times.len());
    for (k, &t) in mid_times.iter().enumerate() {
        let integral = cumulative_input(ifn, t)?;
        let cp = ifn.value_at(t)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        let data = truth
            .ki
            .data()
            .iter()
            .zip(truth.vb.data())
            .map(|(&ki, &vb)| {
                let c = ki * integral + vb * cp;
                if noise_sigma > 0.0 {
                    c + noise_sigma * c * normal.sample(&mut rng)
                } else {
                    c
                }
            })
            .collect();
        frames.push(Tensor::new(spec.dims.to_vec(), data)?);
    }
    FrameSeries::new(frames, mid_times.to_vec(), durations.to_vec(), spec.voxel_mm)
}

/// One smooth deformation component. The image content is translated by
/// `translation` and scaled by `expansion` about `center`, attenuated by a
/// Gaussian window of width `width` (voxels); without a width it is global.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalMotion {
    pub center: [f64; 3],
    pub translation: [f64; 3],
    pub expansion: f64,
    #[serde(default)]
    pub width: Option<f64>,
}

impl LocalMotion {
    /// Sampling displacement at `p`: the moved frame reads the clean frame
    /// at `p + u(p)`.
    pub fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        let r: [f64; 3] = std::array::from_fn(|a| p[a] - self.center[a]);
        let g = match self.width {
            Some(s) => (-(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]) / (2.0 * s * s)).exp(),
            None => 1.0,
        };
        let k = 1.0 / self.expansion - 1.0;
        std::array::from_fn(|a| g * (-self.translation[a] + k * r[a]))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameMotion {
    pub components: Vec<LocalMotion>,
}

impl FrameMotion {
    pub fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        self.components.iter().fold([0.0; 3], |acc, c| {
            let d = c.displacement(p);
            std::array::from_fn(|a| acc[a] + d[a])
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    /// Largest allowed displacement (voxels).
    pub bound: f64,
    /// Peak translation per axis for the frame farthest from the reference.
    pub amplitude: f64,
    /// Largest relative scale change for that frame.
    pub expansion: f64,
    /// Gaussian window width (voxels) of each local component.
    pub width: f64,
    /// Largest offset of the tumor component's centre from the tumor centre.
    pub center_jitter: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            bound: 4.0,
            amplitude: 2.5,
            expansion: 0.15,
            width: 6.0,
            center_jitter: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSpec {
    pub reference_index: usize,
    /// Largest allowed displacement (voxels).
    pub bound: f64,
    pub frames: Vec<FrameMotion>,
}

impl MotionSpec {
    pub fn none(n_frames: usize, reference_index: usize, bound: f64) -> Self {
        Self {
            reference_index,
            bound,
            frames: vec![FrameMotion::default(); n_frames],
        }
    }

    /// Two components per moving frame, one near the tumor and one elsewhere
    /// in the body. Amplitudes grow linearly with distance from the reference.
    pub fn random(spec: &PhantomSpec, n_frames: usize, reference_index: usize, cfg: &MotionConfig, seed: u64) -> Result<Self> {
        if reference_index >= n_frames {
            return Err(Error::Config(format!("reference {reference_index} out of {n_frames} frames")));
        }
        let tumor = spec.regions[spec.tumor_index()?].center;
        let body = &spec.regions[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let far = (0..n_frames).map(|k| k.abs_diff(reference_index)).max().unwrap_or(0).max(1) as f64;
        let mut frames = Vec::with_capacity(n_frames);
        for k in 0..n_frames {
            let scale = k.abs_diff(reference_index) as f64 / far;
            if k == reference_index {
                frames.push(FrameMotion::default());
                continue;
            }
            let comp = |center: [f64; 3], rng: &mut ChaCha8Rng| {
                let dir = loop {
                    let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                    if v.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
                        break v;
                    }
                };
                LocalMotion {
                    center,
                    translation: dir.map(|v| scale * cfg.amplitude * v),
                    expansion: 1.0 + scale * cfg.expansion * rng.random_range(-1.0..1.0),
                    width: Some(cfg.width),
                }
            };
            let mut attempts = 0;
            let fm = loop {
                let near: [f64; 3] = std::array::from_fn(|a| tumor[a] + cfg.center_jitter * rng.random_range(-1.0..1.0));
                let first = comp(near, &mut rng);
                let other: [f64; 3] = std::array::from_fn(|a| body.center[a] + 0.6 * body.radii[a] * rng.random_range(-1.0..1.0));
                let second = comp(other, &mut rng);
                let fm = FrameMotion {
                    components: vec![first, second],
                };
                attempts += 1;
                match validate_frame(k, &fm, cfg.bound, spec.dims) {
                    Ok(()) => break fm,
                    Err(e) if attempts >= 1000 => return Err(e),
                    Err(_) => {}
                }
            };
            frames.push(fm);
        }
        let m = Self {
            reference_index,
            bound: cfg.bound,
            frames,
        };
        m.validate(spec.dims)?;
        Ok(m)
    }

    /// Sampling displacement field of frame `k`.
    pub fn field(&self, k: usize, dims: [usize; 3], spacing_mm: [f64; 3]) -> Result<DisplacementField> {
        let fm = &self.frames[k];
        field_from(dims, spacing_mm, |p| fm.displacement(p))
    }

    /// The field that undoes frame `k`'s motion: `φ(p) = −u(p + φ(p))`,
    /// solved by fixed-point iteration on the analytic motion.
    pub fn correcting_field(&self, k: usize, dims: [usize; 3], spacing_mm: [f64; 3]) -> Result<DisplacementField> {
        let fm = &self.frames[k];
        field_from(dims, spacing_mm, |p| {
            let mut phi = [0.0; 3];
            for _ in 0..200 {
                let u = fm.displacement(std::array::from_fn(|a| p[a] + phi[a]));
                let next: [f64; 3] = std::array::from_fn(|a| -u[a]);
                let delta = (0..3).map(|a| (next[a] - phi[a]).abs()).fold(0.0, f64::max);
                phi = next;
                if delta < 1e-13 {
                    break;
                }
            }
            phi
        })
    }

    /// Bounds, positive expansions, an unmoved reference, and a fold-free
    /// deformation (positive Jacobian determinant) on the grid.
    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        if self.reference_index >= self.frames.len() {
            return Err(Error::config("motion reference index out of range"));
        }
        if !self.frames[self.reference_index].components.is_empty() {
            return Err(Error::config("the reference frame must not move"));
        }
        if !(self.bound > 0.0) {
            return Err(Error::config("motion bound must be positive"));
        }
        for (k, fm) in self.frames.iter().enumerate() {
            validate_frame(k, fm, self.bound, dims)?;
        }
        Ok(())
    }
}

fn validate_frame(k: usize, fm: &FrameMotion, bound: f64, dims: [usize; 3]) -> Result<()> {
    for c in &fm.components {
        if !(c.expansion > 0.0) || c.width.is_some_and(|w| !(w > 0.0)) {
            return Err(Error::Config(format!("frame {k}: expansion and width must be positive")));
        }
        let t = c.translation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if t > bound {
            return Err(Error::Config(format!("frame {k}: translation {t:.3} exceeds bound {bound}")));
        }
    }
    if fm.components.is_empty() {
        return Ok(());
    }
    let [d, h, w] = dims;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let u = fm.displacement(p);
                let mag = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                if mag > bound {
                    return Err(Error::Config(format!("frame {k}: displacement {mag:.3} at {p:?} exceeds bound {bound}")));
                }
                let mut j = [[0.0; 3]; 3];
                for b in 0..3 {
                    let mut lo = p;
                    let mut hi = p;
                    lo[b] -= 0.5;
                    hi[b] += 0.5;
                    let (ul, uh) = (fm.displacement(lo), fm.displacement(hi));
                    for a in 0..3 {
                        j[a][b] = (uh[a] - ul[a]) + if a == b { 1.0 } else { 0.0 };
                    }
                }
                let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
                if !(det > 0.0) {
                    return Err(Error::Config(format!("frame {k}: deformation folds at {p:?}")));
                }
            }
        }
    }
    Ok(())
}

fn field_from(dims: [usize; 3], spacing_mm: [f64; 3], f: impl Fn([f64; 3]) -> [f64; 3]) -> Result<DisplacementField> {
    let n: usize = dims.iter().product();
    let mut data = vec![0.0; 3 * n];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let i = idx3(dims, z, y, x);
                let u = f([z as f64, y as f64, x as f64]);
                for a in 0..3 {
                    data[a * n + i] = u[a];
                }
            }
        }
    }
    DisplacementField::new(Tensor::new(vec![3, dims[0], dims[1], dims[2]], data)?, spacing_mm)
}

/// Warp every non-reference frame by its motion. Returns the moved series
/// and, per frame, the field that restores it (zero for the reference).
pub fn inject_motion(series: &FrameSeries, motion: &MotionSpec) -> Result<(FrameSeries, Vec<DisplacementField>)> {
    if motion.frames.len() != series.len() {
        return Err(Error::Config(format!("{} motion frames for {} series frames", motion.frames.len(), series.len())));
    }
    let dims = series.dims();
    motion.validate(dims)?;
    let sp = series.spacing_mm();
    let mut frames = Vec::with_capacity(series.len());
    let mut truth = Vec::with_capacity(series.len());
    for (k, frame) in series.frames().iter().enumerate() {
        if motion.frames[k].components.is_empty() {
            frames.push(frame.clone());
            truth.push(DisplacementField::zeros(dims, sp));
        } else {
            frames.push(warp(frame, &motion.field(k, dims, sp)?)?);
            truth.push(motion.correcting_field(k, dims, sp)?);
        }
    }
    Ok((series.with_frames(frames)?, truth))
}

/// Fitting settings and masks shared by every condition of an evaluation.
#[derive(Clone, Debug)]
pub struct EvalContext {
    pub ifn: InputFunction,
    pub t_star: f64,
    pub weights: WeightModel,
    pub nmi_bins: usize,
    /// Voxels summarized for NFE and for the Ki/Vb alignment metrics.
    pub body: Vec<bool>,
    pub tumor: Vec<bool>,
}

impl EvalContext {
    pub fn new(spec: &PhantomSpec, ifn: InputFunction) -> Result<Self> {
        let truth = spec.truth()?;
        Ok(Self {
            ifn,
            t_star: patlak::T_STAR,
            weights: WeightModel::default(),
            nmi_bins: 64,
            body: truth.body(),
            tumor: truth.mask(spec.tumor_index()?),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ConditionMetrics {
    pub tumor_ki_mean: f64,
    pub tumor_ki_max: f64,
    pub mean_nfe: f64,
    pub max_nfe: f64,
    pub ki_vb_nmi: f64,
    pub ki_vb_ncc: f64,
}

/// Fit one series and summarize it. NFE is averaged over body voxels that
/// are not degenerate; the alignment metrics use all body voxels.
pub fn condition_metrics(series: &FrameSeries, ctx: &EvalContext) -> Result<(ParametricMaps, ConditionMetrics)> {
    let maps = patlak::parametric_maps(series, &ctx.ifn, ctx.t_star, ctx.weights)?;
    let valid: Vec<bool> = maps.valid().iter().zip(&ctx.body).map(|(v, b)| *v && *b).collect();
    let (mean_nfe, max_nfe) = patlak::summarize(&maps.nfe, &valid)?;
    let tumor = patlak::roi_stats(&maps.ki, &ctx.tumor)?;
    let pick = |t: &Tensor| -> Vec<f64> { t.data().iter().zip(&ctx.body).filter(|(_, &b)| b).map(|(&v, _)| v).collect() };
    let (ki, vb) = (pick(&maps.ki), pick(&maps.vb));
    let metrics = ConditionMetrics {
        tumor_ki_mean: tumor.mean,
        tumor_ki_max: tumor.max,
        mean_nfe,
        max_nfe,
        ki_vb_nmi: patlak::nmi_values(&ki, &vb, ctx.nmi_bins)?,
        ki_vb_ncc: patlak::global_ncc_values(&ki, &vb)?,
    };
    Ok((maps, metrics))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrectionReport {
    pub motion_free: ConditionMetrics,
    pub motion: ConditionMetrics,
    pub corrected: ConditionMetrics,
    /// Mean |estimated − true| correcting displacement over body voxels of
    /// the moved frames, in voxels.
    pub endpoint_error_vox: Option<f64>,
    /// Mean |true| correcting displacement over the same voxels.
    pub true_motion_vox: Option<f64>,
}

pub struct Conditions<'a> {
    pub motion_free: &'a FrameSeries,
    pub motion: &'a FrameSeries,
    pub corrected: &'a FrameSeries,
}

pub fn evaluate_correction(
    series: Conditions<'_>,
    true_fields: &[DisplacementField],
    est_fields: Option<&[DisplacementField]>,
    ctx: &EvalContext,
) -> Result<CorrectionReport> {
    let dims = series.motion_free.dims();
    if series.motion.dims() != dims || series.corrected.dims() != dims {
        return Err(Error::dim("evaluated series differ in grid"));
    }
    let (_, motion_free) = condition_metrics(series.motion_free, ctx)?;
    let (_, motion) = condition_metrics(series.motion, ctx)?;
    let (_, corrected) = condition_metrics(series.corrected, ctx)?;
    let (endpoint_error_vox, true_motion_vox) = match est_fields {
        Some(est) => {
            let (e, m) = endpoint_error(true_fields, est, &ctx.body)?;
            (Some(e), Some(m))
        }
        None => (None, None),
    };
    Ok(CorrectionReport {
        motion_free,
        motion,
        corrected,
        endpoint_error_vox,
        true_motion_vox,
    })
}

/// Mean endpoint error and mean true magnitude over masked voxels of every
/// frame whose true field is nonzero.
pub fn endpoint_error(truth: &[DisplacementField], est: &[DisplacementField], mask: &[bool]) -> Result<(f64, f64)> {
    if truth.len() != est.len() {
        return Err(Error::dim("true and estimated field counts differ"));
    }
    let (mut err, mut mag, mut n) = (0.0, 0.0, 0usize);
    for (t, e) in truth.iter().zip(est) {
        if t.dims() != e.dims() || t.tensor().len() != 3 * mask.len() {
            return Err(Error::dim("field grids differ"));
        }
        if t.tensor().max_abs() == 0.0 {
            continue;
        }
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let (a, b) = (t.at(i), e.at(i));
            err += (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>().sqrt();
            mag += (0..3).map(|c| a[c] * a[c]).sum::<f64>().sqrt();
            n += 1;
        }
    }
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((err / n as f64, mag / n as f64))
}

/// Ki statistics of every lesion as classification records.
pub fn lesion_records(spec: &PhantomSpec, truth: &PhantomTruth, ki: &Tensor) -> Result<Vec<RoiRecord>> {
    spec.lesions()
        .into_iter()
        .map(|(i, label)| {
            let s = patlak::roi_stats(ki, &truth.mask(i))?;
            Ok(RoiRecord {
                id: spec.regions[i].name.clone(),
                label,
                ki_mean: s.mean,
                ki_max: s.max,
                ki_std: s.std,
            })
        })
        .collect()
}
