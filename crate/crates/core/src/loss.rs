//! Training objective: windowed NCC similarity plus a squared-gradient
//! penalty on each displacement field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{idx3, Tensor};
use crate::warp::DisplacementField;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the smoothness penalty.
    pub lambda: f64,
    /// Edge length of the cubic NCC window (odd).
    pub ncc_window: usize,
    pub ncc_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            ncc_window: 9,
            ncc_epsilon: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ncc_window % 2 == 0 {
            return Err(Error::config("ncc_window must be odd"));
        }
        if self.ncc_epsilon <= 0.0 || !self.ncc_epsilon.is_finite() {
            return Err(Error::config("ncc_epsilon must be positive"));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::config("lambda must be nonnegative"));
        }
        Ok(())
    }
}

/// Sum over the cubic window of radius `r` around every voxel, truncated at
/// the volume boundary. Separable: three passes of 1-D window sums.
pub(crate) fn box_sum(x: &[f64], dims: [usize; 3], r: usize) -> Vec<f64> {
    let mut cur = x.to_vec();
    let mut line = Vec::new();
    let mut prefix = Vec::new();
    for axis in 0..3 {
        let len = dims[axis];
        let stride = match axis {
            0 => dims[1] * dims[2],
            1 => dims[2],
            _ => 1,
        };
        let mut next = vec![0.0; cur.len()];
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    let pos = [d, h, w];
                    if pos[axis] != 0 {
                        continue;
                    }
                    let base = idx3(dims, d, h, w);
                    line.clear();
                    line.extend((0..len).map(|i| cur[base + i * stride]));
                    prefix.clear();
                    prefix.push(0.0);
                    let mut acc = 0.0;
                    for v in &line {
                        acc += v;
                        prefix.push(acc);
                    }
                    for i in 0..len {
                        let lo = i.saturating_sub(r);
                        let hi = (i + r + 1).min(len);
                        next[base + i * stride] = prefix[hi] - prefix[lo];
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

fn window_counts(dims: [usize; 3], r: usize) -> Vec<f64> {
    let per_axis: Vec<Vec<f64>> = dims
        .iter()
        .map(|&n| {
            (0..n)
                .map(|i| ((i + r + 1).min(n) - i.saturating_sub(r)) as f64)
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(dims.iter().product());
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                out.push(per_axis[0][d] * per_axis[1][h] * per_axis[2][w]);
            }
        }
    }
    out
}

struct WindowStats {
    sa: Vec<f64>,
    sb: Vec<f64>,
    cross: Vec<f64>,
    va: Vec<f64>,
    vb: Vec<f64>,
    n: Vec<f64>,
}

fn window_stats(a: &[f64], b: &[f64], dims: [usize; 3], r: usize) -> WindowStats {
    let sa = box_sum(a, dims, r);
    let sb = box_sum(b, dims, r);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let saa = box_sum(&aa, dims, r);
    let sbb = box_sum(&bb, dims, r);
    let sab = box_sum(&ab, dims, r);
    let n = window_counts(dims, r);
    let len = a.len();
    let mut cross = vec![0.0; len];
    let mut va = vec![0.0; len];
    let mut vb = vec![0.0; len];
    for i in 0..len {
        cross[i] = sab[i] - sa[i] * sb[i] / n[i];
        va[i] = (saa[i] - sa[i] * sa[i] / n[i]).max(0.0);
        vb[i] = (sbb[i] - sb[i] * sb[i] / n[i]).max(0.0);
    }
    WindowStats {
        sa,
        sb,
        cross,
        va,
        vb,
        n,
    }
}

fn check_pair(a: &Tensor, b: &Tensor, window: usize) -> Result<[usize; 3]> {
    let dims = a.vol_dims()?;
    if b.shape() != a.shape() {
        return Err(Error::dim(format!(
            "local NCC: shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if window % 2 == 0 || dims.iter().any(|&d| d < window) {
        return Err(Error::dim(format!(
            "NCC window {window} must be odd and fit inside {dims:?}"
        )));
    }
    Ok(dims)
}

/// Per-voxel windowed correlation `cov²/(var_a·var_b + ε)`, where the sums
/// are unnormalised window sums over the in-bounds part of the window.
pub fn local_ncc_map(a: &Tensor, b: &Tensor, window: usize, eps: f64) -> Result<Tensor> {
    let dims = check_pair(a, b, window)?;
    let st = window_stats(a.data(), b.data(), dims, window / 2);
    let data = (0..a.len())
        .map(|i| st.cross[i] * st.cross[i] / (st.va[i] * st.vb[i] + eps))
        .collect();
    Tensor::new(dims.to_vec(), data)
}

/// Mean of [`local_ncc_map`]; lies in [0, 1].
pub fn local_ncc(a: &Tensor, b: &Tensor, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let m = local_ncc_map(a, b, cfg.ncc_window, cfg.ncc_epsilon)?;
    Ok(m.sum() / m.len() as f64)
}

pub(crate) fn local_ncc_forward(a: &[f64], b: &[f64], dims: [usize; 3], window: usize, eps: f64) -> f64 {
    let st = window_stats(a, b, dims, window / 2);
    let total: f64 = (0..a.len())
        .map(|i| st.cross[i] * st.cross[i] / (st.va[i] * st.vb[i] + eps))
        .sum();
    total / a.len() as f64
}

/// Gradient of [`local_ncc_forward`] scaled by `g`.
pub(crate) fn local_ncc_backward(
    a: &[f64],
    b: &[f64],
    dims: [usize; 3],
    window: usize,
    eps: f64,
    g: f64,
) -> (Vec<f64>, Vec<f64>) {
    let r = window / 2;
    let st = window_stats(a, b, dims, r);
    let len = a.len();
    let scale = g / len as f64;
    let mut g_sa = vec![0.0; len];
    let mut g_sb = vec![0.0; len];
    let mut g_saa = vec![0.0; len];
    let mut g_sbb = vec![0.0; len];
    let mut g_sab = vec![0.0; len];
    for i in 0..len {
        let den = st.va[i] * st.vb[i] + eps;
        let cc = st.cross[i] * st.cross[i] / den;
        let d_cross = 2.0 * st.cross[i] / den * scale;
        let d_va = -cc * st.vb[i] / den * scale;
        let d_vb = -cc * st.va[i] / den * scale;
        let n = st.n[i];
        g_sab[i] = d_cross;
        g_saa[i] = d_va;
        g_sbb[i] = d_vb;
        g_sa[i] = -d_cross * st.sb[i] / n - 2.0 * d_va * st.sa[i] / n;
        g_sb[i] = -d_cross * st.sa[i] / n - 2.0 * d_vb * st.sb[i] / n;
    }
    // the truncated window relation is symmetric, so the adjoint of a box
    // sum is the same box sum
    let b_sa = box_sum(&g_sa, dims, r);
    let b_sb = box_sum(&g_sb, dims, r);
    let b_saa = box_sum(&g_saa, dims, r);
    let b_sbb = box_sum(&g_sbb, dims, r);
    let b_sab = box_sum(&g_sab, dims, r);
    let da = (0..len)
        .map(|i| b_sa[i] + 2.0 * a[i] * b_saa[i] + b[i] * b_sab[i])
        .collect();
    let db = (0..len)
        .map(|i| b_sb[i] + 2.0 * b[i] * b_sbb[i] + a[i] * b_sab[i])
        .collect();
    (da, db)
}

/// `(1/3)·Σ_axes mean((φ[x+e_a] − φ[x])²)`, each mean over the three channels
/// and the positions where the forward neighbour exists. Axes of extent 1
/// contribute zero.
pub(crate) fn smoothness_forward(field: &[f64], dims: [usize; 3]) -> f64 {
    let n: usize = dims.iter().product();
    let mut total = 0.0;
    for axis in 0..3 {
        if dims[axis] < 2 {
            continue;
        }
        let mut acc = 0.0;
        for c in 0..3 {
            let f = &field[c * n..(c + 1) * n];
            for_each_forward_pair(dims, axis, |i, j| {
                let d = f[j] - f[i];
                acc += d * d;
            });
        }
        total += acc / pair_count(dims, axis) as f64;
    }
    total / 3.0
}

pub(crate) fn smoothness_backward(field: &[f64], dims: [usize; 3], g: f64) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let mut out = vec![0.0; 3 * n];
    for axis in 0..3 {
        if dims[axis] < 2 {
            continue;
        }
        let k = 2.0 * g / (3.0 * pair_count(dims, axis) as f64);
        for c in 0..3 {
            let f = &field[c * n..(c + 1) * n];
            let o = &mut out[c * n..(c + 1) * n];
            for_each_forward_pair(dims, axis, |i, j| {
                let d = k * (f[j] - f[i]);
                o[j] += d;
                o[i] -= d;
            });
        }
    }
    out
}

fn pair_count(dims: [usize; 3], axis: usize) -> usize {
    let mut d = dims;
    d[axis] -= 1;
    3 * d.iter().product::<usize>()
}

fn for_each_forward_pair(dims: [usize; 3], axis: usize, mut f: impl FnMut(usize, usize)) {
    let mut lim = dims;
    lim[axis] -= 1;
    let step = match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    };
    for d in 0..lim[0] {
        for h in 0..lim[1] {
            for w in 0..lim[2] {
                let i = idx3(dims, d, h, w);
                f(i, i + step);
            }
        }
    }
}

/// Squared-gradient penalty of a displacement field; zero iff the field is constant.
pub fn smoothness(field: &DisplacementField) -> f64 {
    smoothness_forward(field.tensor().data(), field.dims())
}

/// Value of the objective and its two parts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms {
    /// Σ −local_ncc over the frames.
    pub similarity: f64,
    /// Σ smoothness over the frames (unweighted).
    pub smoothness: f64,
    /// similarity + λ·smoothness
    pub total: f64,
}

/// `Σ_j −NCC(reference, warped_j) + λ·smoothness(φ_j)`.
pub fn total_loss(
    reference: &Tensor,
    warped: &[Tensor],
    fields: &[DisplacementField],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    if warped.len() != fields.len() {
        return Err(Error::dim(format!(
            "{} warped frames but {} fields",
            warped.len(),
            fields.len()
        )));
    }
    let mut terms = LossTerms::default();
    for (w, f) in warped.iter().zip(fields) {
        terms.similarity -= local_ncc(reference, w, cfg)?;
        terms.smoothness += smoothness(f);
    }
    terms.total = terms.similarity + cfg.lambda * terms.smoothness;
    Ok(terms)
}
