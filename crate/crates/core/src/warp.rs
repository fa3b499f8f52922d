//! Displacement fields, backward (pull) trilinear warping, and field
//! resampling between the working grid and the original grid.

use crate::error::{Error, Result};
use crate::tensor::{idx3, Tensor};

/// Per-voxel displacement in voxels of its own grid, stored `[3,D,H,W]`.
/// Channel `a` displaces along spatial axis `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    data: Tensor,
    spacing_mm: [f64; 3],
}

impl DisplacementField {
    pub fn new(data: Tensor, spacing_mm: [f64; 3]) -> Result<Self> {
        let (c, _) = data.map_dims()?;
        if c != 3 {
            return Err(Error::dim(format!("displacement field has {c} channels")));
        }
        data.check_finite("displacement field")?;
        Ok(Self { data, spacing_mm })
    }

    pub fn zeros(dims: [usize; 3], spacing_mm: [f64; 3]) -> Self {
        Self {
            data: Tensor::zeros(&[3, dims[0], dims[1], dims[2]]),
            spacing_mm,
        }
    }

    /// Same displacement (voxels) at every site.
    pub fn constant(dims: [usize; 3], spacing_mm: [f64; 3], disp: [f64; 3]) -> Self {
        let n: usize = dims.iter().product();
        let data = Tensor::from_fn(&[3, dims[0], dims[1], dims[2]], |i| disp[i / n]);
        Self { data, spacing_mm }
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Displacement vector at flat voxel index `i`.
    pub fn at(&self, i: usize) -> [f64; 3] {
        let n = self.data.len() / 3;
        let d = self.data.data();
        [d[i], d[n + i], d[2 * n + i]]
    }

    /// Euclidean length in mm at every voxel.
    pub fn magnitude_mm(&self) -> Vec<f64> {
        let n = self.data.len() / 3;
        (0..n)
            .map(|i| {
                let v = self.at(i);
                (0..3)
                    .map(|a| (v[a] * self.spacing_mm[a]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    /// Mean Euclidean distance in voxels to another field on the same grid.
    pub fn mean_endpoint_error(&self, other: &DisplacementField) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::dim("endpoint error: grid mismatch"));
        }
        let n = self.data.len() / 3;
        let total: f64 = (0..n)
            .map(|i| {
                let (a, b) = (self.at(i), other.at(i));
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            })
            .sum();
        Ok(total / n as f64)
    }
}

/// Corner weights along one axis for fractional offset `t`.
#[inline]
fn lin(t: f64) -> [f64; 2] {
    [1.0 - t, t]
}

/// Sample `vol` at `v + field(v)` for every voxel `v`; out-of-volume corners
/// read as zero. Returns the warped volume and the lower cell corner used at
/// each voxel. With `frozen` the cells are taken as given, which evaluates
/// the same trilinear polynomial even when the sample point leaves the cell.
pub(crate) fn warp_forward(
    vol: &[f64],
    dims: [usize; 3],
    field: &[f64],
    frozen: Option<&[[i32; 3]]>,
) -> (Vec<f64>, Vec<[i32; 3]>) {
    let n = vol.len();
    let mut out = vec![0.0; n];
    let mut cells = Vec::with_capacity(n);
    let mut i = 0;
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let p = [
                    d as f64 + field[i],
                    h as f64 + field[n + i],
                    w as f64 + field[2 * n + i],
                ];
                let cell = match frozen {
                    Some(c) => c[i],
                    None => [p[0].floor() as i32, p[1].floor() as i32, p[2].floor() as i32],
                };
                let wz = lin(p[0] - cell[0] as f64);
                let wy = lin(p[1] - cell[1] as f64);
                let wx = lin(p[2] - cell[2] as f64);
                let mut acc = 0.0;
                for (a, &fa) in wz.iter().enumerate() {
                    let z = cell[0] + a as i32;
                    if fa == 0.0 || z < 0 || z >= dims[0] as i32 {
                        continue;
                    }
                    for (b, &fb) in wy.iter().enumerate() {
                        let y = cell[1] + b as i32;
                        if fb == 0.0 || y < 0 || y >= dims[1] as i32 {
                            continue;
                        }
                        for (c, &fc) in wx.iter().enumerate() {
                            let x = cell[2] + c as i32;
                            if fc == 0.0 || x < 0 || x >= dims[2] as i32 {
                                continue;
                            }
                            acc += fa * fb * fc * vol[idx3(dims, z as usize, y as usize, x as usize)];
                        }
                    }
                }
                out[i] = acc;
                cells.push(cell);
                i += 1;
            }
        }
    }
    (out, cells)
}

/// Gradients of [`warp_forward`] w.r.t. the volume and the field.
pub(crate) fn warp_backward(
    vol: &[f64],
    dims: [usize; 3],
    field: &[f64],
    cells: &[[i32; 3]],
    dout: &[f64],
    need_dvol: bool,
    need_dfield: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let n = vol.len();
    let mut dvol = need_dvol.then(|| vec![0.0; n]);
    let mut dfield = need_dfield.then(|| vec![0.0; 3 * n]);
    let mut i = 0;
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let g = dout[i];
                if g == 0.0 {
                    i += 1;
                    continue;
                }
                let cell = cells[i];
                let t = [
                    d as f64 + field[i] - cell[0] as f64,
                    h as f64 + field[n + i] - cell[1] as f64,
                    w as f64 + field[2 * n + i] - cell[2] as f64,
                ];
                let wz = lin(t[0]);
                let wy = lin(t[1]);
                let wx = lin(t[2]);
                let sgn = [-1.0, 1.0];
                let mut dp = [0.0; 3];
                for a in 0..2 {
                    let z = cell[0] + a as i32;
                    if z < 0 || z >= dims[0] as i32 {
                        continue;
                    }
                    for b in 0..2 {
                        let y = cell[1] + b as i32;
                        if y < 0 || y >= dims[1] as i32 {
                            continue;
                        }
                        for c in 0..2 {
                            let x = cell[2] + c as i32;
                            if x < 0 || x >= dims[2] as i32 {
                                continue;
                            }
                            let j = idx3(dims, z as usize, y as usize, x as usize);
                            if let Some(dv) = dvol.as_mut() {
                                dv[j] += g * wz[a] * wy[b] * wx[c];
                            }
                            let v = vol[j];
                            dp[0] += v * sgn[a] * wy[b] * wx[c];
                            dp[1] += v * wz[a] * sgn[b] * wx[c];
                            dp[2] += v * wz[a] * wy[b] * sgn[c];
                        }
                    }
                }
                if let Some(df) = dfield.as_mut() {
                    df[i] += g * dp[0];
                    df[n + i] += g * dp[1];
                    df[2 * n + i] += g * dp[2];
                }
                i += 1;
            }
        }
    }
    (dvol, dfield)
}

/// Backward-warp a `[D,H,W]` volume: `out(v) = vol(v + φ(v))`, trilinear,
/// zero outside the volume.
pub fn warp(volume: &Tensor, field: &DisplacementField) -> Result<Tensor> {
    let dims = volume.vol_dims()?;
    if dims != field.dims() {
        return Err(Error::dim(format!(
            "warp: volume grid {dims:?} vs field grid {:?}",
            field.dims()
        )));
    }
    let (out, _) = warp_forward(volume.data(), dims, field.tensor().data(), None);
    Tensor::new(dims.to_vec(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleDirection {
    Up,
    Down,
}

/// Linear resampling of `channels` stacked volumes along one axis; `coord`
/// maps a new index to a (clamped) fractional old index.
fn resample_axis(
    src: &[f64],
    channels: usize,
    dims: [usize; 3],
    axis: usize,
    new_len: usize,
    coord: impl Fn(usize) -> f64,
) -> (Vec<f64>, [usize; 3]) {
    let mut nd = dims;
    nd[axis] = new_len;
    let old_len = dims[axis];
    let taps: Vec<(usize, usize, f64)> = (0..new_len)
        .map(|j| {
            let u = coord(j).clamp(0.0, (old_len - 1) as f64);
            let lo = (u.floor() as usize).min(old_len - 1);
            let hi = (lo + 1).min(old_len - 1);
            (lo, hi, u - lo as f64)
        })
        .collect();
    let n_old: usize = dims.iter().product();
    let n_new: usize = nd.iter().product();
    let mut out = vec![0.0; channels * n_new];
    for c in 0..channels {
        for d in 0..nd[0] {
            for h in 0..nd[1] {
                for w in 0..nd[2] {
                    let mut pos = [d, h, w];
                    let (lo, hi, t) = taps[pos[axis]];
                    pos[axis] = lo;
                    let a = src[c * n_old + idx3(dims, pos[0], pos[1], pos[2])];
                    pos[axis] = hi;
                    let b = src[c * n_old + idx3(dims, pos[0], pos[1], pos[2])];
                    let v = if t == 0.0 { a } else { (1.0 - t) * a + t * b };
                    out[c * n_new + idx3(nd, d, h, w)] = v;
                }
            }
        }
    }
    (out, nd)
}

/// Trilinear resampling of a field by an integer factor, with voxel-unit
/// rescaling of the displacement values (×factor up, ÷factor down). Voxel
/// centres are aligned the way block averaging aligns them: fine index `x`
/// sits at coarse coordinate `(x + ½)/f − ½`. Samples beyond the outermost
/// coarse centres are clamped.
pub fn resample_field(
    field: &DisplacementField,
    factor: usize,
    direction: ResampleDirection,
) -> Result<DisplacementField> {
    if factor < 2 {
        return Err(Error::config(format!("resample factor {factor} < 2")));
    }
    let f = factor as f64;
    let dims = field.dims();
    let (new_dims, scale): ([usize; 3], f64) = match direction {
        ResampleDirection::Up => ([dims[0] * factor, dims[1] * factor, dims[2] * factor], f),
        ResampleDirection::Down => {
            if dims.iter().any(|d| d % factor != 0) {
                return Err(Error::dim(format!(
                    "extents {dims:?} not divisible by {factor}"
                )));
            }
            ([dims[0] / factor, dims[1] / factor, dims[2] / factor], 1.0 / f)
        }
    };
    let mut data = field.tensor().data().to_vec();
    let mut cur = dims;
    for axis in 0..3 {
        let (next, nd) = match direction {
            ResampleDirection::Up => resample_axis(&data, 3, cur, axis, new_dims[axis], |x| {
                (x as f64 + 0.5) / f - 0.5
            }),
            ResampleDirection::Down => resample_axis(&data, 3, cur, axis, new_dims[axis], |i| {
                f * i as f64 + (f - 1.0) / 2.0
            }),
        };
        data = next;
        cur = nd;
    }
    for v in &mut data {
        *v *= scale;
    }
    let spacing = field.spacing_mm();
    let spacing = match direction {
        ResampleDirection::Up => spacing.map(|s| s / f),
        ResampleDirection::Down => spacing.map(|s| s * f),
    };
    DisplacementField::new(
        Tensor::new(vec![3, new_dims[0], new_dims[1], new_dims[2]], data)?,
        spacing,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&dims, |_| rng.random_range(0.0..3.0))
    }

    #[test]
    fn zero_field_is_bit_exact_identity() {
        let v = random_volume([4, 5, 6], 1);
        let out = warp(&v, &DisplacementField::zeros([4, 5, 6], [1.0; 3])).unwrap();
        assert_eq!(
            out.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn unit_shift_matches_index_shift() {
        let dims = [5, 4, 6];
        let v = random_volume(dims, 2);
        for axis in 0..3 {
            let mut disp = [0.0; 3];
            disp[axis] = 1.0;
            let out = warp(&v, &DisplacementField::constant(dims, [1.0; 3], disp)).unwrap();
            for d in 0..dims[0] {
                for h in 0..dims[1] {
                    for w in 0..dims[2] {
                        let mut src = [d, h, w];
                        src[axis] += 1;
                        let expect = if src[axis] < dims[axis] {
                            v.data()[idx3(dims, src[0], src[1], src[2])]
                        } else {
                            0.0
                        };
                        assert_eq!(out.data()[idx3(dims, d, h, w)], expect);
                    }
                }
            }
        }
    }

    #[test]
    fn half_step_on_ramp() {
        let dims = [3, 3, 8];
        let ramp = Tensor::from_fn(&dims, |i| 2.0 * (i % 8) as f64 + 1.0);
        let out = warp(&ramp, &DisplacementField::constant(dims, [1.0; 3], [0.0, 0.0, 0.5])).unwrap();
        for i in 0..out.len() {
            let w = i % 8;
            if w < 7 {
                assert!((out.data()[i] - (2.0 * (w as f64 + 0.5) + 1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_mismatch_is_error() {
        let v = random_volume([4, 4, 4], 3);
        assert!(matches!(
            warp(&v, &DisplacementField::zeros([4, 4, 5], [1.0; 3])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn resample_constant_and_round_trip() {
        let f = DisplacementField::constant([2, 3, 4], [4.0; 3], [1.0, -0.5, 0.25]);
        let up = resample_field(&f, 4, ResampleDirection::Up).unwrap();
        assert_eq!(up.dims(), [8, 12, 16]);
        assert!(up.at(17).iter().zip([4.0, -2.0, 1.0]).all(|(a, b)| (a - b).abs() < 1e-12));
        let back = resample_field(&up, 4, ResampleDirection::Down).unwrap();
        for (a, b) in back.tensor().data().iter().zip(f.tensor().data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(back.spacing_mm(), [4.0; 3]);
    }

    #[test]
    fn resample_linear_field_up() {
        // u_w = 0.5·w on the coarse grid (all channels)
        let data = Tensor::from_fn(&[3, 2, 2, 6], |i| 0.5 * (i % 6) as f64);
        let f = DisplacementField::new(data, [2.0; 3]).unwrap();
        let up = resample_field(&f, 2, ResampleDirection::Up).unwrap();
        let nd = up.dims();
        assert_eq!(nd, [4, 4, 12]);
        for x in 1..11 {
            let coarse = (x as f64 + 0.5) / 2.0 - 0.5;
            let expect = 2.0 * 0.5 * coarse;
            let got = up.tensor().data()[idx3(nd, 1, 2, x)];
            assert!((got - expect).abs() < 1e-12, "x={x}: {got} vs {expect}");
        }
    }

    #[test]
    fn resample_down_needs_divisible_extents() {
        let f = DisplacementField::zeros([4, 6, 5], [1.0; 3]);
        assert!(matches!(
            resample_field(&f, 2, ResampleDirection::Down),
            Err(Error::Dimension(_))
        ));
        assert!(resample_field(&f, 1, ResampleDirection::Up).is_err());
    }
}
