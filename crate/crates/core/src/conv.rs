//! 3-D convolution (cross-correlation) and its transpose, via im2col + GEMM.
//!
//! Feature maps are `[C,D,H,W]`. Conv kernels are `[C_out,C_in,k,k,k]` with
//! k ∈ {1, 3}. Transpose-conv kernels are `[C_in,C_out,3,3,3]`, i.e. the
//! kernel of the stride-2 convolution they are the adjoint of.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of one convolution over a fixed input extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(in_dims: [usize; 3], k: usize, stride: usize, pad: usize) -> Result<Self> {
        if !(k == 1 || k == 3) {
            return Err(Error::dim(format!("kernel extent {k} not supported")));
        }
        if !(stride == 1 || stride == 2) || pad > 1 {
            return Err(Error::dim(format!(
                "unsupported stride {stride} / padding {pad}"
            )));
        }
        let mut out_dims = [0; 3];
        for a in 0..3 {
            let span = in_dims[a] + 2 * pad;
            if span < k {
                return Err(Error::dim(format!(
                    "extent {} too small for kernel {k} with padding {pad}",
                    in_dims[a]
                )));
            }
            out_dims[a] = (span - k) / stride + 1;
        }
        Ok(Self {
            in_dims,
            out_dims,
            k,
            stride,
            pad,
        })
    }

    fn n_in(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn n_out(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Input index touched by output index `o` and kernel offset `kk` on axis `a`.
    #[inline]
    fn src(&self, a: usize, o: usize, kk: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        if i >= 0 && (i as usize) < self.in_dims[a] {
            Some(i as usize)
        } else {
            None
        }
    }
}

/// Unfold `x` (`channels × in_dims`) into a `[channels·k³, n_out]` matrix.
fn im2col(x: &[f64], channels: usize, g: &ConvGeom) -> Vec<f64> {
    let k = g.k;
    let n_out = g.n_out();
    let n_in = g.n_in();
    let [_, ih, iw] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let mut cols = vec![0.0; channels * k * k * k * n_out];
    for c in 0..channels {
        let xc = &x[c * n_in..(c + 1) * n_in];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let dst = &mut cols[row * n_out..(row + 1) * n_out];
                    for zo in 0..od {
                        let Some(zi) = g.src(0, zo, kd) else { continue };
                        for yo in 0..oh {
                            let Some(yi) = g.src(1, yo, kh) else { continue };
                            let base_o = (zo * oh + yo) * ow;
                            let base_i = (zi * ih + yi) * iw;
                            for xo in 0..ow {
                                if let Some(xi) = g.src(2, xo, kw) {
                                    dst[base_o + xo] = xc[base_i + xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `channels × in_dims` buffer.
fn col2im(cols: &[f64], channels: usize, g: &ConvGeom) -> Vec<f64> {
    let k = g.k;
    let n_out = g.n_out();
    let n_in = g.n_in();
    let [_, ih, iw] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let mut x = vec![0.0; channels * n_in];
    for c in 0..channels {
        let xc = &mut x[c * n_in..(c + 1) * n_in];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let src = &cols[row * n_out..(row + 1) * n_out];
                    for zo in 0..od {
                        let Some(zi) = g.src(0, zo, kd) else { continue };
                        for yo in 0..oh {
                            let Some(yi) = g.src(1, yo, kh) else { continue };
                            let base_o = (zo * oh + yo) * ow;
                            let base_i = (zi * ih + yi) * iw;
                            for xo in 0..ow {
                                if let Some(xi) = g.src(2, xo, kw) {
                                    xc[base_i + xi] += src[base_o + xo];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Row-major `c[m×n] = op(a)[m×k] · op(b)[k×n]` (+ `c` when `accumulate`).
/// Transposition is expressed by the stride pairs.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every index reached by the strides lies inside the slices:
    // callers pass (row, col) strides matching the logical m×k / k×n / m×n
    // shapes of buffers of exactly those sizes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_kernel(w: &Tensor, c_in: usize) -> Result<(usize, usize)> {
    match w.shape() {
        &[co, ci, k0, k1, k2] if ci == c_in && k0 == k1 && k1 == k2 => Ok((co, k0)),
        s => Err(Error::dim(format!(
            "kernel shape {s:?} incompatible with {c_in} input channels"
        ))),
    }
}

fn check_bias(b: Option<&Tensor>, channels: usize) -> Result<()> {
    match b {
        Some(b) if b.shape() != [channels] => Err(Error::dim(format!(
            "bias shape {:?}, expected [{channels}]",
            b.shape()
        ))),
        _ => Ok(()),
    }
}

fn add_bias(out: &mut [f64], b: Option<&Tensor>, per_channel: usize) {
    if let Some(b) = b {
        for (c, &bc) in b.data().iter().enumerate() {
            for v in &mut out[c * per_channel..(c + 1) * per_channel] {
                *v += bc;
            }
        }
    }
}

fn bias_grad(dout: &[f64], channels: usize, per_channel: usize) -> Tensor {
    Tensor::from_fn(&[channels], |c| {
        dout[c * per_channel..(c + 1) * per_channel].iter().sum()
    })
}

/// Direct correlation of a `[C_in,D,H,W]` map with `[C_out,C_in,k,k,k]`
/// kernels, zero padding, plus optional per-channel bias.
pub fn conv3d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (ci, dims) = x.map_dims()?;
    let (co, k) = check_kernel(w, ci)?;
    check_bias(b, co)?;
    x.check_finite("conv3d input")?;
    let g = ConvGeom::new(dims, k, stride, pad)?;
    let n_out = g.n_out();
    let kk = ci * k * k * k;
    let mut out = vec![0.0; co * n_out];
    if k == 1 && stride == 1 && pad == 0 {
        gemm(co, kk, n_out, w.data(), (kk as isize, 1), x.data(), (n_out as isize, 1), &mut out, false);
    } else {
        let cols = im2col(x.data(), ci, &g);
        gemm(co, kk, n_out, w.data(), (kk as isize, 1), &cols, (n_out as isize, 1), &mut out, false);
    }
    add_bias(&mut out, b, n_out);
    let [d, h, ww] = g.out_dims;
    Tensor::new(vec![co, d, h, ww], out)
}

/// Gradients of [`conv3d`]: `(dx, dw, db)`. `dx` is skipped when `need_dx` is false.
pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    with_bias: bool,
    stride: usize,
    pad: usize,
    dout: &Tensor,
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Option<Tensor>)> {
    let (ci, dims) = x.map_dims()?;
    let (co, k) = check_kernel(w, ci)?;
    let g = ConvGeom::new(dims, k, stride, pad)?;
    let n_out = g.n_out();
    let kk = ci * k * k * k;
    if dout.len() != co * n_out {
        return Err(Error::dim("conv3d backward: output gradient shape"));
    }
    let direct = k == 1 && stride == 1 && pad == 0;
    let cols_owned;
    let cols: &[f64] = if direct {
        x.data()
    } else {
        cols_owned = im2col(x.data(), ci, &g);
        &cols_owned
    };
    let mut dw = vec![0.0; co * kk];
    gemm(co, n_out, kk, dout.data(), (n_out as isize, 1), cols, (1, n_out as isize), &mut dw, false);
    let dx = if need_dx {
        let mut dcols = vec![0.0; kk * n_out];
        gemm(kk, co, n_out, w.data(), (1, kk as isize), dout.data(), (n_out as isize, 1), &mut dcols, false);
        let dx = if direct { dcols } else { col2im(&dcols, ci, &g) };
        Some(Tensor::new(x.shape().to_vec(), dx)?)
    } else {
        None
    };
    let db = with_bias.then(|| bias_grad(dout.data(), co, n_out));
    Ok((dx, Tensor::new(w.shape().to_vec(), dw)?, db))
}

fn transpose_geom(x: &Tensor, w: &Tensor) -> Result<(usize, usize, ConvGeom)> {
    let (cx, dims) = x.map_dims()?;
    let (cy, k) = match w.shape() {
        &[a, b, 3, 3, 3] if a == cx => (b, 3),
        s => {
            return Err(Error::dim(format!(
                "transpose kernel shape {s:?} incompatible with {cx} input channels"
            )))
        }
    };
    let big = [dims[0] * 2, dims[1] * 2, dims[2] * 2];
    let g = ConvGeom::new(big, k, 2, 1)?;
    debug_assert_eq!(g.out_dims, dims);
    Ok((cx, cy, g))
}

/// Stride-2 transpose convolution: the adjoint of `conv3d(·, w, None, 2, 1)`
/// applied to a map of twice the spatial extent, plus bias. Output extents
/// are exactly twice the input extents.
pub fn conv3d_transpose(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    x.check_finite("conv3d_transpose input")?;
    let (cx, cy, g) = transpose_geom(x, w)?;
    check_bias(b, cy)?;
    let n_small = g.n_out();
    let kk = cy * 27;
    let mut cols = vec![0.0; kk * n_small];
    gemm(kk, cx, n_small, w.data(), (1, kk as isize), x.data(), (n_small as isize, 1), &mut cols, false);
    let mut out = col2im(&cols, cy, &g);
    add_bias(&mut out, b, g.n_in());
    let [d, h, ww] = g.in_dims;
    Tensor::new(vec![cy, d, h, ww], out)
}

/// Gradients of [`conv3d_transpose`]: `(dx, dw, db)`.
pub fn conv3d_transpose_backward(
    x: &Tensor,
    w: &Tensor,
    with_bias: bool,
    dout: &Tensor,
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Option<Tensor>)> {
    let (cx, cy, g) = transpose_geom(x, w)?;
    let n_small = g.n_out();
    let kk = cy * 27;
    if dout.len() != cy * g.n_in() {
        return Err(Error::dim("conv3d_transpose backward: output gradient shape"));
    }
    let dcols = im2col(dout.data(), cy, &g);
    let mut dw = vec![0.0; cx * kk];
    gemm(cx, n_small, kk, x.data(), (n_small as isize, 1), &dcols, (1, n_small as isize), &mut dw, false);
    let dx = if need_dx {
        let mut dx = vec![0.0; cx * n_small];
        gemm(cx, kk, n_small, w.data(), (kk as isize, 1), &dcols, (n_small as isize, 1), &mut dx, false);
        Some(Tensor::new(x.shape().to_vec(), dx)?)
    } else {
        None
    };
    let db = with_bias.then(|| bias_grad(dout.data(), cy, g.n_in()));
    Ok((dx, Tensor::new(w.shape().to_vec(), dw)?, db))
}
