//! 2× max-pooling and 2× nearest-neighbour upsampling of `[C,D,H,W]` maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn halve(dims: [usize; 3]) -> Result<[usize; 3]> {
    if dims.iter().any(|d| d % 2 != 0) {
        return Err(Error::dim(format!("extents {dims:?} not divisible by 2")));
    }
    Ok([dims[0] / 2, dims[1] / 2, dims[2] / 2])
}

/// Max over disjoint 2³ blocks. Returns the pooled map and, per output
/// element, the flat input index that won (first maximum in scan order).
pub fn max_pool2(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (c, dims) = x.map_dims()?;
    let od = halve(dims)?;
    let n_in: usize = dims.iter().product();
    let n_out: usize = od.iter().product();
    let src = x.data();
    let mut out = Vec::with_capacity(c * n_out);
    let mut arg = Vec::with_capacity(c * n_out);
    for ch in 0..c {
        for z in 0..od[0] {
            for y in 0..od[1] {
                for xx in 0..od[2] {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0usize;
                    for a in 0..2 {
                        for b in 0..2 {
                            for e in 0..2 {
                                let i = ch * n_in
                                    + ((2 * z + a) * dims[1] + 2 * y + b) * dims[2]
                                    + 2 * xx
                                    + e;
                                if src[i] > best {
                                    best = src[i];
                                    at = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(at as u32);
                }
            }
        }
    }
    Ok((Tensor::new(vec![c, od[0], od[1], od[2]], out)?, arg))
}

/// Pooling with the winners fixed in advance.
pub(crate) fn max_pool2_frozen(x: &Tensor, arg: &[u32]) -> Result<Tensor> {
    let (c, dims) = x.map_dims()?;
    let od = halve(dims)?;
    let data = arg.iter().map(|&i| x.data()[i as usize]).collect();
    Tensor::new(vec![c, od[0], od[1], od[2]], data)
}

pub(crate) fn max_pool2_backward(in_shape: &[usize], arg: &[u32], dout: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    let d = dx.data_mut();
    for (&i, &g) in arg.iter().zip(dout.data()) {
        d[i as usize] += g;
    }
    dx
}

/// Each voxel replicated into a 2³ block.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (c, [d, h, w]) = x.map_dims()?;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let src = x.data();
    let mut out = vec![0.0; c * od * oh * ow];
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let row_in = ((ch * d + z / 2) * h + y / 2) * w;
                let row_out = ((ch * od + z) * oh + y) * ow;
                for xx in 0..ow {
                    out[row_out + xx] = src[row_in + xx / 2];
                }
            }
        }
    }
    Tensor::new(vec![c, od, oh, ow], out)
}

pub(crate) fn upsample2_backward(in_shape: &[usize], dout: &Tensor) -> Result<Tensor> {
    let mut dx = Tensor::zeros(in_shape);
    let (c, [d, h, w]) = dx.map_dims()?;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let g = dout.data();
    let dxd = dx.data_mut();
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let row_in = ((ch * d + z / 2) * h + y / 2) * w;
                let row_out = ((ch * od + z) * oh + y) * ow;
                for xx in 0..ow {
                    dxd[row_in + xx / 2] += g[row_out + xx];
                }
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_picks_block_max() {
        let x = Tensor::from_fn(&[1, 2, 2, 4], |i| ((i * 7) % 5) as f64);
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        for (o, &a) in y.data().iter().zip(&arg) {
            assert_eq!(*o, x.data()[a as usize]);
        }
        assert_eq!(max_pool2_frozen(&x, &arg).unwrap(), y);
        assert!(max_pool2(&Tensor::zeros(&[1, 3, 2, 2])).is_err());
    }

    #[test]
    fn upsample_then_backward_counts_block() {
        let x = Tensor::from_fn(&[2, 1, 2, 1], |i| i as f64);
        let y = upsample2(&x).unwrap();
        assert_eq!(y.shape(), &[2, 2, 4, 2]);
        let g = upsample2_backward(x.shape(), &Tensor::full(y.shape(), 1.0)).unwrap();
        assert!(g.data().iter().all(|&v| v == 8.0));
    }
}
