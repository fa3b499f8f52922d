//! Dynamic image series: 3-D frames with timing and voxel spacing.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSeries {
    frames: Vec<Tensor>,
    /// Frame mid-times (min), strictly increasing.
    mid_times: Vec<f64>,
    /// Frame durations (min).
    durations: Vec<f64>,
    spacing_mm: [f64; 3],
}

impl FrameSeries {
    pub fn new(frames: Vec<Tensor>, mid_times: Vec<f64>, durations: Vec<f64>, spacing_mm: [f64; 3]) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::dim("series has no frames"));
        }
        let dims = frames[0].vol_dims()?;
        if frames.iter().any(|f| f.shape() != dims) {
            return Err(Error::dim("frames differ in shape"));
        }
        if mid_times.len() != frames.len() || durations.len() != frames.len() {
            return Err(Error::dim(format!(
                "{} frames, {} mid-times, {} durations",
                frames.len(),
                mid_times.len(),
                durations.len()
            )));
        }
        validate_timing(&mid_times, &durations)?;
        if spacing_mm.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::config("voxel spacing must be positive"));
        }
        for (k, f) in frames.iter().enumerate() {
            f.check_finite(&format!("frame {k}"))?;
        }
        Ok(Self {
            frames,
            mid_times,
            durations,
            spacing_mm,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.frames[0].vol_dims().expect("validated")
    }

    pub fn frames(&self) -> &[Tensor] {
        &self.frames
    }

    pub fn frame(&self, k: usize) -> &Tensor {
        &self.frames[k]
    }

    pub fn mid_times(&self) -> &[f64] {
        &self.mid_times
    }

    pub fn durations(&self) -> &[f64] {
        &self.durations
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    /// Same timing and spacing, new frames.
    pub fn with_frames(&self, frames: Vec<Tensor>) -> Result<Self> {
        Self::new(frames, self.mid_times.clone(), self.durations.clone(), self.spacing_mm)
    }

    /// Time-activity curve of voxel `i`.
    pub fn tac(&self, i: usize) -> Vec<f64> {
        self.frames.iter().map(|f| f.data()[i]).collect()
    }
}

pub fn validate_timing(mid_times: &[f64], durations: &[f64]) -> Result<()> {
    if mid_times.iter().any(|t| !t.is_finite()) || mid_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("frame mid-times must be finite and strictly increasing"));
    }
    if durations.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
        return Err(Error::config("frame durations must be positive"));
    }
    Ok(())
}

/// Equal-length consecutive frames: `n` mid-times starting at `first_mid`.
pub fn uniform_timing(n: usize, first_mid: f64, duration: f64) -> (Vec<f64>, Vec<f64>) {
    let mids = (0..n).map(|k| first_mid + k as f64 * duration).collect();
    (mids, vec![duration; n])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        let f = || Tensor::zeros(&[2, 2, 2]);
        assert!(FrameSeries::new(vec![f(), f()], vec![1.0, 2.0], vec![1.0, 1.0], [1.0; 3]).is_ok());
        assert!(matches!(
            FrameSeries::new(vec![f(), f()], vec![2.0, 2.0], vec![1.0, 1.0], [1.0; 3]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            FrameSeries::new(vec![f(), Tensor::zeros(&[2, 2, 3])], vec![1.0, 2.0], vec![1.0, 1.0], [1.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(FrameSeries::new(vec![f()], vec![1.0], vec![0.0], [1.0; 3]).is_err());
        assert!(FrameSeries::new(vec![], vec![], vec![], [1.0; 3]).is_err());
    }

    #[test]
    fn uniform_timing_mid_points() {
        let (m, d) = uniform_timing(8, 22.5, 5.0);
        assert_eq!(m.first(), Some(&22.5));
        assert_eq!(m.last(), Some(&57.5));
        assert_eq!(d, vec![5.0; 8]);
    }
}
