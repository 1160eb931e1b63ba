//! Input sets and the deterministic layer-zero covariance.

use crate::error::{Error, Result};
use crate::tensor::{CovDiag, CovFull, SpatialShape};

/// A finite set of equally shaped images; pixel values are channel-major
/// (`sample[c * d + alpha]`).
#[derive(Debug, Clone, PartialEq)]
pub struct InputSet {
    samples: Vec<Vec<f64>>,
    ids: Vec<u64>,
    n_channels: usize,
    shape: SpatialShape,
}

impl InputSet {
    pub fn new(
        samples: Vec<Vec<f64>>,
        ids: Vec<u64>,
        n_channels: usize,
        shape: SpatialShape,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("input set is empty".into()));
        }
        if ids.len() != samples.len() {
            return Err(Error::InvalidInput(format!(
                "{} ids for {} samples",
                ids.len(),
                samples.len()
            )));
        }
        let want = n_channels * shape.len();
        for (i, s) in samples.iter().enumerate() {
            if s.len() != want {
                return Err(Error::InvalidInput(format!(
                    "sample {i} has {} values, expected {want}",
                    s.len()
                )));
            }
            if s.iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidInput(format!(
                    "sample {i} is the all-zeros image"
                )));
            }
        }
        Ok(InputSet {
            samples,
            ids,
            n_channels,
            shape,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn shape(&self) -> SpatialShape {
        self.shape
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i]
    }

    #[inline]
    pub fn pixel(&self, i: usize, channel: usize, alpha: usize) -> f64 {
        self.samples[i][channel * self.shape.len() + alpha]
    }

    /// Empirical uncentered input covariance
    /// `[K^0]_{a,a'}(x,x') = (1/n0) sum_c x_{c,a} x'_{c,a'}`.
    pub fn input_cov(&self) -> CovFull {
        let n = self.len();
        let d = self.shape.len();
        let inv = 1.0 / self.n_channels as f64;
        let mut k = CovFull::zeros(n, self.shape, 0);
        for x in 0..n {
            for xp in 0..n {
                for a in 0..d {
                    for ap in 0..d {
                        let mut acc = 0.0;
                        for c in 0..self.n_channels {
                            acc += self.pixel(x, c, a) * self.pixel(xp, c, ap);
                        }
                        k.set(x, xp, a, ap, inv * acc);
                    }
                }
            }
        }
        k
    }

    /// Pixel-diagonal restriction of [`InputSet::input_cov`]; identical
    /// arithmetic, so the entries match the full tensor bitwise.
    pub fn input_cov_diag(&self) -> CovDiag {
        let n = self.len();
        let d = self.shape.len();
        let inv = 1.0 / self.n_channels as f64;
        let mut k = CovDiag::zeros(n, self.shape, 0);
        for x in 0..n {
            for xp in 0..n {
                for a in 0..d {
                    let mut acc = 0.0;
                    for c in 0..self.n_channels {
                        acc += self.pixel(x, c, a) * self.pixel(xp, c, a);
                    }
                    k.set(x, xp, a, inv * acc);
                }
            }
        }
        k
    }

    /// Re-views every sample as a single pixel with `n0 * d` channels, the
    /// fully connected reading of an image.
    pub fn flatten_to_single_pixel(&self) -> InputSet {
        InputSet {
            samples: self.samples.clone(),
            ids: self.ids.clone(),
            n_channels: self.n_channels * self.shape.len(),
            shape: SpatialShape::OneD(1),
        }
    }

    /// Copy of the set with sample `i` replaced by its circular shift along
    /// the last axis (all channels shifted together).
    pub fn with_shifted_sample(&self, i: usize, shift: usize) -> InputSet {
        let mut out = self.clone();
        out.samples[i] = shift_sample(&self.samples[i], self.n_channels, self.shape, shift);
        out
    }
}

/// Circular shift of one channel-major sample along the last spatial axis.
pub fn shift_sample(
    sample: &[f64],
    n_channels: usize,
    shape: SpatialShape,
    shift: usize,
) -> Vec<f64> {
    let d = shape.len();
    let mut out = vec![0.0; sample.len()];
    match shape {
        SpatialShape::OneD(w) => {
            for c in 0..n_channels {
                for a in 0..w {
                    out[c * d + (a + shift) % w] = sample[c * d + a];
                }
            }
        }
        SpatialShape::TwoD(h, w) => {
            for c in 0..n_channels {
                for r in 0..h {
                    for col in 0..w {
                        out[c * d + r * w + (col + shift) % w] = sample[c * d + r * w + col];
                    }
                }
            }
        }
    }
    out
}
