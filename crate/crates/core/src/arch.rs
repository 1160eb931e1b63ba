//! Architecture hyperparameters: depth, filter geometry, variances,
//! nonlinearity, padding, connectivity, per-layer linear post-operators, and
//! the readout that collapses pixels into a class kernel.

use crate::error::{Error, Result};
use crate::tensor::SpatialShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu,
    Erf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Indices wrap modulo the spatial size; the size stays constant.
    Circular,
    /// No padding; every axis shrinks by `2k` per layer.
    Valid,
    /// Zero padding; out-of-range covariance entries read as zero.
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Cnn,
    Lcn,
    Fcn,
}

/// Deterministic linear pixel map applied between the convolution and the
/// nonlinearity; acts on kernels by congruence `K -> B K B^T`.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearPostOp {
    /// Keep every `s`-th pixel.
    Stride { s: usize },
    /// Average over windows of `ws` pixels advancing by `s`.
    AvgPool { s: usize, ws: usize },
    /// Keep an explicit list of pixels (1D shapes only).
    SubsampleSlice { offsets: Vec<usize> },
}

impl LinearPostOp {
    /// Output length of the 1D operator on a `d1`-pixel axis.
    fn out_len_1d(&self, d1: usize) -> Result<usize> {
        match self {
            LinearPostOp::Stride { s } => {
                if *s == 0 {
                    return Err(Error::InvalidArch("stride must be >= 1".into()));
                }
                Ok((d1 - 1) / s + 1)
            }
            LinearPostOp::AvgPool { s, ws } => {
                if *s == 0 || *ws == 0 {
                    return Err(Error::InvalidArch(
                        "pool stride and window must be >= 1".into(),
                    ));
                }
                if *ws > d1 {
                    return Err(Error::ShapeMismatch(format!(
                        "pool window {ws} exceeds spatial size {d1}"
                    )));
                }
                Ok((d1 - ws) / s + 1)
            }
            LinearPostOp::SubsampleSlice { offsets } => {
                if offsets.is_empty() {
                    return Err(Error::InvalidArch("subsample slice is empty".into()));
                }
                if let Some(&bad) = offsets.iter().find(|&&o| o >= d1) {
                    return Err(Error::ShapeMismatch(format!(
                        "subsample offset {bad} out of range for spatial size {d1}"
                    )));
                }
                Ok(offsets.len())
            }
        }
    }

    /// Row-major 1D operator matrix of shape `d2 x d1`. Rows of an average
    /// pool sum to one; stride and subsample rows hold exactly one 1.
    fn matrix_1d(&self, d1: usize) -> Result<Vec<f64>> {
        let d2 = self.out_len_1d(d1)?;
        let mut b = vec![0.0; d2 * d1];
        match self {
            LinearPostOp::Stride { s } => {
                for i in 0..d2 {
                    b[i * d1 + i * s] = 1.0;
                }
            }
            LinearPostOp::AvgPool { s, ws } => {
                let w = 1.0 / *ws as f64;
                for i in 0..d2 {
                    for j in (i * s)..(i * s + ws) {
                        b[i * d1 + j] = w;
                    }
                }
            }
            LinearPostOp::SubsampleSlice { offsets } => {
                for (i, &o) in offsets.iter().enumerate() {
                    b[i * d1 + o] = 1.0;
                }
            }
        }
        Ok(b)
    }

    /// Operator matrix for the given spatial shape together with the output
    /// shape. 2D shapes apply the same 1D operator along each axis (Kronecker
    /// product on the flattened pixel index).
    pub fn matrix(&self, shape: SpatialShape) -> Result<(Vec<f64>, SpatialShape)> {
        match shape {
            SpatialShape::OneD(d1) => {
                let b = self.matrix_1d(d1)?;
                let d2 = self.out_len_1d(d1)?;
                Ok((b, SpatialShape::OneD(d2)))
            }
            SpatialShape::TwoD(h, w) => {
                if matches!(self, LinearPostOp::SubsampleSlice { .. }) {
                    return Err(Error::InvalidArch(
                        "subsample slice post-op supports 1D shapes only".into(),
                    ));
                }
                let br = self.matrix_1d(h)?;
                let bc = self.matrix_1d(w)?;
                let h2 = self.out_len_1d(h)?;
                let w2 = self.out_len_1d(w)?;
                let mut b = vec![0.0; (h2 * w2) * (h * w)];
                for r2 in 0..h2 {
                    for c2 in 0..w2 {
                        for r1 in 0..h {
                            for c1 in 0..w {
                                b[(r2 * w2 + c2) * (h * w) + (r1 * w + c1)] =
                                    br[r2 * h + r1] * bc[c2 * w + c1];
                            }
                        }
                    }
                }
                Ok((b, SpatialShape::TwoD(h2, w2)))
            }
        }
    }

    /// For one-nonzero-per-row operators: the kept input pixel per output
    /// pixel. `None` for average pooling (which mixes pixels).
    pub fn selection(&self, shape: SpatialShape) -> Result<Option<Vec<usize>>> {
        match self {
            LinearPostOp::AvgPool { .. } => Ok(None),
            _ => {
                let (b, out_shape) = self.matrix(shape)?;
                let d1 = shape.len();
                let sel = (0..out_shape.len())
                    .map(|i| {
                        (0..d1)
                            .find(|&j| b[i * d1 + j] == 1.0)
                            .expect("selection row lacks a unit entry")
                    })
                    .collect();
                Ok(Some(sel))
            }
        }
    }
}

/// How pixels of the top layer collapse into a class kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum ReadoutKind {
    /// Flatten pixels into channels before the dense layer.
    Vectorize,
    /// Global average pooling; equals a projection with `h = (1/d) * 1`.
    Pool,
    /// Keep one pixel; equals a projection with `h = e_alpha`.
    SubsamplePixel { index: usize },
    /// General projection with weights `h`.
    Projection { weights: Vec<f64> },
}

/// Readout specification; the dense layer's variances default to the
/// hidden-layer values but are independently settable.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutSpec {
    pub kind: ReadoutKind,
    pub sigma_w2: Option<f64>,
    pub sigma_b2: Option<f64>,
}

impl ReadoutSpec {
    pub fn new(kind: ReadoutKind) -> Self {
        ReadoutSpec {
            kind,
            sigma_w2: None,
            sigma_b2: None,
        }
    }

    /// Whether the pixel-diagonal track suffices for this readout (one-hot
    /// projections and vectorization never touch off-diagonal pixel pairs).
    pub fn diag_sufficient(&self) -> bool {
        match &self.kind {
            ReadoutKind::Vectorize | ReadoutKind::SubsamplePixel { .. } => true,
            ReadoutKind::Pool => false,
            ReadoutKind::Projection { weights } => one_hot_index(weights).is_some(),
        }
    }
}

/// `Some(i)` when `h` is exactly the standard basis vector `e_i`.
pub fn one_hot_index(h: &[f64]) -> Option<usize> {
    let mut hit = None;
    for (i, &v) in h.iter().enumerate() {
        if v == 1.0 {
            if hit.is_some() {
                return None;
            }
            hit = Some(i);
        } else if v != 0.0 {
            return None;
        }
    }
    hit
}

/// Architecture hyperparameters shared by exact propagation and the Monte
/// Carlo sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    /// Number of kernel recursion steps in the trace; the readout applies one
    /// further convolution on top.
    pub depth: usize,
    /// Filter half-width `k`; the filter covers `2k+1` offsets per axis.
    pub filter_half_width: usize,
    /// Per-offset variance fractions `v`, length `2k+1`, summing to one. 2D
    /// filters weight offset `(r, c)` by `v[r] * v[c]`.
    pub filter_weights: Vec<f64>,
    pub sigma_w2: f64,
    pub sigma_b2: f64,
    pub nonlinearity: Nonlinearity,
    pub padding: Padding,
    pub connectivity: Connectivity,
    /// Post-operators per trace layer (entry `l` runs after layer `l`'s
    /// convolution, before its nonlinearity); may be shorter than `depth`.
    pub post_ops: Vec<Vec<LinearPostOp>>,
    pub readout: ReadoutSpec,
}

/// Uniform variance fractions `v = 1/(2k+1)`.
pub fn uniform_filter_weights(half_width: usize) -> Vec<f64> {
    let taps = 2 * half_width + 1;
    vec![1.0 / taps as f64; taps]
}

impl ArchConfig {
    /// Plain CNN with circular padding, uniform filter weights, and a
    /// vectorizing readout.
    pub fn plain(
        depth: usize,
        half_width: usize,
        sigma_w2: f64,
        sigma_b2: f64,
        nonlinearity: Nonlinearity,
    ) -> Self {
        ArchConfig {
            depth,
            filter_half_width: half_width,
            filter_weights: uniform_filter_weights(half_width),
            sigma_w2,
            sigma_b2,
            nonlinearity,
            padding: Padding::Circular,
            connectivity: Connectivity::Cnn,
            post_ops: Vec::new(),
            readout: ReadoutSpec::new(ReadoutKind::Vectorize),
        }
    }

    /// Fully connected variant: no spatial structure, single pixel.
    pub fn fcn(depth: usize, sigma_w2: f64, sigma_b2: f64, nonlinearity: Nonlinearity) -> Self {
        let mut cfg = Self::plain(depth, 0, sigma_w2, sigma_b2, nonlinearity);
        cfg.connectivity = Connectivity::Fcn;
        cfg
    }

    pub fn with_readout(mut self, kind: ReadoutKind) -> Self {
        self.readout = ReadoutSpec::new(kind);
        self
    }

    pub fn top_sigma_w2(&self) -> f64 {
        self.readout.sigma_w2.unwrap_or(self.sigma_w2)
    }

    pub fn top_sigma_b2(&self) -> f64 {
        self.readout.sigma_b2.unwrap_or(self.sigma_b2)
    }

    pub fn validate(&self) -> Result<()> {
        let taps = 2 * self.filter_half_width + 1;
        if self.filter_weights.len() != taps {
            return Err(Error::InvalidArch(format!(
                "{} filter weights for half-width {} (need {taps})",
                self.filter_weights.len(),
                self.filter_half_width
            )));
        }
        if self.filter_weights.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidArch(
                "filter weights must be nonnegative".into(),
            ));
        }
        let sum: f64 = self.filter_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArch(format!(
                "filter weights sum to {sum}, need 1"
            )));
        }
        if !(self.sigma_w2 > 0.0) {
            return Err(Error::InvalidArch("sigma_w2 must be positive".into()));
        }
        if !(self.sigma_b2 >= 0.0) {
            return Err(Error::InvalidArch("sigma_b2 must be nonnegative".into()));
        }
        if self.connectivity == Connectivity::Fcn {
            if self.filter_half_width != 0 {
                return Err(Error::InvalidArch(
                    "fcn connectivity forces filter half-width 0".into(),
                ));
            }
            if self.padding != Padding::Circular {
                return Err(Error::InvalidArch(
                    "valid/same padding needs spatial tracking; fcn uses circular".into(),
                ));
            }
        }
        if self.post_ops.len() > self.depth {
            return Err(Error::InvalidArch(format!(
                "{} post-op layers exceed depth {}",
                self.post_ops.len(),
                self.depth
            )));
        }
        if let ReadoutKind::SubsamplePixel { .. } | ReadoutKind::Projection { .. } =
            &self.readout.kind
        {
            // Pixel bounds are shape-dependent; checked when the readout runs.
        }
        if let Some(s) = self.readout.sigma_w2 {
            if !(s > 0.0) {
                return Err(Error::InvalidArch(
                    "readout sigma_w2 must be positive".into(),
                ));
            }
        }
        if let Some(s) = self.readout.sigma_b2 {
            if !(s >= 0.0) {
                return Err(Error::InvalidArch(
                    "readout sigma_b2 must be nonnegative".into(),
                ));
            }
        }
        Ok(())
    }

    /// Post-ops scheduled after trace layer `l`'s convolution.
    pub fn post_ops_at(&self, layer: usize) -> &[LinearPostOp] {
        self.post_ops.get(layer).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Whether any scheduled post-op mixes pixels (breaks the diagonal track).
    pub fn has_mixing_post_op(&self) -> bool {
        self.post_ops
            .iter()
            .flatten()
            .any(|op| matches!(op, LinearPostOp::AvgPool { .. }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_weights_sum_to_one() {
        let cfg = ArchConfig::plain(2, 3, 1.0, 0.0, Nonlinearity::Relu);
        cfg.validate().unwrap();
        assert_eq!(cfg.filter_weights.len(), 7);
    }

    #[test]
    fn weight_sum_tolerance_enforced() {
        let mut cfg = ArchConfig::plain(1, 1, 1.0, 0.0, Nonlinearity::Relu);
        cfg.filter_weights = vec![0.4, 0.4, 0.4];
        assert!(matches!(cfg.validate(), Err(Error::InvalidArch(_))));
    }

    #[test]
    fn fcn_rejects_spatial_filters() {
        let mut cfg = ArchConfig::fcn(1, 1.0, 0.0, Nonlinearity::Erf);
        cfg.validate().unwrap();
        cfg.filter_half_width = 1;
        cfg.filter_weights = uniform_filter_weights(1);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stride_matrix_selects_every_other_pixel() {
        let op = LinearPostOp::Stride { s: 2 };
        let (b, out) = op.matrix(SpatialShape::OneD(4)).unwrap();
        assert_eq!(out, SpatialShape::OneD(2));
        assert_eq!(b, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(
            op.selection(SpatialShape::OneD(4)).unwrap(),
            Some(vec![0, 2])
        );
    }

    #[test]
    fn avg_pool_rows_sum_to_one() {
        let op = LinearPostOp::AvgPool { s: 2, ws: 2 };
        let (b, out) = op.matrix(SpatialShape::OneD(6)).unwrap();
        assert_eq!(out, SpatialShape::OneD(3));
        for i in 0..3 {
            let row_sum: f64 = b[i * 6..(i + 1) * 6].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-15);
        }
        assert_eq!(op.selection(SpatialShape::OneD(6)).unwrap(), None);
    }

    #[test]
    fn two_d_stride_is_kronecker() {
        let op = LinearPostOp::Stride { s: 2 };
        let (b, out) = op.matrix(SpatialShape::TwoD(4, 4)).unwrap();
        assert_eq!(out, SpatialShape::TwoD(2, 2));
        // Output pixel (1,1) keeps input pixel (2,2) = flat index 10.
        let row = &b[3 * 16..4 * 16];
        assert_eq!(row.iter().position(|&v| v == 1.0), Some(10));
        assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn one_hot_detection() {
        assert_eq!(one_hot_index(&[0.0, 1.0, 0.0]), Some(1));
        assert_eq!(one_hot_index(&[0.5, 0.5]), None);
        assert_eq!(one_hot_index(&[1.0, 1.0]), None);
    }
}
