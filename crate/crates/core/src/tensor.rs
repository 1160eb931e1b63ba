//! Covariance containers: the 4-index pixel-pixel tensor, its pixel-diagonal
//! slice, and the sample-by-sample class kernel produced by a readout.
//!
//! Memory layout is sample-major, pixel-minor: a `CovFull` stores the `d x d`
//! pixel block of one sample pair contiguously, so pooled readouts reduce over
//! a contiguous run. `flatten` re-indexes to the `(|X| d) x (|X| d)` matrix
//! with row index `(x, alpha)` in sample-major order, which is the canonical
//! layout for eigenvalue checks and serialization.

use crate::error::{Error, Result};
use crate::linalg;

/// Spatial extent of one layer: a pixel line or a pixel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialShape {
    OneD(usize),
    TwoD(usize, usize),
}

impl SpatialShape {
    /// Total pixel count.
    pub fn len(&self) -> usize {
        match *self {
            SpatialShape::OneD(d) => d,
            SpatialShape::TwoD(h, w) => h * w,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rank(&self) -> usize {
        match self {
            SpatialShape::OneD(_) => 1,
            SpatialShape::TwoD(_, _) => 2,
        }
    }
}

impl std::fmt::Display for SpatialShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            SpatialShape::OneD(d) => write!(f, "{d}"),
            SpatialShape::TwoD(h, w) => write!(f, "{h}x{w}"),
        }
    }
}

/// Dense 4-index covariance tensor `[K]_{alpha,alpha'}(x, x')`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovFull {
    n_samples: usize,
    shape: SpatialShape,
    /// Layer tag `l` of the recursion this tensor belongs to.
    pub layer: usize,
    data: Vec<f64>,
}

impl CovFull {
    pub fn zeros(n_samples: usize, shape: SpatialShape, layer: usize) -> Self {
        let d = shape.len();
        CovFull {
            n_samples,
            shape,
            layer,
            data: vec![0.0; n_samples * n_samples * d * d],
        }
    }

    pub fn from_fn(
        n_samples: usize,
        shape: SpatialShape,
        layer: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut t = Self::zeros(n_samples, shape, layer);
        let d = shape.len();
        for x in 0..n_samples {
            for xp in 0..n_samples {
                for a in 0..d {
                    for ap in 0..d {
                        let v = f(x, xp, a, ap);
                        t.set(x, xp, a, ap, v);
                    }
                }
            }
        }
        t
    }

    #[inline]
    fn idx(&self, x: usize, xp: usize, a: usize, ap: usize) -> usize {
        let d = self.shape.len();
        ((x * self.n_samples + xp) * d + a) * d + ap
    }

    #[inline]
    pub fn get(&self, x: usize, xp: usize, a: usize, ap: usize) -> f64 {
        self.data[self.idx(x, xp, a, ap)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, xp: usize, a: usize, ap: usize, v: f64) {
        let i = self.idx(x, xp, a, ap);
        self.data[i] = v;
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn shape(&self) -> SpatialShape {
        self.shape
    }

    /// Pixel count `d`.
    pub fn d(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Contiguous `d x d` pixel block of one sample pair.
    pub fn pair_block(&self, x: usize, xp: usize) -> &[f64] {
        let d = self.shape.len();
        let start = (x * self.n_samples + xp) * d * d;
        &self.data[start..start + d * d]
    }

    /// Re-indexes to the `(|X| d) x (|X| d)` matrix with row `(x, alpha)`,
    /// sample-major. The result pairs with [`CovFull::from_flat`].
    pub fn flatten(&self) -> Vec<f64> {
        let n = self.n_samples;
        let d = self.shape.len();
        let m = n * d;
        let mut out = vec![0.0; m * m];
        for x in 0..n {
            for a in 0..d {
                for xp in 0..n {
                    for ap in 0..d {
                        out[(x * d + a) * m + (xp * d + ap)] = self.get(x, xp, a, ap);
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`CovFull::flatten`].
    pub fn from_flat(
        flat: &[f64],
        n_samples: usize,
        shape: SpatialShape,
        layer: usize,
    ) -> Result<Self> {
        let d = shape.len();
        let m = n_samples * d;
        if flat.len() != m * m {
            return Err(Error::ShapeMismatch(format!(
                "flat covariance has {} entries, expected {}",
                flat.len(),
                m * m
            )));
        }
        let mut t = Self::zeros(n_samples, shape, layer);
        for x in 0..n_samples {
            for a in 0..d {
                for xp in 0..n_samples {
                    for ap in 0..d {
                        t.set(x, xp, a, ap, flat[(x * d + a) * m + (xp * d + ap)]);
                    }
                }
            }
        }
        Ok(t)
    }

    /// Exact `alpha = alpha'` extraction.
    pub fn diag(&self) -> CovDiag {
        let n = self.n_samples;
        let d = self.shape.len();
        let mut out = CovDiag::zeros(n, self.shape, self.layer);
        for x in 0..n {
            for xp in 0..n {
                for a in 0..d {
                    out.set(x, xp, a, self.get(x, xp, a, a));
                }
            }
        }
        out
    }

    /// Largest deviation from the symmetry `K_{a,a'}(x,x') = K_{a',a}(x',x)`.
    pub fn symmetry_defect(&self) -> f64 {
        let n = self.n_samples;
        let d = self.shape.len();
        let mut worst = 0.0f64;
        for x in 0..n {
            for xp in 0..n {
                for a in 0..d {
                    for ap in 0..d {
                        worst = worst.max((self.get(x, xp, a, ap) - self.get(xp, x, ap, a)).abs());
                    }
                }
            }
        }
        worst
    }

    /// `(min eigenvalue, trace)` of the flattened matrix; the PSD contract is
    /// `min >= -1e-8 * trace`.
    pub fn min_eig_and_trace(&self) -> (f64, f64) {
        let m = self.n_samples * self.shape.len();
        let flat = self.flatten();
        let eig = linalg::symmetric_eigenvalues(&flat, m);
        let trace: f64 = (0..m).map(|i| flat[i * m + i]).sum();
        (eig[0], trace)
    }
}

/// Pixel-diagonal covariance track `[K]_{alpha,alpha}(x, x')`; sufficient for
/// vectorized and subsampled readouts at `O(|X|^2 d)` memory.
#[derive(Debug, Clone, PartialEq)]
pub struct CovDiag {
    n_samples: usize,
    shape: SpatialShape,
    pub layer: usize,
    data: Vec<f64>,
}

impl CovDiag {
    pub fn zeros(n_samples: usize, shape: SpatialShape, layer: usize) -> Self {
        CovDiag {
            n_samples,
            shape,
            layer,
            data: vec![0.0; n_samples * n_samples * shape.len()],
        }
    }

    #[inline]
    fn idx(&self, x: usize, xp: usize, a: usize) -> usize {
        (x * self.n_samples + xp) * self.shape.len() + a
    }

    #[inline]
    pub fn get(&self, x: usize, xp: usize, a: usize) -> f64 {
        self.data[self.idx(x, xp, a)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, xp: usize, a: usize, v: f64) {
        let i = self.idx(x, xp, a);
        self.data[i] = v;
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn shape(&self) -> SpatialShape {
        self.shape
    }

    pub fn d(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Contiguous diagonal run of one sample pair.
    pub fn pair_slice(&self, x: usize, xp: usize) -> &[f64] {
        let d = self.shape.len();
        let start = (x * self.n_samples + xp) * d;
        &self.data[start..start + d]
    }

    /// `(min eigenvalue, trace)` of the fixed-`alpha` sample-by-sample slice.
    pub fn min_eig_and_trace_at(&self, alpha: usize) -> (f64, f64) {
        let n = self.n_samples;
        let mut m = vec![0.0; n * n];
        for x in 0..n {
            for xp in 0..n {
                m[x * n + xp] = self.get(x, xp, alpha);
            }
        }
        let eig = linalg::symmetric_eigenvalues(&m, n);
        let trace: f64 = (0..n).map(|i| m[i * n + i]).sum();
        (eig[0], trace)
    }
}

/// Which readout produced a class kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadoutTag {
    Vectorize,
    Pool,
    SubsamplePixel(usize),
    Projection,
}

/// Sample-by-sample kernel fed to GP regression.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassKernel {
    n: usize,
    pub tag: ReadoutTag,
    data: Vec<f64>,
}

impl ClassKernel {
    pub fn zeros(n: usize, tag: ReadoutTag) -> Self {
        ClassKernel {
            n,
            tag,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_data(n: usize, tag: ReadoutTag, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::ShapeMismatch(format!(
                "class kernel has {} entries, expected {}",
                data.len(),
                n * n
            )));
        }
        Ok(ClassKernel { n, tag, data })
    }

    #[inline]
    pub fn get(&self, x: usize, xp: usize) -> f64 {
        self.data[x * self.n + xp]
    }

    #[inline]
    pub fn set(&mut self, x: usize, xp: usize, v: f64) {
        self.data[x * self.n + xp] = v;
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn symmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for x in 0..self.n {
            for xp in 0..self.n {
                worst = worst.max((self.get(x, xp) - self.get(xp, x)).abs());
            }
        }
        worst
    }

    pub fn min_eig_and_trace(&self) -> (f64, f64) {
        let eig = linalg::symmetric_eigenvalues(&self.data, self.n);
        let trace: f64 = (0..self.n).map(|i| self.get(i, i)).sum();
        (eig[0], trace)
    }
}
