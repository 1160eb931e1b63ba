//! Kernel propagation operators.
//!
//! One convolution layer acts on a covariance tensor as an affine
//! cross-correlation ([`conv_step`]): each entry becomes
//! `sigma_b^2 + sigma_w^2 * sum_beta v_beta K_{a+beta, a'+beta}`. The
//! nonlinearity acts entrywise as a bivariate Gaussian expectation
//! ([`nonlin_step`]) with closed forms for `relu` and `erf`. Deterministic
//! linear pixel maps (stride, average pooling, subsampling) act by congruence
//! ([`post_op_step`]).
//!
//! Both operators exist for the full tensor and for the pixel-diagonal track.
//! The tap order inside the cross-correlation is fixed (ascending offset,
//! row-major for 2D) and the two tracks share the same inner expressions, so
//! the diagonal of the full-track result matches the diagonal track bitwise.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::arch::{ArchConfig, Connectivity, LinearPostOp, Nonlinearity, Padding};
use crate::error::{Error, Result};
use crate::tensor::{CovDiag, CovFull, SpatialShape};

/// Diagonal entries more negative than this signal an upstream PSD violation;
/// anything in `[-NEG_VARIANCE_TOL, 0)` is treated as an exact zero.
const NEG_VARIANCE_TOL: f64 = 1e-12;

/// Second moments of one bivariate Gaussian marginal of a covariance tensor:
/// the two self-variances and the cross term at a fixed pixel pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BivariateMoment {
    pub k_xx: f64,
    pub k_xy: f64,
    pub k_yy: f64,
}

impl BivariateMoment {
    /// Correlation clamped to `[-1, 1]`; round-off routinely lands a hair
    /// outside and the closed forms need the boundary handled continuously.
    pub fn correlation(&self) -> f64 {
        let denom = (self.k_xx * self.k_yy).sqrt();
        if denom == 0.0 {
            return 0.0;
        }
        (self.k_xy / denom).clamp(-1.0, 1.0)
    }

    pub fn angle(&self) -> f64 {
        self.correlation().acos()
    }

    /// `E[phi(u) phi(u')]` under `N(0, [[k_xx, k_xy], [k_xy, k_yy]])`.
    ///
    /// Degenerate marginals (zero variance) give 0 for both nonlinearities,
    /// since the point mass sits at the origin and `phi(0) = 0`.
    pub fn phi_expectation(&self, nl: Nonlinearity) -> Result<f64> {
        let qx = checked_variance(self.k_xx)?;
        let qy = checked_variance(self.k_yy)?;
        Ok(phi_pair_unchecked(qx, self.k_xy, qy, nl))
    }
}

fn checked_variance(q: f64) -> Result<f64> {
    if q < -NEG_VARIANCE_TOL {
        return Err(Error::NegativeVariance { value: q });
    }
    Ok(q.max(0.0))
}

/// Cross expectation for validated variances `qx, qy >= 0`.
#[inline]
fn phi_pair_unchecked(qx: f64, kxy: f64, qy: f64, nl: Nonlinearity) -> f64 {
    if qx == 0.0 || qy == 0.0 {
        return 0.0;
    }
    match nl {
        Nonlinearity::Relu => {
            let denom = (qx * qy).sqrt();
            let c = (kxy / denom).clamp(-1.0, 1.0);
            let theta = c.acos();
            denom / (2.0 * PI) * (theta.sin() + (PI - theta) * theta.cos())
        }
        Nonlinearity::Erf => {
            let arg = (2.0 * kxy / ((1.0 + 2.0 * qx) * (1.0 + 2.0 * qy)).sqrt()).clamp(-1.0, 1.0);
            2.0 / PI * arg.asin()
        }
    }
}

/// Self expectation `E[phi(u)^2]`, `u ~ N(0, q)`, for validated `q >= 0`.
///
/// Kept separate from the cross path so that diagonal entries evaluate
/// identically on the full and diagonal tracks (the cross path's
/// `sqrt(q * q)` differs from `q` by an ulp).
#[inline]
pub fn phi_self_unchecked(q: f64, nl: Nonlinearity) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    match nl {
        Nonlinearity::Relu => q * 0.5,
        Nonlinearity::Erf => 2.0 / PI * (2.0 * q / (1.0 + 2.0 * q)).asin(),
    }
}

/// `E[phi(u)^2]` with the variance validated first.
pub fn phi_self(q: f64, nl: Nonlinearity) -> Result<f64> {
    Ok(phi_self_unchecked(checked_variance(q)?, nl))
}

/// Tap table of one convolution layer: for every output pixel, the input
/// pixel hit by each filter offset (`None` reads as zero under same padding).
pub struct ConvStencil {
    pub in_shape: SpatialShape,
    pub out_shape: SpatialShape,
    /// Variance fraction per tap, ascending offset (row-major over 2D).
    pub weights: Vec<f64>,
    taps: Vec<Option<usize>>,
    n_taps: usize,
}

impl ConvStencil {
    pub fn new(cfg: &ArchConfig, in_shape: SpatialShape) -> Result<Self> {
        let k = cfg.filter_half_width as isize;
        let offsets: Vec<isize> = (-k..=k).collect();
        let map_axis = |dim: usize, pos: usize, off: isize| -> Option<usize> {
            match cfg.padding {
                Padding::Circular => Some((pos as isize + off).rem_euclid(dim as isize) as usize),
                Padding::Valid => Some((pos as isize + k + off) as usize),
                Padding::Same => {
                    let i = pos as isize + off;
                    (i >= 0 && i < dim as isize).then_some(i as usize)
                }
            }
        };
        let out_axis = |dim: usize| -> Result<usize> {
            match cfg.padding {
                Padding::Valid => {
                    if dim <= 2 * cfg.filter_half_width {
                        Err(Error::SpatialCollapse {
                            dim,
                            half_width: cfg.filter_half_width,
                        })
                    } else {
                        Ok(dim - 2 * cfg.filter_half_width)
                    }
                }
                _ => Ok(dim),
            }
        };
        match in_shape {
            SpatialShape::OneD(d) => {
                let out_d = out_axis(d)?;
                let n_taps = offsets.len();
                let mut taps = vec![None; out_d * n_taps];
                for a in 0..out_d {
                    for (t, &off) in offsets.iter().enumerate() {
                        taps[a * n_taps + t] = map_axis(d, a, off);
                    }
                }
                Ok(ConvStencil {
                    in_shape,
                    out_shape: SpatialShape::OneD(out_d),
                    weights: cfg.filter_weights.clone(),
                    taps,
                    n_taps,
                })
            }
            SpatialShape::TwoD(h, w) => {
                let out_h = out_axis(h)?;
                let out_w = out_axis(w)?;
                let n_taps = offsets.len() * offsets.len();
                let mut taps = vec![None; out_h * out_w * n_taps];
                let mut weights = Vec::with_capacity(n_taps);
                for &or in &offsets {
                    for &oc in &offsets {
                        weights.push(
                            cfg.filter_weights[(or + k) as usize]
                                * cfg.filter_weights[(oc + k) as usize],
                        );
                    }
                }
                for r in 0..out_h {
                    for c in 0..out_w {
                        let a = r * out_w + c;
                        let mut t = 0;
                        for &or in &offsets {
                            for &oc in &offsets {
                                let rr = map_axis(h, r, or);
                                let cc = map_axis(w, c, oc);
                                taps[a * n_taps + t] = match (rr, cc) {
                                    (Some(ri), Some(ci)) => Some(ri * w + ci),
                                    _ => None,
                                };
                                t += 1;
                            }
                        }
                    }
                }
                Ok(ConvStencil {
                    in_shape,
                    out_shape: SpatialShape::TwoD(out_h, out_w),
                    weights,
                    taps,
                    n_taps,
                })
            }
        }
    }

    #[inline]
    pub fn n_taps(&self) -> usize {
        self.n_taps
    }

    #[inline]
    pub fn tap(&self, out_pixel: usize, t: usize) -> Option<usize> {
        self.taps[out_pixel * self.n_taps + t]
    }

    /// Cross-correlation accumulator over one full pixel block, fixed
    /// ascending tap order.
    #[inline]
    fn accumulate_full(&self, block: &[f64], d_in: usize, a: usize, ap: usize) -> f64 {
        let mut acc = 0.0;
        for t in 0..self.n_taps {
            let kv = match (self.tap(a, t), self.tap(ap, t)) {
                (Some(i), Some(j)) => block[i * d_in + j],
                _ => 0.0,
            };
            acc += self.weights[t] * kv;
        }
        acc
    }

    /// Same accumulator restricted to the pixel diagonal; shares the tap
    /// order and expressions with the full-block accumulator, so the two
    /// tracks agree bitwise.
    #[inline]
    pub fn accumulate_diag(&self, diag: &[f64], a: usize) -> f64 {
        let mut acc = 0.0;
        for t in 0..self.n_taps {
            let kv = match self.tap(a, t) {
                Some(i) => diag[i],
                None => 0.0,
            };
            acc += self.weights[t] * kv;
        }
        acc
    }
}

#[inline]
fn affine(cfg: &ArchConfig, acc: f64) -> f64 {
    cfg.sigma_b2 + cfg.sigma_w2 * acc
}

/// One convolution layer on the full covariance tensor.
pub fn conv_step(k: &CovFull, cfg: &ArchConfig) -> Result<CovFull> {
    let stencil = ConvStencil::new(cfg, k.shape())?;
    let n = k.n_samples();
    let d_in = k.shape().len();
    let d_out = stencil.out_shape.len();
    let mut out = CovFull::zeros(n, stencil.out_shape, k.layer);
    out.data_mut()
        .par_chunks_mut(d_out * d_out)
        .enumerate()
        .for_each(|(pair, block_out)| {
            let (x, xp) = (pair / n, pair % n);
            let block_in = k.pair_block(x, xp);
            for a in 0..d_out {
                for ap in 0..d_out {
                    block_out[a * d_out + ap] =
                        affine(cfg, stencil.accumulate_full(block_in, d_in, a, ap));
                }
            }
        });
    Ok(out)
}

/// Locally connected variant: convolve, then zero every off-diagonal pixel
/// pair. The pixel-diagonal is untouched, and the flattened result is a
/// permuted block-diagonal of PSD sample blocks, hence PSD.
pub fn conv_step_lcn(k: &CovFull, cfg: &ArchConfig) -> Result<CovFull> {
    let mut out = conv_step(k, cfg)?;
    let n = out.n_samples();
    let d = out.d();
    for x in 0..n {
        for xp in 0..n {
            for a in 0..d {
                for ap in 0..d {
                    if a != ap {
                        out.set(x, xp, a, ap, 0.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// One convolution layer restricted to the pixel diagonal.
pub fn conv_step_diag(kd: &CovDiag, cfg: &ArchConfig) -> Result<CovDiag> {
    let stencil = ConvStencil::new(cfg, kd.shape())?;
    let n = kd.n_samples();
    let d_out = stencil.out_shape.len();
    let mut out = CovDiag::zeros(n, stencil.out_shape, kd.layer);
    out.data_mut()
        .par_chunks_mut(d_out)
        .enumerate()
        .for_each(|(pair, row_out)| {
            let (x, xp) = (pair / n, pair % n);
            let row_in = kd.pair_slice(x, xp);
            for (a, slot) in row_out.iter_mut().enumerate() {
                *slot = affine(cfg, stencil.accumulate_diag(row_in, a));
            }
        });
    Ok(out)
}

/// Pick the connectivity-appropriate convolution for the full track.
pub fn conv_step_for(k: &CovFull, cfg: &ArchConfig) -> Result<CovFull> {
    match cfg.connectivity {
        Connectivity::Lcn => conv_step_lcn(k, cfg),
        _ => conv_step(k, cfg),
    }
}

fn validated_self_moments_full(k: &CovFull) -> Result<Vec<f64>> {
    let n = k.n_samples();
    let d = k.d();
    let mut q = vec![0.0; n * d];
    for x in 0..n {
        for a in 0..d {
            q[x * d + a] = checked_variance(k.get(x, x, a, a))?;
        }
    }
    Ok(q)
}

fn validated_self_moments_diag(kd: &CovDiag) -> Result<Vec<f64>> {
    let n = kd.n_samples();
    let d = kd.d();
    let mut q = vec![0.0; n * d];
    for x in 0..n {
        for a in 0..d {
            q[x * d + a] = checked_variance(kd.get(x, x, a))?;
        }
    }
    Ok(q)
}

/// Entrywise nonlinearity map on the full tensor: every entry becomes the
/// bivariate expectation built from its two self-moments and the cross term.
pub fn nonlin_step(k: &CovFull, nl: Nonlinearity) -> Result<CovFull> {
    let q = validated_self_moments_full(k)?;
    let n = k.n_samples();
    let d = k.d();
    let mut out = CovFull::zeros(n, k.shape(), k.layer + 1);
    out.data_mut()
        .par_chunks_mut(d * d)
        .enumerate()
        .for_each(|(pair, block_out)| {
            let (x, xp) = (pair / n, pair % n);
            let block_in = k.pair_block(x, xp);
            for a in 0..d {
                for ap in 0..d {
                    block_out[a * d + ap] = if x == xp && a == ap {
                        phi_self_unchecked(q[x * d + a], nl)
                    } else {
                        phi_pair_unchecked(q[x * d + a], block_in[a * d + ap], q[xp * d + ap], nl)
                    };
                }
            }
        });
    Ok(out)
}

/// Entrywise nonlinearity map on the diagonal track.
pub fn nonlin_step_diag(kd: &CovDiag, nl: Nonlinearity) -> Result<CovDiag> {
    let q = validated_self_moments_diag(kd)?;
    let n = kd.n_samples();
    let d = kd.d();
    let mut out = CovDiag::zeros(n, kd.shape(), kd.layer + 1);
    out.data_mut()
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(pair, row_out)| {
            let (x, xp) = (pair / n, pair % n);
            let row_in = kd.pair_slice(x, xp);
            for (a, slot) in row_out.iter_mut().enumerate() {
                *slot = if x == xp {
                    phi_self_unchecked(q[x * d + a], nl)
                } else {
                    phi_pair_unchecked(q[x * d + a], row_in[a], q[xp * d + a], nl)
                };
            }
        });
    Ok(out)
}

/// Congruence action of a linear pixel operator: `K -> B K B^T` on both pixel
/// indices of every sample pair. PSD is preserved.
pub fn post_op_step(k: &CovFull, op: &LinearPostOp) -> Result<CovFull> {
    let (b, out_shape) = op.matrix(k.shape())?;
    let n = k.n_samples();
    let d1 = k.d();
    let d2 = out_shape.len();
    let mut out = CovFull::zeros(n, out_shape, k.layer);
    out.data_mut()
        .par_chunks_mut(d2 * d2)
        .enumerate()
        .for_each(|(pair, block_out)| {
            let (x, xp) = (pair / n, pair % n);
            let block_in = k.pair_block(x, xp);
            // tmp = B K, then out = tmp B^T
            let mut tmp = vec![0.0; d2 * d1];
            for a in 0..d2 {
                for j in 0..d1 {
                    let mut acc = 0.0;
                    for i in 0..d1 {
                        acc += b[a * d1 + i] * block_in[i * d1 + j];
                    }
                    tmp[a * d1 + j] = acc;
                }
            }
            for a in 0..d2 {
                for ap in 0..d2 {
                    let mut acc = 0.0;
                    for j in 0..d1 {
                        acc += tmp[a * d1 + j] * b[ap * d1 + j];
                    }
                    block_out[a * d2 + ap] = acc;
                }
            }
        });
    Ok(out)
}

/// Diagonal-track action of a one-nonzero-per-row pixel operator. Average
/// pooling mixes pixels and needs the full track.
pub fn post_op_step_diag(kd: &CovDiag, op: &LinearPostOp) -> Result<CovDiag> {
    let sel = op.selection(kd.shape())?.ok_or_else(|| {
        Error::TrackUnavailable(
            "average pooling needs pixel-pixel covariances; run the full track".into(),
        )
    })?;
    let (_, out_shape) = op.matrix(kd.shape())?;
    let n = kd.n_samples();
    let d2 = out_shape.len();
    let mut out = CovDiag::zeros(n, out_shape, kd.layer);
    for x in 0..n {
        for xp in 0..n {
            for a in 0..d2 {
                out.set(x, xp, a, kd.get(x, xp, sel[a]));
            }
        }
    }
    Ok(out)
}

/// Outcome of the pre-activation variance recursion
/// `q <- sigma_b^2 + sigma_w^2 E[phi(u)^2]`, `u ~ N(0, q)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FixedPointResult {
    Converged { q: f64, iterations: usize },
    Divergent,
}

impl FixedPointResult {
    pub fn q(&self) -> Option<f64> {
        match *self {
            FixedPointResult::Converged { q, .. } => Some(q),
            FixedPointResult::Divergent => None,
        }
    }
}

/// Damped fixed-point iteration for the pre-activation variance; damping 0.5,
/// cap 10^4 iterations, residual tolerance 1e-10. ReLU with
/// `sigma_w2 >= 2` (and positive bias variance) grows without bound and comes
/// back [`FixedPointResult::Divergent`].
pub fn preact_variance_fixed_point(
    sigma_w2: f64,
    sigma_b2: f64,
    nl: Nonlinearity,
) -> FixedPointResult {
    const DAMPING: f64 = 0.5;
    const MAX_ITER: usize = 10_000;
    const TOL: f64 = 1e-10;
    const DIVERGENCE_BOUND: f64 = 1e12;

    let mut q = 1.0f64;
    for it in 0..MAX_ITER {
        let f = sigma_b2 + sigma_w2 * phi_self_unchecked(q, nl);
        if !f.is_finite() || f.abs() > DIVERGENCE_BOUND {
            return FixedPointResult::Divergent;
        }
        if (f - q).abs() < TOL {
            return FixedPointResult::Converged { q, iterations: it };
        }
        q += DAMPING * (f - q);
    }
    FixedPointResult::Divergent
}

/// Inverse parameterization: the weight variance that makes `q_star` the
/// pre-activation variance fixed point for a given bias variance.
pub fn sigma_w2_for_q_star(q_star: f64, sigma_b2: f64, nl: Nonlinearity) -> Result<f64> {
    if !(q_star > 0.0) {
        return Err(Error::InvalidArch("q_star must be positive".into()));
    }
    if q_star <= sigma_b2 {
        return Err(Error::InvalidArch(format!(
            "q_star {q_star} must exceed sigma_b2 {sigma_b2}"
        )));
    }
    let t = phi_self_unchecked(q_star, nl);
    Ok((q_star - sigma_b2) / t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchConfig;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(n: usize, d: usize, seed: u64) -> CovFull {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = n * d;
        let rank = m + 2;
        let g: Vec<f64> = (0..m * rank).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut flat = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                flat[i * m + j] = (0..rank).map(|k| g[i * rank + k] * g[j * rank + k]).sum();
            }
        }
        CovFull::from_flat(&flat, n, SpatialShape::OneD(d), 0).unwrap()
    }

    #[test]
    fn conv_of_zero_kernel_is_bias() {
        let k = CovFull::zeros(2, SpatialShape::OneD(3), 0);
        let mut cfg = ArchConfig::plain(1, 1, 1.0, 0.1, Nonlinearity::Relu);
        cfg.sigma_b2 = 0.1;
        let out = conv_step(&k, &cfg).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.1));
    }

    #[test]
    fn fcn_degenerate_affine() {
        let mut k = CovFull::zeros(1, SpatialShape::OneD(1), 0);
        k.set(0, 0, 0, 0, 1.0);
        let cfg = ArchConfig::fcn(1, 2.0, 0.5, Nonlinearity::Relu);
        let out = conv_step(&k, &cfg).unwrap();
        assert_eq!(out.get(0, 0, 0, 0), 2.5);
    }

    #[test]
    fn circular_shifts_preserve_pixel_identity() {
        // Per-pixel identity kernel stays the identity under circular taps.
        let k = CovFull::from_fn(
            1,
            SpatialShape::OneD(3),
            0,
            |_, _, a, ap| {
                if a == ap {
                    1.0
                } else {
                    0.0
                }
            },
        );
        let cfg = ArchConfig::plain(1, 1, 1.0, 0.0, Nonlinearity::Relu);
        let out = conv_step(&k, &cfg).unwrap();
        for a in 0..3 {
            for ap in 0..3 {
                let want = if a == ap { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(out.get(0, 0, a, ap), want, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn valid_padding_shrinks_and_collapses() {
        let k = random_psd(1, 5, 3);
        let mut cfg = ArchConfig::plain(1, 2, 1.0, 0.0, Nonlinearity::Relu);
        cfg.padding = Padding::Valid;
        let out = conv_step(&k, &cfg).unwrap();
        assert_eq!(out.shape(), SpatialShape::OneD(1));
        // d = 2k collapses below one pixel
        let small = random_psd(1, 4, 4);
        assert!(matches!(
            conv_step(&small, &cfg),
            Err(Error::SpatialCollapse {
                dim: 4,
                half_width: 2
            })
        ));
    }

    #[test]
    fn nonuniform_weights_match_direct_summation() {
        // Independent oracle: re-derive the cross-correlation entry with
        // explicit wrap-around index arithmetic and the raw weight list.
        let k = random_psd(2, 5, 5);
        let mut cfg = ArchConfig::plain(1, 1, 1.2, 0.07, Nonlinearity::Relu);
        cfg.filter_weights = vec![0.5, 0.3, 0.2];
        cfg.validate().unwrap();
        let out = conv_step(&k, &cfg).unwrap();
        let d = 5i64;
        for x in 0..2 {
            for xp in 0..2 {
                for a in 0..5i64 {
                    for ap in 0..5i64 {
                        let mut acc = 0.0;
                        for (t, &v) in cfg.filter_weights.iter().enumerate() {
                            let beta = t as i64 - 1;
                            let ia = (a + beta).rem_euclid(d) as usize;
                            let iap = (ap + beta).rem_euclid(d) as usize;
                            acc += v * k.get(x, xp, ia, iap);
                        }
                        let want = 0.07 + 1.2 * acc;
                        assert_abs_diff_eq!(
                            out.get(x, xp, a as usize, ap as usize),
                            want,
                            epsilon = 1e-14
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn two_d_valid_padding_shrinks_each_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = 5 * 7;
        let g: Vec<f64> = (0..m * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut flat = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                flat[i * m + j] = (0..m).map(|t| g[i * m + t] * g[j * m + t]).sum();
            }
        }
        let k = CovFull::from_flat(&flat, 1, SpatialShape::TwoD(5, 7), 0).unwrap();
        let mut cfg = ArchConfig::plain(1, 2, 1.0, 0.0, Nonlinearity::Relu);
        cfg.padding = Padding::Valid;
        let out = conv_step(&k, &cfg).unwrap();
        assert_eq!(out.shape(), SpatialShape::TwoD(1, 3));
        // A 4-row grid collapses on the first axis.
        let small = CovFull::zeros(1, SpatialShape::TwoD(4, 7), 0);
        assert!(matches!(
            conv_step(&small, &cfg),
            Err(Error::SpatialCollapse {
                dim: 4,
                half_width: 2
            })
        ));
    }

    #[test]
    fn lcn_keeps_diagonal_and_zeroes_rest() {
        let k = random_psd(2, 4, 7);
        let cfg = ArchConfig::plain(1, 1, 1.3, 0.2, Nonlinearity::Relu);
        let cnn = conv_step(&k, &cfg).unwrap();
        let lcn = conv_step_lcn(&k, &cfg).unwrap();
        for x in 0..2 {
            for xp in 0..2 {
                for a in 0..4 {
                    for ap in 0..4 {
                        if a == ap {
                            assert_eq!(
                                lcn.get(x, xp, a, ap).to_bits(),
                                cnn.get(x, xp, a, ap).to_bits()
                            );
                        } else {
                            assert_eq!(lcn.get(x, xp, a, ap), 0.0);
                        }
                    }
                }
            }
        }
        let (min_eig, trace) = lcn.min_eig_and_trace();
        assert!(min_eig >= -1e-8 * trace);
    }

    #[test]
    fn diag_track_matches_full_bitwise_all_paddings() {
        for padding in [Padding::Circular, Padding::Same, Padding::Valid] {
            let k = random_psd(3, 8, 11);
            let mut cfg = ArchConfig::plain(1, 1, 0.9, 0.05, Nonlinearity::Relu);
            cfg.padding = padding;
            let full = conv_step(&k, &cfg).unwrap().diag();
            let diag = conv_step_diag(&k.diag(), &cfg).unwrap();
            assert_eq!(full.shape(), diag.shape());
            for (a, b) in full.data().iter().zip(diag.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn diag_conv_matches_zero_completed_full() {
        // Completing the off-diagonal with zeros does not change the diagonal
        // of the convolution output.
        let kd = random_psd(2, 8, 13).diag();
        let mut completed = CovFull::zeros(2, SpatialShape::OneD(8), 0);
        for x in 0..2 {
            for xp in 0..2 {
                for a in 0..8 {
                    completed.set(x, xp, a, a, kd.get(x, xp, a));
                }
            }
        }
        let cfg = ArchConfig::plain(1, 1, 1.1, 0.3, Nonlinearity::Relu);
        let via_full = conv_step(&completed, &cfg).unwrap().diag();
        let via_diag = conv_step_diag(&kd, &cfg).unwrap();
        for (a, b) in via_full.data().iter().zip(via_diag.data()) {
            assert!((a - b).abs() <= 1e-14);
        }
    }

    #[test]
    fn translation_equivariance_under_circular_padding() {
        // Shifting both pixel indices of one sample commutes with the
        // convolution, term for term.
        let n = 2;
        let d = 6;
        let k = random_psd(n, d, 17);
        let shift = 2usize;
        let shifted = CovFull::from_fn(n, SpatialShape::OneD(d), 0, |x, xp, a, ap| {
            let src_a = if x == 0 { (a + d - shift) % d } else { a };
            let src_ap = if xp == 0 { (ap + d - shift) % d } else { ap };
            k.get(x, xp, src_a, src_ap)
        });
        let cfg = ArchConfig::plain(1, 1, 1.0, 0.2, Nonlinearity::Relu);
        let conv_then_shift = {
            let c = conv_step(&k, &cfg).unwrap();
            CovFull::from_fn(n, SpatialShape::OneD(d), 0, |x, xp, a, ap| {
                let src_a = if x == 0 { (a + d - shift) % d } else { a };
                let src_ap = if xp == 0 { (ap + d - shift) % d } else { ap };
                c.get(x, xp, src_a, src_ap)
            })
        };
        let shift_then_conv = conv_step(&shifted, &cfg).unwrap();
        for (a, b) in shift_then_conv.data().iter().zip(conv_then_shift.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn moment_correlation_is_clamped() {
        // Round-off routinely lands the raw ratio just outside [-1, 1].
        let m = BivariateMoment {
            k_xx: 0.3,
            k_xy: 0.3 * (1.0 + 1e-15),
            k_yy: 0.3,
        };
        assert_eq!(m.correlation(), 1.0);
        assert_eq!(m.angle(), 0.0);
        let m = BivariateMoment {
            k_xx: 1.0,
            k_xy: -2.0,
            k_yy: 1.0,
        };
        assert_eq!(m.correlation(), -1.0);
        let m = BivariateMoment {
            k_xx: 0.0,
            k_xy: 0.0,
            k_yy: 1.0,
        };
        assert_eq!(m.correlation(), 0.0);
    }

    #[test]
    fn relu_closed_form_special_points() {
        // Full correlation: E[phi(u)^2] = q/2.
        let m = BivariateMoment {
            k_xx: 0.7,
            k_xy: 0.7,
            k_yy: 0.7,
        };
        assert_abs_diff_eq!(
            m.phi_expectation(Nonlinearity::Relu).unwrap(),
            0.35,
            epsilon = 1e-12
        );
        // Independent unit marginals: 1/(2 pi).
        let m = BivariateMoment {
            k_xx: 1.0,
            k_xy: 0.0,
            k_yy: 1.0,
        };
        assert_abs_diff_eq!(
            m.phi_expectation(Nonlinearity::Relu).unwrap(),
            0.15915494309189535,
            epsilon = 1e-12
        );
    }

    #[test]
    fn erf_closed_form_special_points() {
        // Odd nonlinearity with independent marginals vanishes.
        let m = BivariateMoment {
            k_xx: 2.0,
            k_xy: 0.0,
            k_yy: 0.5,
        };
        assert_eq!(m.phi_expectation(Nonlinearity::Erf).unwrap(), 0.0);
        // Unit self-moment: (2/pi) asin(2/3), checked against a Gaussian
        // sampling oracle in `phi_expectation_matches_gaussian_sampling`.
        assert_abs_diff_eq!(
            phi_self(1.0, Nonlinearity::Erf).unwrap(),
            0.46455905439753997,
            epsilon = 1e-12
        );
    }

    #[test]
    fn phi_expectation_matches_gaussian_sampling() {
        // Module-scale Monte Carlo oracle; the deeper 1e7-sample grid runs in
        // the acceptance suite.
        use rand_distr::StandardNormal;
        let cases: [(f64, f64, f64); 3] = [(0.5, 0.6, 1.5), (1.0, -0.8, 1.0), (4.0, 0.0, 0.1)];
        for nl in [Nonlinearity::Relu, Nonlinearity::Erf] {
            for &(qx, c, qy) in &cases {
                let kxy = c * (qx * qy).sqrt();
                let closed = BivariateMoment {
                    k_xx: qx,
                    k_xy: kxy,
                    k_yy: qy,
                }
                .phi_expectation(nl)
                .unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                let n = 1_000_000usize;
                let (mut sum, mut sum_sq) = (0.0f64, 0.0f64);
                for _ in 0..n {
                    let z1: f64 = rng.sample(StandardNormal);
                    let z2: f64 = rng.sample(StandardNormal);
                    let u = qx.sqrt() * z1;
                    let v = qy.sqrt() * (c * z1 + (1.0 - c * c).sqrt() * z2);
                    let p = match nl {
                        Nonlinearity::Relu => u.max(0.0) * v.max(0.0),
                        Nonlinearity::Erf => libm::erf(u) * libm::erf(v),
                    };
                    sum += p;
                    sum_sq += p * p;
                }
                let mean = sum / n as f64;
                let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
                assert!(
                    (closed - mean).abs() <= 4.0 * se.max(1e-9),
                    "{nl:?} qx={qx} c={c} qy={qy}: closed {closed} vs mc {mean} (se {se})"
                );
            }
        }
    }

    #[test]
    fn phi_expectation_monotone_in_cross_term() {
        for nl in [Nonlinearity::Relu, Nonlinearity::Erf] {
            for &(qx, qy) in &[(1.0f64, 1.0f64), (0.5, 2.0)] {
                let bound = (qx * qy).sqrt();
                let mut prev = f64::NEG_INFINITY;
                for i in 0..=40 {
                    let kxy = -bound + 2.0 * bound * (i as f64) / 40.0;
                    let v = BivariateMoment {
                        k_xx: qx,
                        k_xy: kxy,
                        k_yy: qy,
                    }
                    .phi_expectation(nl)
                    .unwrap();
                    assert!(v >= prev - 1e-15, "{nl:?} non-monotone at kxy={kxy}");
                    prev = v;
                }
            }
        }
    }

    #[test]
    fn nonlin_rejects_negative_variance() {
        let mut k = CovFull::zeros(1, SpatialShape::OneD(2), 0);
        k.set(0, 0, 0, 0, -1e-3);
        k.set(0, 0, 1, 1, 1.0);
        assert!(matches!(
            nonlin_step(&k, Nonlinearity::Relu),
            Err(Error::NegativeVariance { .. })
        ));
    }

    #[test]
    fn nonlin_zero_variance_row_maps_to_zero() {
        let mut k = CovFull::zeros(2, SpatialShape::OneD(1), 0);
        k.set(0, 0, 0, 0, 0.0);
        k.set(1, 1, 0, 0, 2.0);
        let out = nonlin_step(&k, Nonlinearity::Relu).unwrap();
        assert_eq!(out.get(0, 0, 0, 0), 0.0);
        assert_eq!(out.get(0, 1, 0, 0), 0.0);
        assert_eq!(out.get(1, 1, 0, 0), 1.0);
    }

    #[test]
    fn identity_post_op_is_noop() {
        let k = random_psd(2, 4, 23);
        let out = post_op_step(&k, &LinearPostOp::Stride { s: 1 }).unwrap();
        for (a, b) in out.data().iter().zip(k.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn global_avg_pool_post_op_is_block_mean() {
        let k = random_psd(2, 4, 29);
        let pooled = post_op_step(&k, &LinearPostOp::AvgPool { s: 1, ws: 4 }).unwrap();
        assert_eq!(pooled.shape(), SpatialShape::OneD(1));
        for x in 0..2 {
            for xp in 0..2 {
                let mean: f64 = (0..4)
                    .flat_map(|a| (0..4).map(move |ap| (a, ap)))
                    .map(|(a, ap)| k.get(x, xp, a, ap))
                    .sum::<f64>()
                    / 16.0;
                assert_abs_diff_eq!(pooled.get(x, xp, 0, 0), mean, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn stride_post_op_matches_explicit_matrix_product() {
        let k = random_psd(1, 4, 31);
        let out = post_op_step(&k, &LinearPostOp::Stride { s: 2 }).unwrap();
        // Independent oracle: hardcoded B = [[1,0,0,0],[0,0,1,0]].
        let b = [[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
        for a in 0..2 {
            for ap in 0..2 {
                let mut want = 0.0;
                for i in 0..4 {
                    for j in 0..4 {
                        want += b[a][i] * b[ap][j] * k.get(0, 0, i, j);
                    }
                }
                assert_abs_diff_eq!(out.get(0, 0, a, ap), want, epsilon = 1e-12);
            }
        }
        let picks: Vec<f64> = [(0, 0), (0, 2), (2, 0), (2, 2)]
            .iter()
            .map(|&(i, j)| k.get(0, 0, i, j))
            .collect();
        assert_eq!(out.pair_block(0, 0), &picks[..]);
    }

    #[test]
    fn post_ops_preserve_psd() {
        for (seed, op) in [
            (41u64, LinearPostOp::Stride { s: 2 }),
            (43, LinearPostOp::AvgPool { s: 2, ws: 2 }),
            (
                47,
                LinearPostOp::SubsampleSlice {
                    offsets: vec![0, 3],
                },
            ),
        ] {
            let k = random_psd(2, 4, seed);
            let out = post_op_step(&k, &op).unwrap();
            let (min_eig, trace) = out.min_eig_and_trace();
            assert!(min_eig >= -1e-8 * trace, "{op:?} broke PSD");
        }
    }

    #[test]
    fn diag_post_op_matches_full_for_selections() {
        let k = random_psd(2, 6, 53);
        let op = LinearPostOp::Stride { s: 2 };
        let full = post_op_step(&k, &op).unwrap().diag();
        let diag = post_op_step_diag(&k.diag(), &op).unwrap();
        for (a, b) in full.data().iter().zip(diag.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(matches!(
            post_op_step_diag(&k.diag(), &LinearPostOp::AvgPool { s: 1, ws: 2 }),
            Err(Error::TrackUnavailable(_))
        ));
    }

    #[test]
    fn ops_preserve_psd_batch() {
        let cfg = ArchConfig::plain(1, 1, 1.2, 0.1, Nonlinearity::Relu);
        for seed in 0..16 {
            let k = random_psd(2, 4, 100 + seed);
            for out in [
                conv_step(&k, &cfg).unwrap(),
                conv_step_lcn(&k, &cfg).unwrap(),
                nonlin_step(&k, Nonlinearity::Relu).unwrap(),
                nonlin_step(&k, Nonlinearity::Erf).unwrap(),
            ] {
                let (min_eig, trace) = out.min_eig_and_trace();
                assert!(min_eig >= -1e-8 * trace);
            }
        }
    }

    #[test]
    fn fixed_point_paper_parameterization() {
        match preact_variance_fixed_point(1.7562, 0.1841, Nonlinearity::Erf) {
            FixedPointResult::Converged { q, .. } => {
                assert!((q - 1.0).abs() < 1e-3, "q* = {q}");
            }
            FixedPointResult::Divergent => panic!("expected convergence"),
        }
    }

    #[test]
    fn fixed_point_degenerate_cases() {
        // Vanishing weights leave only the bias term.
        match preact_variance_fixed_point(1e-14, 0.37, Nonlinearity::Erf) {
            FixedPointResult::Converged { q, .. } => assert_abs_diff_eq!(q, 0.37, epsilon = 1e-9),
            _ => panic!("expected convergence"),
        }
        // Linear relu recursion q = 0.5 + q/2 has fixed point 1.
        match preact_variance_fixed_point(1.0, 0.5, Nonlinearity::Relu) {
            FixedPointResult::Converged { q, .. } => assert_abs_diff_eq!(q, 1.0, epsilon = 1e-9),
            _ => panic!("expected convergence"),
        }
        // Supercritical relu diverges.
        assert_eq!(
            preact_variance_fixed_point(3.0, 0.1, Nonlinearity::Relu),
            FixedPointResult::Divergent
        );
    }

    #[test]
    fn q_star_parameterization_round_trip() {
        for nl in [Nonlinearity::Relu, Nonlinearity::Erf] {
            let sb2 = 0.1841;
            let sw2 = sigma_w2_for_q_star(1.0, sb2, nl).unwrap();
            match preact_variance_fixed_point(sw2, sb2, nl) {
                FixedPointResult::Converged { q, .. } => {
                    assert!((q - 1.0).abs() < 1e-9, "{nl:?}: q = {q}");
                }
                _ => panic!("expected convergence"),
            }
        }
    }
}
