//! Depth-`L` kernel recursion and readouts.
//!
//! [`propagate`] iterates convolution + nonlinearity on the input covariance,
//! materializing either the full tensor or its pixel-diagonal track. Readouts
//! push the trace through one further convolution layer and collapse pixels
//! into a sample-by-sample class kernel.
//!
//! [`class_kernel_streamed`] computes the same diagonal-track class kernel
//! without materializing any `|X|^2 d` tensor: sample pairs are independent
//! work units, so memory stays at `O(|X|^2 + |X| d L)`. The inner arithmetic
//! is shared with the materialized path and the results match bitwise.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::arch::{one_hot_index, ArchConfig, Connectivity, ReadoutKind};
use crate::error::{Error, Result};
use crate::input::InputSet;
use crate::ops::{
    conv_step_diag, conv_step_for, nonlin_step, nonlin_step_diag, phi_self_unchecked, post_op_step,
    post_op_step_diag, ConvStencil,
};
use crate::tensor::{ClassKernel, CovDiag, CovFull, ReadoutTag, SpatialShape};

/// Which covariance representation a trace carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Track {
    Full,
    Diag,
}

/// Requested track; `Auto` picks the cheapest representation the readout and
/// post-ops allow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackChoice {
    Auto,
    Full,
    Diag,
}

#[derive(Debug, Clone)]
pub struct PropagateOptions {
    pub track: TrackChoice,
    /// Keep per-layer tensors. Full-track snapshots cost `O(|X|^2 d^2)` per
    /// layer, so this is for tests and debugging.
    pub keep_snapshots: bool,
}

impl Default for PropagateOptions {
    fn default() -> Self {
        PropagateOptions {
            track: TrackChoice::Auto,
            keep_snapshots: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PropagationStats {
    pub elapsed: Duration,
    /// Tensor elements allocated while propagating; the diagonal track stays
    /// at `O(|X|^2 d)` per layer, the full track at `O(|X|^2 d^2)`.
    pub tensor_elems_allocated: u64,
}

/// Result of running the recursion to depth `L`.
#[derive(Debug, Clone)]
pub struct PropagationTrace {
    pub cfg: ArchConfig,
    pub track: Track,
    /// Spatial shape of every trace tensor, input included.
    pub layer_shapes: Vec<SpatialShape>,
    pub full: Option<CovFull>,
    pub diag: Option<CovDiag>,
    pub full_snapshots: Vec<CovFull>,
    pub diag_snapshots: Vec<CovDiag>,
    pub stats: PropagationStats,
}

/// Picks the track for a configuration; explicit `Diag` on a readout that
/// needs pixel-pixel covariances is a configuration error.
pub fn resolve_track(cfg: &ArchConfig, choice: TrackChoice) -> Result<Track> {
    let diag_ok = cfg.readout.diag_sufficient() && !cfg.has_mixing_post_op();
    match choice {
        TrackChoice::Full => Ok(Track::Full),
        TrackChoice::Diag => {
            if diag_ok {
                Ok(Track::Diag)
            } else {
                Err(Error::TrackUnavailable(
                    "readout or post-ops need pixel-pixel covariances; use the full track".into(),
                ))
            }
        }
        TrackChoice::Auto => Ok(if diag_ok { Track::Diag } else { Track::Full }),
    }
}

fn check_inputs(x: &InputSet, cfg: &ArchConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.connectivity == Connectivity::Fcn && x.shape().len() != 1 {
        return Err(Error::InvalidArch(
            "fcn connectivity needs single-pixel inputs; flatten the set first".into(),
        ));
    }
    Ok(())
}

/// Spatial shapes of layers `0 ..= depth + 1` (the last entry is the readout
/// convolution's output).
pub fn layer_shape_chain(cfg: &ArchConfig, input_shape: SpatialShape) -> Result<Vec<SpatialShape>> {
    let mut shapes = vec![input_shape];
    let mut s = input_shape;
    for l in 0..=cfg.depth {
        s = ConvStencil::new(cfg, s)?.out_shape;
        for op in cfg.post_ops_at(l) {
            s = op.matrix(s)?.1;
        }
        shapes.push(s);
    }
    Ok(shapes)
}

/// Runs the kernel recursion to layer `depth`.
pub fn propagate(
    x: &InputSet,
    cfg: &ArchConfig,
    opts: &PropagateOptions,
) -> Result<PropagationTrace> {
    check_inputs(x, cfg)?;
    let track = resolve_track(cfg, opts.track)?;
    let start = Instant::now();
    let mut stats = PropagationStats::default();
    let mut layer_shapes = Vec::with_capacity(cfg.depth + 1);

    let mut trace = PropagationTrace {
        cfg: cfg.clone(),
        track,
        layer_shapes: Vec::new(),
        full: None,
        diag: None,
        full_snapshots: Vec::new(),
        diag_snapshots: Vec::new(),
        stats: PropagationStats::default(),
    };

    match track {
        Track::Full => {
            let mut k = x.input_cov();
            stats.tensor_elems_allocated += k.data().len() as u64;
            layer_shapes.push(k.shape());
            if opts.keep_snapshots {
                trace.full_snapshots.push(k.clone());
            }
            for l in 0..cfg.depth {
                let mut a = conv_step_for(&k, cfg)?;
                stats.tensor_elems_allocated += a.data().len() as u64;
                for op in cfg.post_ops_at(l) {
                    a = post_op_step(&a, op)?;
                    stats.tensor_elems_allocated += a.data().len() as u64;
                }
                k = nonlin_step(&a, cfg.nonlinearity)?;
                stats.tensor_elems_allocated += k.data().len() as u64;
                layer_shapes.push(k.shape());
                if opts.keep_snapshots {
                    trace.full_snapshots.push(k.clone());
                }
            }
            trace.full = Some(k);
        }
        Track::Diag => {
            let mut k = x.input_cov_diag();
            stats.tensor_elems_allocated += k.data().len() as u64;
            layer_shapes.push(k.shape());
            if opts.keep_snapshots {
                trace.diag_snapshots.push(k.clone());
            }
            for l in 0..cfg.depth {
                let mut a = conv_step_diag(&k, cfg)?;
                stats.tensor_elems_allocated += a.data().len() as u64;
                for op in cfg.post_ops_at(l) {
                    a = post_op_step_diag(&a, op)?;
                    stats.tensor_elems_allocated += a.data().len() as u64;
                }
                k = nonlin_step_diag(&a, cfg.nonlinearity)?;
                stats.tensor_elems_allocated += k.data().len() as u64;
                layer_shapes.push(k.shape());
                if opts.keep_snapshots {
                    trace.diag_snapshots.push(k.clone());
                }
            }
            trace.diag = Some(k);
        }
    }

    stats.elapsed = start.elapsed();
    trace.layer_shapes = layer_shapes;
    trace.stats = stats;
    Ok(trace)
}

/// Readout convolution output `K^{L+1}` on the full tensor.
fn top_layer_full(trace: &PropagationTrace) -> Result<CovFull> {
    let k = trace.full.as_ref().ok_or_else(|| {
        Error::TrackUnavailable("readout needs pixel-pixel covariances; run the full track".into())
    })?;
    let a = conv_step_for(k, &trace.cfg)?;
    nonlin_step(&a, trace.cfg.nonlinearity)
}

/// Readout convolution output `K^{L+1}` on the pixel diagonal.
fn top_layer_diag(trace: &PropagationTrace) -> Result<CovDiag> {
    if let Some(kd) = &trace.diag {
        let a = conv_step_diag(kd, &trace.cfg)?;
        nonlin_step_diag(&a, trace.cfg.nonlinearity)
    } else {
        Ok(top_layer_full(trace)?.diag())
    }
}

/// `sigma_b^2 + (sigma_w^2 / d) * sum_alpha [K]_{alpha,alpha}` per sample pair.
pub fn contract_vectorize(top: &CovDiag, sigma_w2: f64, sigma_b2: f64) -> ClassKernel {
    let n = top.n_samples();
    let d = top.d();
    let factor = sigma_w2 / d as f64;
    let mut out = ClassKernel::zeros(n, ReadoutTag::Vectorize);
    for x in 0..n {
        for xp in 0..n {
            let mut sum = 0.0;
            for &v in top.pair_slice(x, xp) {
                sum += v;
            }
            out.set(x, xp, sigma_b2 + factor * sum);
        }
    }
    out
}

/// `sigma_b^2 + sigma_w^2 * [K]_{alpha,alpha}` per sample pair.
pub fn contract_subsample(
    top: &CovDiag,
    alpha: usize,
    sigma_w2: f64,
    sigma_b2: f64,
) -> Result<ClassKernel> {
    if alpha >= top.d() {
        return Err(Error::ShapeMismatch(format!(
            "subsample pixel {alpha} out of range for spatial size {}",
            top.d()
        )));
    }
    let n = top.n_samples();
    let mut out = ClassKernel::zeros(n, ReadoutTag::SubsamplePixel(alpha));
    for x in 0..n {
        for xp in 0..n {
            out.set(x, xp, sigma_b2 + sigma_w2 * top.get(x, xp, alpha));
        }
    }
    Ok(out)
}

/// `sigma_b^2 + sigma_w^2 * sum_{a,a'} h_a h_{a'} [K]_{a,a'}` per sample pair.
pub fn contract_project(
    top: &CovFull,
    h: &[f64],
    sigma_w2: f64,
    sigma_b2: f64,
    tag: ReadoutTag,
) -> Result<ClassKernel> {
    let d = top.d();
    if h.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "projection vector has {} weights for spatial size {d}",
            h.len()
        )));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArch(
            "projection weights must be finite".into(),
        ));
    }
    let n = top.n_samples();
    let mut out = ClassKernel::zeros(n, tag);
    for x in 0..n {
        for xp in 0..n {
            let block = top.pair_block(x, xp);
            let mut quad = 0.0;
            for a in 0..d {
                for ap in 0..d {
                    quad += h[a] * h[ap] * block[a * d + ap];
                }
            }
            out.set(x, xp, sigma_b2 + sigma_w2 * quad);
        }
    }
    Ok(out)
}

/// Vectorizing readout.
pub fn readout_vectorize(trace: &PropagationTrace) -> Result<ClassKernel> {
    let top = top_layer_diag(trace)?;
    Ok(contract_vectorize(
        &top,
        trace.cfg.top_sigma_w2(),
        trace.cfg.top_sigma_b2(),
    ))
}

/// Global-average-pooling readout; a projection with `h = (1/d) * 1`.
pub fn readout_pool(trace: &PropagationTrace) -> Result<ClassKernel> {
    let top = top_layer_full(trace)?;
    let d = top.d();
    let h = vec![1.0 / d as f64; d];
    contract_project(
        &top,
        &h,
        trace.cfg.top_sigma_w2(),
        trace.cfg.top_sigma_b2(),
        ReadoutTag::Pool,
    )
}

/// Single-pixel readout.
pub fn readout_subsample(trace: &PropagationTrace, alpha: usize) -> Result<ClassKernel> {
    let top = top_layer_diag(trace)?;
    contract_subsample(
        &top,
        alpha,
        trace.cfg.top_sigma_w2(),
        trace.cfg.top_sigma_b2(),
    )
}

/// Projection readout. One-hot projections delegate to the subsample path so
/// the two stay identical bitwise.
pub fn readout_project(trace: &PropagationTrace, h: &[f64]) -> Result<ClassKernel> {
    if let Some(alpha) = one_hot_index(h) {
        let mut out = readout_subsample(trace, alpha)?;
        out.tag = ReadoutTag::Projection;
        return Ok(out);
    }
    let top = top_layer_full(trace)?;
    contract_project(
        &top,
        h,
        trace.cfg.top_sigma_w2(),
        trace.cfg.top_sigma_b2(),
        ReadoutTag::Projection,
    )
}

/// Dispatch on the configured readout.
pub fn readout(trace: &PropagationTrace) -> Result<ClassKernel> {
    match &trace.cfg.readout.kind {
        ReadoutKind::Vectorize => readout_vectorize(trace),
        ReadoutKind::Pool => readout_pool(trace),
        ReadoutKind::SubsamplePixel { index } => readout_subsample(trace, *index),
        ReadoutKind::Projection { weights } => readout_project(trace, &weights.clone()),
    }
}

/// Pooled-readout kernel of a locally connected network, obtained from the
/// vectorized kernel by `(K - sigma_b^2) / d + sigma_b^2`.
pub fn lcn_pool_rescale(k_vec: &ClassKernel, d: usize, sigma_b2: f64) -> ClassKernel {
    let n = k_vec.n();
    let mut out = ClassKernel::zeros(n, ReadoutTag::Pool);
    for x in 0..n {
        for xp in 0..n {
            out.set(x, xp, (k_vec.get(x, xp) - sigma_b2) / d as f64 + sigma_b2);
        }
    }
    out
}

/// Per-layer machinery of the streamed diagonal pipeline.
struct DiagPipeline {
    stencils: Vec<ConvStencil>,
    /// Post-op pixel selections per layer (one-nonzero-per-row ops only).
    selections: Vec<Vec<Vec<usize>>>,
    nl: crate::arch::Nonlinearity,
}

impl DiagPipeline {
    fn new(cfg: &ArchConfig, input_shape: SpatialShape) -> Result<Self> {
        let mut stencils = Vec::with_capacity(cfg.depth + 1);
        let mut selections = Vec::with_capacity(cfg.depth + 1);
        let mut shape = input_shape;
        for l in 0..=cfg.depth {
            let stencil = ConvStencil::new(cfg, shape)?;
            shape = stencil.out_shape;
            let mut layer_sel = Vec::new();
            for op in cfg.post_ops_at(l) {
                let sel = op.selection(shape)?.ok_or_else(|| {
                    Error::TrackUnavailable(
                        "average pooling needs pixel-pixel covariances; run the full track".into(),
                    )
                })?;
                shape = op.matrix(shape)?.1;
                layer_sel.push(sel);
            }
            stencils.push(stencil);
            selections.push(layer_sel);
        }
        Ok(DiagPipeline {
            stencils,
            selections,
            nl: cfg.nonlinearity,
        })
    }

    /// Convolution + post-op selections of layer `l` on one pair vector; the
    /// same expressions as the materialized track, in the same order.
    fn conv(&self, cfg: &ArchConfig, l: usize, row: &[f64]) -> Vec<f64> {
        let stencil = &self.stencils[l];
        let d_out = stencil.out_shape.len();
        let mut a: Vec<f64> = (0..d_out)
            .map(|i| cfg.sigma_b2 + cfg.sigma_w2 * stencil.accumulate_diag(row, i))
            .collect();
        for sel in &self.selections[l] {
            a = sel.iter().map(|&i| a[i]).collect();
        }
        a
    }
}

fn checked_self_track(q: f64) -> Result<f64> {
    if q < -1e-12 {
        return Err(Error::NegativeVariance { value: q });
    }
    Ok(q.max(0.0))
}

/// Input covariance restricted to one sample pair, same channel-sum order as
/// [`InputSet::input_cov_diag`].
fn input_pair_diag(x: &InputSet, i: usize, j: usize) -> Vec<f64> {
    let d = x.shape().len();
    let inv = 1.0 / x.n_channels() as f64;
    (0..d)
        .map(|a| {
            let mut acc = 0.0;
            for c in 0..x.n_channels() {
                acc += x.pixel(i, c, a) * x.pixel(j, c, a);
            }
            inv * acc
        })
        .collect()
}

/// Streamed diagonal-track class kernel: propagates every sample pair
/// independently through all `depth + 1` convolutions and contracts, without
/// materializing any `O(|X|^2 d)` tensor. Matches the materialized diagonal
/// path bitwise.
pub fn class_kernel_streamed(x: &InputSet, cfg: &ArchConfig) -> Result<ClassKernel> {
    check_inputs(x, cfg)?;
    if !cfg.readout.diag_sufficient() || cfg.has_mixing_post_op() {
        return Err(Error::TrackUnavailable(
            "streamed pipeline covers diagonal-track readouts only".into(),
        ));
    }
    let pipeline = DiagPipeline::new(cfg, x.shape())?;
    let n = x.len();

    // Self tracks: validated pre-nonlinearity variances per layer, needed as
    // the diagonal moments of every cross pair.
    let mut self_pre: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = input_pair_diag(x, i, i);
        let mut per_layer = Vec::with_capacity(cfg.depth + 1);
        for l in 0..=cfg.depth {
            let a = pipeline.conv(cfg, l, &row);
            let validated: Vec<f64> = a
                .iter()
                .map(|&q| checked_self_track(q))
                .collect::<Result<_>>()?;
            row = validated
                .iter()
                .map(|&q| phi_self_unchecked(q, pipeline.nl))
                .collect();
            per_layer.push(validated);
        }
        self_pre.push(per_layer);
    }

    let sw2 = cfg.top_sigma_w2();
    let sb2 = cfg.top_sigma_b2();
    type ContractFn = Box<dyn Fn(&[f64]) -> f64 + Sync>;
    let (tag, contract): (ReadoutTag, ContractFn) = match &cfg.readout.kind {
        ReadoutKind::Vectorize => {
            let d_top = pipeline.stencils[cfg.depth].out_shape.len();
            let factor = sw2 / d_top as f64;
            (
                ReadoutTag::Vectorize,
                Box::new(move |row: &[f64]| {
                    let mut sum = 0.0;
                    for &v in row {
                        sum += v;
                    }
                    sb2 + factor * sum
                }),
            )
        }
        ReadoutKind::SubsamplePixel { index } => {
            let d_top = pipeline.stencils[cfg.depth].out_shape.len();
            if *index >= d_top {
                return Err(Error::ShapeMismatch(format!(
                    "subsample pixel {index} out of range for spatial size {d_top}"
                )));
            }
            let index = *index;
            (
                ReadoutTag::SubsamplePixel(index),
                Box::new(move |row: &[f64]| sb2 + sw2 * row[index]),
            )
        }
        ReadoutKind::Projection { weights } => {
            let index = one_hot_index(weights).ok_or_else(|| {
                Error::TrackUnavailable(
                    "streamed pipeline supports one-hot projections only".into(),
                )
            })?;
            (
                ReadoutTag::Projection,
                Box::new(move |row: &[f64]| sb2 + sw2 * row[index]),
            )
        }
        ReadoutKind::Pool => unreachable!("pool rejected above"),
    };

    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let entries: Vec<((usize, usize), f64)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let mut row = input_pair_diag(x, i, j);
            for l in 0..=cfg.depth {
                let a = pipeline.conv(cfg, l, &row);
                row = if i == j {
                    self_pre[i][l]
                        .iter()
                        .map(|&q| phi_self_unchecked(q, pipeline.nl))
                        .collect()
                } else {
                    a.iter()
                        .enumerate()
                        .map(|(p, &kxy)| {
                            crate::ops::BivariateMoment {
                                k_xx: self_pre[i][l][p],
                                k_xy: kxy,
                                k_yy: self_pre[j][l][p],
                            }
                            .phi_expectation(pipeline.nl)
                            .expect("self moments validated")
                        })
                        .collect()
                };
            }
            ((i, j), contract(&row))
        })
        .collect();

    let mut out = ClassKernel::zeros(n, tag);
    for ((i, j), v) in entries {
        out.set(i, j, v);
        out.set(j, i, v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{ArchConfig, Nonlinearity, Padding, ReadoutKind};
    use crate::ops::sigma_w2_for_q_star;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(n: usize, channels: usize, d: usize, seed: u64) -> InputSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|_| {
                (0..channels * d)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        InputSet::new(
            samples,
            (0..n as u64).collect(),
            channels,
            SpatialShape::OneD(d),
        )
        .unwrap()
    }

    #[test]
    fn depth_zero_trace_is_input_cov() {
        let x = random_inputs(3, 2, 4, 1);
        let cfg = ArchConfig::plain(0, 1, 1.0, 0.1, Nonlinearity::Relu);
        let trace = propagate(&x, &cfg, &PropagateOptions::default()).unwrap();
        assert_eq!(trace.layer_shapes.len(), 1);
        let diag = trace.diag.as_ref().unwrap();
        let want = x.input_cov_diag();
        assert_eq!(diag.data(), want.data());
    }

    #[test]
    fn preactivation_variances_pin_to_fixed_point() {
        // Inputs normalized so the first pre-activation variance equals the
        // fixed point q* = 1 keep every layer's pre-activation variance there.
        let sb2 = 0.1841;
        let sw2 = sigma_w2_for_q_star(1.0, sb2, Nonlinearity::Erf).unwrap();
        let mut cfg = ArchConfig::plain(6, 1, sw2, sb2, Nonlinearity::Erf);
        cfg.readout = crate::arch::ReadoutSpec::new(ReadoutKind::Vectorize);
        // Pixel self-variance must equal E[phi(u)^2] at q* so that
        // sigma_b2 + sigma_w2 * v0 = q*.
        let v0 = (1.0 - sb2) / sw2;
        let d = 5;
        let scale = v0.sqrt();
        let samples: Vec<Vec<f64>> = (0..3)
            .map(|s| {
                (0..d)
                    .map(|p| if (p + s) % 2 == 0 { scale } else { -scale })
                    .collect()
            })
            .collect();
        let x = InputSet::new(samples, vec![0, 1, 2], 1, SpatialShape::OneD(d)).unwrap();
        let opts = PropagateOptions {
            track: TrackChoice::Diag,
            keep_snapshots: true,
        };
        let trace = propagate(&x, &cfg, &opts).unwrap();
        for snap in &trace.diag_snapshots {
            for s in 0..3 {
                for a in 0..d {
                    let pre = sb2 + sw2 * snap.get(s, s, a);
                    assert!((pre - 1.0).abs() < 1e-6, "layer {} pre {pre}", snap.layer);
                }
            }
        }
    }

    #[test]
    fn cnn_and_lcn_share_the_pixel_diagonal() {
        let x = random_inputs(4, 1, 6, 5);
        let mut cnn = ArchConfig::plain(3, 1, 1.3, 0.2, Nonlinearity::Erf);
        let mut lcn = cnn.clone();
        lcn.connectivity = crate::arch::Connectivity::Lcn;
        cnn.readout = crate::arch::ReadoutSpec::new(ReadoutKind::Pool);
        lcn.readout = crate::arch::ReadoutSpec::new(ReadoutKind::Pool);
        let opts = PropagateOptions {
            track: TrackChoice::Full,
            keep_snapshots: true,
        };
        let t_cnn = propagate(&x, &cnn, &opts).unwrap();
        let t_lcn = propagate(&x, &lcn, &opts).unwrap();
        for (a, b) in t_cnn.full_snapshots.iter().zip(&t_lcn.full_snapshots) {
            let (da, db) = (a.diag(), b.diag());
            for (u, v) in da.data().iter().zip(db.data()) {
                assert!((u - v).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn diag_track_equals_full_track_diagonal_bitwise() {
        let x = random_inputs(3, 2, 5, 9);
        let mut cfg = ArchConfig::plain(3, 1, 1.1, 0.15, Nonlinearity::Relu);
        cfg.padding = Padding::Same;
        let full_opts = PropagateOptions {
            track: TrackChoice::Full,
            keep_snapshots: true,
        };
        let diag_opts = PropagateOptions {
            track: TrackChoice::Diag,
            keep_snapshots: true,
        };
        let tf = propagate(&x, &cfg, &full_opts).unwrap();
        let td = propagate(&x, &cfg, &diag_opts).unwrap();
        for (f, d) in tf.full_snapshots.iter().zip(&td.diag_snapshots) {
            let fd = f.diag();
            for (a, b) in fd.data().iter().zip(d.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn vectorize_single_pixel_is_affine_top_entry() {
        let x = random_inputs(3, 4, 1, 13);
        let mut cfg = ArchConfig::plain(2, 0, 1.4, 0.3, Nonlinearity::Erf);
        cfg.readout.sigma_w2 = Some(0.9);
        cfg.readout.sigma_b2 = Some(0.05);
        let trace = propagate(&x, &cfg, &PropagateOptions::default()).unwrap();
        let top = top_layer_diag(&trace).unwrap();
        let k = readout_vectorize(&trace).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(k.get(i, j), 0.05 + 0.9 * top.get(i, j, 0), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn pool_on_single_pixel_matches_vectorize() {
        let x = random_inputs(3, 4, 1, 17);
        let cfg = ArchConfig::plain(1, 0, 1.0, 0.1, Nonlinearity::Relu);
        let opts = PropagateOptions {
            track: TrackChoice::Full,
            keep_snapshots: false,
        };
        let trace = propagate(&x, &cfg, &opts).unwrap();
        let pool = readout_pool(&trace).unwrap();
        let vec = readout_vectorize(&trace).unwrap();
        for (a, b) in pool.data().iter().zip(vec.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn readout_consistency_project_vs_pool_and_subsample() {
        let x = random_inputs(4, 1, 5, 21);
        let mut cfg = ArchConfig::plain(2, 1, 1.2, 0.2, Nonlinearity::Relu);
        cfg.readout = crate::arch::ReadoutSpec::new(ReadoutKind::Pool);
        let opts = PropagateOptions {
            track: TrackChoice::Full,
            keep_snapshots: false,
        };
        let trace = propagate(&x, &cfg, &opts).unwrap();
        let d = 5;
        let pool = readout_pool(&trace).unwrap();
        let proj = readout_project(&trace, &vec![1.0 / d as f64; d]).unwrap();
        for (a, b) in pool.data().iter().zip(proj.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let sub = readout_subsample(&trace, 2).unwrap();
        let mut e2 = vec![0.0; d];
        e2[2] = 1.0;
        let proj_onehot = readout_project(&trace, &e2).unwrap();
        for (a, b) in sub.data().iter().zip(proj_onehot.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn vectorize_matches_brute_force_pixel_average() {
        // Direct-summation oracle: average the per-pixel subsample kernels.
        let x = random_inputs(4, 1, 6, 23);
        let cfg = ArchConfig::plain(3, 1, 1.1, 0.1, Nonlinearity::Erf);
        let opts = PropagateOptions {
            track: TrackChoice::Full,
            keep_snapshots: false,
        };
        let trace = propagate(&x, &cfg, &opts).unwrap();
        let vec_k = readout_vectorize(&trace).unwrap();
        let d = 6;
        let sw2 = trace.cfg.top_sigma_w2();
        let sb2 = trace.cfg.top_sigma_b2();
        let top = top_layer_full(&trace).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let avg: f64 = (0..d).map(|a| top.get(i, j, a, a)).sum::<f64>() / d as f64;
                assert_abs_diff_eq!(vec_k.get(i, j), sb2 + sw2 * avg, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn pool_matches_hand_double_sum() {
        let x = random_inputs(2, 1, 3, 27);
        let cfg =
            ArchConfig::plain(1, 1, 0.9, 0.2, Nonlinearity::Relu).with_readout(ReadoutKind::Pool);
        let opts = PropagateOptions {
            track: TrackChoice::Full,
            keep_snapshots: false,
        };
        let trace = propagate(&x, &cfg, &opts).unwrap();
        let pool = readout_pool(&trace).unwrap();
        let top = top_layer_full(&trace).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for a in 0..3 {
                    for ap in 0..3 {
                        s += top.get(i, j, a, ap);
                    }
                }
                let want = 0.2 + 0.9 / 9.0 * s;
                assert_abs_diff_eq!(pool.get(i, j), want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn projection_matches_explicit_contraction() {
        let x = random_inputs(3, 1, 4, 31);
        let cfg =
            ArchConfig::plain(2, 1, 1.0, 0.0, Nonlinearity::Relu).with_readout(ReadoutKind::Pool);
        let opts = PropagateOptions {
            track: TrackChoice::Full,
            keep_snapshots: false,
        };
        let trace = propagate(&x, &cfg, &opts).unwrap();
        let h = [0.3, -0.2, 0.5, 0.1];
        let proj = readout_project(&trace, &h).unwrap();
        let top = top_layer_full(&trace).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut quad = 0.0;
                for a in 0..4 {
                    for ap in 0..4 {
                        quad += h[a] * h[ap] * top.get(i, j, a, ap);
                    }
                }
                assert_abs_diff_eq!(proj.get(i, j), quad, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn streamed_pipeline_matches_materialized_bitwise() {
        let x = random_inputs(5, 2, 7, 37);
        for (readout_kind, padding) in [
            (ReadoutKind::Vectorize, Padding::Circular),
            (ReadoutKind::Vectorize, Padding::Same),
            (ReadoutKind::SubsamplePixel { index: 1 }, Padding::Circular),
            (ReadoutKind::Vectorize, Padding::Valid),
        ] {
            let mut cfg = ArchConfig::plain(2, 1, 1.25, 0.18, Nonlinearity::Erf);
            cfg.padding = padding;
            cfg.readout = crate::arch::ReadoutSpec::new(readout_kind);
            let opts = PropagateOptions {
                track: TrackChoice::Diag,
                keep_snapshots: false,
            };
            let trace = propagate(&x, &cfg, &opts).unwrap();
            let materialized = readout(&trace).unwrap();
            let streamed = class_kernel_streamed(&x, &cfg).unwrap();
            for (a, b) in materialized.data().iter().zip(streamed.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn streamed_pipeline_rejects_pool() {
        let x = random_inputs(2, 1, 4, 41);
        let cfg =
            ArchConfig::plain(1, 1, 1.0, 0.1, Nonlinearity::Relu).with_readout(ReadoutKind::Pool);
        assert!(matches!(
            class_kernel_streamed(&x, &cfg),
            Err(Error::TrackUnavailable(_))
        ));
    }

    #[test]
    fn track_resolution_and_memory_contract() {
        let x = random_inputs(4, 1, 8, 43);
        let vec_cfg = ArchConfig::plain(3, 1, 1.0, 0.1, Nonlinearity::Relu);
        let pool_cfg = vec_cfg.clone().with_readout(ReadoutKind::Pool);
        assert!(matches!(
            resolve_track(&pool_cfg, TrackChoice::Diag),
            Err(Error::TrackUnavailable(_))
        ));
        let td = propagate(&x, &vec_cfg, &PropagateOptions::default()).unwrap();
        assert_eq!(td.track, Track::Diag);
        let tf = propagate(&x, &pool_cfg, &PropagateOptions::default()).unwrap();
        assert_eq!(tf.track, Track::Full);
        // Allocation accounting: diag stays at O(|X|^2 d (2L+1)), full is d
        // times larger.
        let n = 4u64;
        let d = 8u64;
        let layers = 2 * 3 + 1;
        assert!(td.stats.tensor_elems_allocated <= n * n * d * layers);
        assert!(tf.stats.tensor_elems_allocated >= n * n * d * d * layers);
        assert_eq!(
            tf.stats.tensor_elems_allocated,
            td.stats.tensor_elems_allocated * d
        );
    }

    #[test]
    fn post_op_layers_change_shape_chain() {
        let mut cfg = ArchConfig::plain(2, 1, 1.0, 0.1, Nonlinearity::Relu);
        cfg.post_ops = vec![vec![crate::arch::LinearPostOp::Stride { s: 2 }]];
        let shapes = layer_shape_chain(&cfg, SpatialShape::OneD(8)).unwrap();
        assert_eq!(
            shapes,
            vec![
                SpatialShape::OneD(8),
                SpatialShape::OneD(4),
                SpatialShape::OneD(4),
                SpatialShape::OneD(4)
            ]
        );
        let x = random_inputs(2, 1, 8, 47);
        let trace = propagate(&x, &cfg, &PropagateOptions::default()).unwrap();
        assert_eq!(trace.layer_shapes, shapes[..3].to_vec());
    }

    #[test]
    fn lcn_pool_rescale_formula() {
        let mut k = ClassKernel::zeros(2, ReadoutTag::Vectorize);
        k.set(0, 0, 2.1);
        k.set(0, 1, 0.3);
        k.set(1, 0, 0.3);
        k.set(1, 1, 1.5);
        let r = lcn_pool_rescale(&k, 4, 0.1);
        assert_abs_diff_eq!(r.get(0, 0), (2.1 - 0.1) / 4.0 + 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(r.get(0, 1), (0.3 - 0.1) / 4.0 + 0.1, epsilon = 1e-15);
    }
}
