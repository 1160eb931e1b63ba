//! Monte Carlo kernel estimation from random finite-width networks.
//!
//! Each draw instantiates one network from the prior, runs every input
//! through it with a shared weight draw, and accumulates empirical uncentered
//! activation covariances: `K_{n,M} = (1/(M n)) sum_m sum_c y y`. The
//! effective sample size is `M n`, and the estimator variance falls like
//! `1/(M n)`.
//!
//! Draws are seeded stream-per-draw-index (ChaCha streams), so the estimate
//! is a pure function of `(inputs, config, n, M, seed)` no matter how work is
//! scheduled. Accumulation over draws is Kahan-compensated and channel
//! reductions are pairwise, keeping `O(M n)`-term sums accurate at 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::arch::{ArchConfig, Connectivity, Nonlinearity, ReadoutKind};
use crate::error::{Error, Result};
use crate::input::InputSet;
use crate::linalg::dot_pairwise;
use crate::ops::ConvStencil;
use crate::propagate::{contract_project, contract_subsample, contract_vectorize, Track};
use crate::tensor::{ClassKernel, CovDiag, CovFull, ReadoutTag, SpatialShape};

/// Activations of one sampled network, pixel-major within sample: the value
/// of channel `c` at pixel `p` of sample `s` sits at `(s * d + p) * n + c`.
#[derive(Debug, Clone)]
pub struct LayerActivations {
    pub data: Vec<f64>,
    pub n_channels: usize,
    pub shape: SpatialShape,
    pub n_samples: usize,
}

impl LayerActivations {
    /// Channel slice at one pixel of one sample.
    #[inline]
    pub fn channels(&self, sample: usize, pixel: usize) -> &[f64] {
        let n = self.n_channels;
        let start = (sample * self.shape.len() + pixel) * n;
        &self.data[start..start + n]
    }

    /// All channels of all pixels of one sample.
    #[inline]
    pub fn sample_slice(&self, sample: usize) -> &[f64] {
        let len = self.shape.len() * self.n_channels;
        &self.data[sample * len..(sample + 1) * len]
    }
}

/// Per-layer activations `y^0 ..= y^{depth+1}` of one draw.
#[derive(Debug, Clone)]
pub struct NetworkActivations {
    pub layers: Vec<LayerActivations>,
}

/// One convolution layer's sampled parameters. Weights are stored with their
/// prior scale baked in; locally connected layers hold independent weights
/// and biases per output pixel.
#[derive(Debug, Clone)]
pub struct ConvLayerParams {
    /// CNN: `[i][j][t]`; LCN: `[a][i][j][t]` (output pixel major).
    pub weights: Vec<f64>,
    /// CNN: `[i]`; LCN: `[a][i]`.
    pub biases: Vec<f64>,
    pub per_pixel: bool,
    pub n_in: usize,
    pub n_out: usize,
}

impl ConvLayerParams {
    /// Draws from the prior: `w ~ N(0, v_t sigma_w2 / n_in)`,
    /// `b ~ N(0, sigma_b2)`. The draw order is fixed, so a seeded stream
    /// reproduces the network exactly.
    pub fn draw(
        rng: &mut ChaCha8Rng,
        cfg: &ArchConfig,
        stencil: &ConvStencil,
        n_in: usize,
        n_out: usize,
    ) -> Self {
        let per_pixel = cfg.connectivity == Connectivity::Lcn;
        let taps = stencil.n_taps();
        let d_out = stencil.out_shape.len();
        let locations = if per_pixel { d_out } else { 1 };
        let w_scale: Vec<f64> = stencil
            .weights
            .iter()
            .map(|v| (v * cfg.sigma_w2 / n_in as f64).sqrt())
            .collect();
        let b_scale = cfg.sigma_b2.sqrt();
        let mut weights = Vec::with_capacity(locations * n_out * n_in * taps);
        let mut biases = Vec::with_capacity(locations * n_out);
        for _a in 0..locations {
            for _i in 0..n_out {
                for _j in 0..n_in {
                    for t in 0..taps {
                        let z: f64 = rng.sample(StandardNormal);
                        weights.push(w_scale[t] * z);
                    }
                }
            }
            for _i in 0..n_out {
                let z: f64 = rng.sample(StandardNormal);
                biases.push(b_scale * z);
            }
        }
        ConvLayerParams {
            weights,
            biases,
            per_pixel,
            n_in,
            n_out,
        }
    }
}

/// Pre-activations of one convolution layer:
/// `z_{i,a} = sum_j sum_t w_{ij,t} y_{j, tap(a,t)} + b_i`.
pub fn conv_layer_forward(
    acts: &LayerActivations,
    params: &ConvLayerParams,
    stencil: &ConvStencil,
) -> LayerActivations {
    let n_in = params.n_in;
    let n_out = params.n_out;
    let taps = stencil.n_taps();
    let d_out = stencil.out_shape.len();
    let n_samples = acts.n_samples;
    let mut out = vec![0.0; n_samples * d_out * n_out];
    out.par_chunks_mut(d_out * n_out)
        .enumerate()
        .for_each(|(s, sample_out)| {
            for a in 0..d_out {
                let loc = if params.per_pixel { a } else { 0 };
                let w_base = loc * n_out * n_in * taps;
                let b_base = loc * n_out;
                for i in 0..n_out {
                    let mut z = params.biases[b_base + i];
                    for t in 0..taps {
                        if let Some(p) = stencil.tap(a, t) {
                            let ys = acts.channels(s, p);
                            let w_row = w_base + (i * n_in) * taps + t;
                            let mut acc = 0.0;
                            for j in 0..n_in {
                                acc += params.weights[w_row + j * taps] * ys[j];
                            }
                            z += acc;
                        }
                    }
                    sample_out[a * n_out + i] = z;
                }
            }
        });
    LayerActivations {
        data: out,
        n_channels: n_out,
        shape: stencil.out_shape,
        n_samples,
    }
}

fn apply_nonlinearity(acts: &mut LayerActivations, nl: Nonlinearity) {
    match nl {
        Nonlinearity::Relu => acts.data.iter_mut().for_each(|v| *v = v.max(0.0)),
        Nonlinearity::Erf => acts.data.iter_mut().for_each(|v| *v = libm::erf(*v)),
    }
}

/// Deterministic pixel map `B` applied to every channel of every sample.
fn apply_post_op(acts: &LayerActivations, b: &[f64], out_shape: SpatialShape) -> LayerActivations {
    let d1 = acts.shape.len();
    let d2 = out_shape.len();
    let n = acts.n_channels;
    let mut out = vec![0.0; acts.n_samples * d2 * n];
    out.par_chunks_mut(d2 * n)
        .enumerate()
        .for_each(|(s, sample_out)| {
            for a in 0..d2 {
                for p in 0..d1 {
                    let w = b[a * d1 + p];
                    if w == 0.0 {
                        continue;
                    }
                    let src = acts.channels(s, p);
                    let dst = &mut sample_out[a * n..(a + 1) * n];
                    for c in 0..n {
                        dst[c] += w * src[c];
                    }
                }
            }
        });
    LayerActivations {
        data: out,
        n_channels: n,
        shape: out_shape,
        n_samples: acts.n_samples,
    }
}

fn input_activations(x: &InputSet) -> LayerActivations {
    let n0 = x.n_channels();
    let d = x.shape().len();
    let mut data = vec![0.0; x.len() * d * n0];
    for s in 0..x.len() {
        for p in 0..d {
            for c in 0..n0 {
                data[(s * d + p) * n0 + c] = x.pixel(s, c, p);
            }
        }
    }
    LayerActivations {
        data,
        n_channels: n0,
        shape: x.shape(),
        n_samples: x.len(),
    }
}

/// Runs every input through one random finite-width network (all samples
/// share the draw) and returns activations `y^0 ..= y^{depth+1}`.
pub fn forward_sample(
    x: &InputSet,
    cfg: &ArchConfig,
    n: usize,
    seed: u64,
    draw_index: u64,
) -> Result<NetworkActivations> {
    forward_sample_with_widths(x, cfg, &vec![n; cfg.depth + 1], seed, draw_index)
}

/// [`forward_sample`] with an explicit width per convolution layer.
pub fn forward_sample_with_widths(
    x: &InputSet,
    cfg: &ArchConfig,
    widths: &[usize],
    seed: u64,
    draw_index: u64,
) -> Result<NetworkActivations> {
    cfg.validate()?;
    if widths.len() != cfg.depth + 1 {
        return Err(Error::InvalidArch(format!(
            "{} widths for {} convolution layers",
            widths.len(),
            cfg.depth + 1
        )));
    }
    if widths.contains(&0) {
        return Err(Error::InvalidArch("channel counts must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw_index);
    let mut layers = vec![input_activations(x)];
    for l in 0..=cfg.depth {
        let prev = layers.last().unwrap();
        let stencil = ConvStencil::new(cfg, prev.shape)?;
        let params = ConvLayerParams::draw(&mut rng, cfg, &stencil, prev.n_channels, widths[l]);
        let mut z = conv_layer_forward(prev, &params, &stencil);
        for op in cfg.post_ops_at(l) {
            let (b, out_shape) = op.matrix(z.shape)?;
            z = apply_post_op(&z, &b, out_shape);
        }
        apply_nonlinearity(&mut z, cfg.nonlinearity);
        layers.push(z);
    }
    Ok(NetworkActivations { layers })
}

/// Monte Carlo estimate of the layer-`l` activation covariance.
#[derive(Debug, Clone)]
pub struct McKernelEstimate {
    pub full: Option<CovFull>,
    pub diag: Option<CovDiag>,
    pub n: usize,
    pub m: usize,
    pub target_layer: usize,
    pub seed: u64,
}

struct KahanAcc {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl KahanAcc {
    fn new(len: usize) -> Self {
        KahanAcc {
            sum: vec![0.0; len],
            comp: vec![0.0; len],
        }
    }

    /// Compensated elementwise add of one draw's contribution.
    fn add(&mut self, values: &[f64]) {
        self.sum
            .par_iter_mut()
            .zip(self.comp.par_iter_mut())
            .zip(values.par_iter())
            .for_each(|((s, c), &v)| {
                let y = v - *c;
                let t = *s + y;
                *c = (t - *s) - y;
                *s = t;
            });
    }
}

/// Estimates `K^l` with `M` draws of width `n`:
/// `(1/(M n_l)) sum_m sum_c y_{c,a}(x) y_{c,a'}(x')`, normalized by the
/// target layer's own channel count. Uncentered throughout. Deterministic
/// given the seed; the draw loop streams one network at a time.
pub fn mc_estimate(
    x: &InputSet,
    cfg: &ArchConfig,
    n: usize,
    m: usize,
    seed: u64,
    track: Track,
    target_layer: Option<usize>,
) -> Result<McKernelEstimate> {
    cfg.validate()?;
    if n == 0 || m == 0 {
        return Err(Error::InvalidArch("n and M must be >= 1".into()));
    }
    let target = target_layer.unwrap_or(cfg.depth + 1);
    if target > cfg.depth + 1 {
        return Err(Error::InvalidArch(format!(
            "target layer {target} exceeds depth + 1 = {}",
            cfg.depth + 1
        )));
    }
    let ns = x.len();
    let mut acc: Option<KahanAcc> = None;
    let mut shape = x.shape();
    let mut layer_channels = x.n_channels();
    for draw in 0..m {
        let acts = forward_sample(x, cfg, n, seed, draw as u64)?;
        let layer = &acts.layers[target];
        shape = layer.shape;
        layer_channels = layer.n_channels;
        let d = shape.len();
        let contribution: Vec<f64> = match track {
            Track::Full => {
                let mut c = vec![0.0; ns * ns * d * d];
                c.par_chunks_mut(d * d)
                    .enumerate()
                    .for_each(|(pair, block)| {
                        let (xi, xj) = (pair / ns, pair % ns);
                        for a in 0..d {
                            for ap in 0..d {
                                block[a * d + ap] =
                                    dot_pairwise(layer.channels(xi, a), layer.channels(xj, ap));
                            }
                        }
                    });
                c
            }
            Track::Diag => {
                let mut c = vec![0.0; ns * ns * d];
                c.par_chunks_mut(d).enumerate().for_each(|(pair, row)| {
                    let (xi, xj) = (pair / ns, pair % ns);
                    for a in 0..d {
                        row[a] = dot_pairwise(layer.channels(xi, a), layer.channels(xj, a));
                    }
                });
                c
            }
        };
        let acc = acc.get_or_insert_with(|| KahanAcc::new(contribution.len()));
        acc.add(&contribution);
    }
    let mut sum = acc.expect("m >= 1").sum;
    let scale = 1.0 / (m as f64 * layer_channels as f64);
    sum.iter_mut().for_each(|v| *v *= scale);
    let mut est = McKernelEstimate {
        full: None,
        diag: None,
        n,
        m,
        target_layer: target,
        seed,
    };
    match track {
        Track::Full => {
            let mut t = CovFull::zeros(ns, shape, target);
            t.data_mut().copy_from_slice(&sum);
            est.full = Some(t);
        }
        Track::Diag => {
            let mut t = CovDiag::zeros(ns, shape, target);
            t.data_mut().copy_from_slice(&sum);
            est.diag = Some(t);
        }
    }
    Ok(est)
}

/// Applies the configured readout contraction to an estimated top-layer
/// tensor (the same contraction the analytic readouts use).
pub fn mc_readout(est: &McKernelEstimate, cfg: &ArchConfig) -> Result<ClassKernel> {
    let sw2 = cfg.top_sigma_w2();
    let sb2 = cfg.top_sigma_b2();
    match &cfg.readout.kind {
        ReadoutKind::Vectorize => {
            let diag = match (&est.diag, &est.full) {
                (Some(d), _) => d.clone(),
                (None, Some(f)) => f.diag(),
                (None, None) => unreachable!("estimate holds one track"),
            };
            Ok(contract_vectorize(&diag, sw2, sb2))
        }
        ReadoutKind::SubsamplePixel { index } => {
            let diag = match (&est.diag, &est.full) {
                (Some(d), _) => d.clone(),
                (None, Some(f)) => f.diag(),
                (None, None) => unreachable!("estimate holds one track"),
            };
            contract_subsample(&diag, *index, sw2, sb2)
        }
        ReadoutKind::Pool => {
            let full = est.full.as_ref().ok_or_else(|| {
                Error::TrackUnavailable(
                    "pool readout needs a full-tensor estimate, not the diagonal track".into(),
                )
            })?;
            let d = full.d();
            let h = vec![1.0 / d as f64; d];
            contract_project(full, &h, sw2, sb2, ReadoutTag::Pool)
        }
        ReadoutKind::Projection { weights } => {
            let full = est.full.as_ref().ok_or_else(|| {
                Error::TrackUnavailable("projection readout needs a full-tensor estimate".into())
            })?;
            contract_project(full, weights, sw2, sb2, ReadoutTag::Projection)
        }
    }
}

/// Estimates the readout class kernel directly, contracting every draw as it
/// streams by. Algebraically identical to `mc_readout(mc_estimate(..))` but
/// needs only `O(|X|^2 + n d)` memory, which is what makes pooled kernels
/// practical at scale.
pub fn mc_estimate_class(
    x: &InputSet,
    cfg: &ArchConfig,
    n: usize,
    m: usize,
    seed: u64,
) -> Result<ClassKernel> {
    cfg.validate()?;
    if n == 0 || m == 0 {
        return Err(Error::InvalidArch("n and M must be >= 1".into()));
    }
    let ns = x.len();
    let mut acc = KahanAcc::new(ns * ns);
    let mut top_d = 0usize;
    for draw in 0..m {
        let acts = forward_sample(x, cfg, n, seed, draw as u64)?;
        let layer = &acts.layers[cfg.depth + 1];
        let d = layer.shape.len();
        top_d = d;
        let contribution: Vec<f64> = match &cfg.readout.kind {
            ReadoutKind::Vectorize => {
                // sum over pixels and channels of y(x) y(x') at matching
                // positions: a dot over the whole sample slice.
                let mut c = vec![0.0; ns * ns];
                c.par_iter_mut().enumerate().for_each(|(pair, slot)| {
                    let (xi, xj) = (pair / ns, pair % ns);
                    *slot = dot_pairwise(layer.sample_slice(xi), layer.sample_slice(xj));
                });
                c
            }
            ReadoutKind::SubsamplePixel { index } => {
                if *index >= d {
                    vec![f64::NAN; ns * ns]
                } else {
                    let mut c = vec![0.0; ns * ns];
                    c.par_iter_mut().enumerate().for_each(|(pair, slot)| {
                        let (xi, xj) = (pair / ns, pair % ns);
                        *slot =
                            dot_pairwise(layer.channels(xi, *index), layer.channels(xj, *index));
                    });
                    c
                }
            }
            ReadoutKind::Pool | ReadoutKind::Projection { .. } => {
                let h: Vec<f64> = match &cfg.readout.kind {
                    ReadoutKind::Pool => vec![1.0 / d as f64; d],
                    ReadoutKind::Projection { weights } => weights.clone(),
                    _ => unreachable!(),
                };
                if h.len() != d {
                    return Err(Error::ShapeMismatch(format!(
                        "projection vector has {} weights for spatial size {d}",
                        h.len()
                    )));
                }
                // Projected activations p[s][c] = sum_a h_a y_{c,a}(s).
                let mut projected = vec![0.0; ns * layer.n_channels];
                projected
                    .par_chunks_mut(layer.n_channels)
                    .enumerate()
                    .for_each(|(s, row)| {
                        for (a, &w) in h.iter().enumerate() {
                            if w == 0.0 {
                                continue;
                            }
                            for (c, &y) in layer.channels(s, a).iter().enumerate() {
                                row[c] += w * y;
                            }
                        }
                    });
                let nc = layer.n_channels;
                let mut c = vec![0.0; ns * ns];
                c.par_iter_mut().enumerate().for_each(|(pair, slot)| {
                    let (xi, xj) = (pair / ns, pair % ns);
                    *slot = dot_pairwise(
                        &projected[xi * nc..(xi + 1) * nc],
                        &projected[xj * nc..(xj + 1) * nc],
                    );
                });
                c
            }
        };
        if contribution.iter().any(|v| v.is_nan()) {
            return Err(Error::ShapeMismatch(
                "subsample pixel out of range for the top layer".into(),
            ));
        }
        acc.add(&contribution);
    }
    let sw2 = cfg.top_sigma_w2();
    let sb2 = cfg.top_sigma_b2();
    let scale = 1.0 / (m as f64 * n as f64);
    let (tag, factor) = match &cfg.readout.kind {
        ReadoutKind::Vectorize => (ReadoutTag::Vectorize, sw2 / top_d as f64),
        ReadoutKind::Pool => (ReadoutTag::Pool, sw2),
        ReadoutKind::SubsamplePixel { index } => (ReadoutTag::SubsamplePixel(*index), sw2),
        ReadoutKind::Projection { .. } => (ReadoutTag::Projection, sw2),
    };
    let data: Vec<f64> = acc
        .sum
        .iter()
        .map(|&s| sb2 + factor * (s * scale))
        .collect();
    ClassKernel::from_data(ns, tag, data)
}

/// Relative squared Frobenius distance `|est - ref|_F^2 / |ref|_F^2`.
pub fn kernel_distance(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "kernel distance over {} vs {} entries",
            est.len(),
            reference.len()
        )));
    }
    let diff_sq: Vec<f64> = est
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    let ref_sq: Vec<f64> = reference.iter().map(|b| b * b).collect();
    let denom = crate::linalg::pairwise_sum(&ref_sq);
    if denom == 0.0 {
        return Err(Error::InvalidInput(
            "reference kernel has zero Frobenius norm".into(),
        ));
    }
    Ok(crate::linalg::pairwise_sum(&diff_sq) / denom)
}

/// [`kernel_distance`] over class kernels.
pub fn class_kernel_distance(est: &ClassKernel, reference: &ClassKernel) -> Result<f64> {
    kernel_distance(est.data(), reference.data())
}
