//! Run configuration: an INI-style text format with `[section]` headers and
//! `key = value` lines, mirrored one-to-one by `--section.key=value` command
//! line overrides. Unknown keys are rejected; seeds are always explicit.

use std::fmt::Write as _;
use std::path::PathBuf;

use nngp_core::arch::{
    uniform_filter_weights, ArchConfig, Connectivity, LinearPostOp, Nonlinearity, Padding,
    ReadoutKind, ReadoutSpec,
};
use nngp_core::data::DownsampleMethod;
use nngp_core::ops::sigma_w2_for_q_star;
use nngp_core::phase::PhaseGrid;
use nngp_core::propagate::TrackChoice;
use nngp_core::regress::LadderSpec;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum WeightsSpec {
    Uniform,
    List(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSection {
    pub depth: usize,
    pub half_width: usize,
    pub weights: WeightsSpec,
    pub sigma_w2: Option<f64>,
    pub q_star: Option<f64>,
    pub sigma_b2: f64,
    pub nonlinearity: Nonlinearity,
    pub padding: Padding,
    pub connectivity: Connectivity,
    pub post_ops: Vec<Vec<LinearPostOp>>,
    pub readout_kind: String,
    pub readout_pixel: usize,
    pub readout_weights: Vec<f64>,
    pub readout_sigma_w2: Option<f64>,
    pub readout_sigma_b2: Option<f64>,
}

impl Default for ArchSection {
    fn default() -> Self {
        ArchSection {
            depth: 3,
            half_width: 1,
            weights: WeightsSpec::Uniform,
            sigma_w2: None,
            q_star: None,
            sigma_b2: 0.1841,
            nonlinearity: Nonlinearity::Erf,
            padding: Padding::Circular,
            connectivity: Connectivity::Cnn,
            post_ops: Vec::new(),
            readout_kind: "vectorize".into(),
            readout_pixel: 0,
            readout_weights: Vec::new(),
            readout_sigma_w2: None,
            readout_sigma_b2: None,
        }
    }
}

impl ArchSection {
    /// Resolves into a validated [`ArchConfig`]; exactly one of
    /// `arch.sigma_w2` and `arch.q_star` must be set.
    pub fn resolve(&self) -> Result<ArchConfig, CliError> {
        let nl = self.nonlinearity;
        let sigma_w2 = match (self.sigma_w2, self.q_star) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "set either arch.sigma_w2 or arch.q_star, not both".into(),
                ))
            }
            (Some(s), None) => s,
            (None, Some(q)) => sigma_w2_for_q_star(q, self.sigma_b2, nl)
                .map_err(|e| CliError::Config(e.to_string()))?,
            (None, None) => {
                return Err(CliError::Config("set arch.sigma_w2 or arch.q_star".into()))
            }
        };
        let filter_weights = match &self.weights {
            WeightsSpec::Uniform => uniform_filter_weights(self.half_width),
            WeightsSpec::List(v) => v.clone(),
        };
        let readout_kind = match self.readout_kind.as_str() {
            "vectorize" => ReadoutKind::Vectorize,
            "pool" => ReadoutKind::Pool,
            "subsample" => ReadoutKind::SubsamplePixel {
                index: self.readout_pixel,
            },
            "projection" => {
                if self.readout_weights.is_empty() {
                    return Err(CliError::Config(
                        "projection readout needs arch.readout.weights".into(),
                    ));
                }
                ReadoutKind::Projection {
                    weights: self.readout_weights.clone(),
                }
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown readout kind '{other}' (vectorize|pool|subsample|projection)"
                )))
            }
        };
        let cfg = ArchConfig {
            depth: self.depth,
            filter_half_width: self.half_width,
            filter_weights,
            sigma_w2,
            sigma_b2: self.sigma_b2,
            nonlinearity: nl,
            padding: self.padding,
            connectivity: self.connectivity,
            post_ops: self.post_ops.clone(),
            readout: ReadoutSpec {
                kind: readout_kind,
                sigma_w2: self.readout_sigma_w2,
                sigma_b2: self.readout_sigma_b2,
            },
        };
        cfg.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSection {
    pub source: String,
    pub cifar_paths: Vec<PathBuf>,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: Option<u64>,
    pub normalize: bool,
    pub downsample_height: usize,
    pub downsample_width: usize,
    pub downsample_method: DownsampleMethod,
    pub order: String,
    pub synth_kind: String,
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_channels: usize,
    pub synth_height: usize,
    pub synth_width: usize,
    pub synth_noise: f64,
    pub synth_bases: usize,
    pub synth_shifts: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: "synth".into(),
            cifar_paths: Vec::new(),
            idx_images: None,
            idx_labels: None,
            train_per_class: 0,
            test_per_class: 0,
            seed: None,
            normalize: true,
            downsample_height: 0,
            downsample_width: 0,
            downsample_method: DownsampleMethod::Bilinear,
            order: "downsample_first".into(),
            synth_kind: "blobs".into(),
            synth_classes: 2,
            synth_per_class: 8,
            synth_channels: 1,
            synth_height: 1,
            synth_width: 8,
            synth_noise: 0.5,
            synth_bases: 2,
            synth_shifts: 8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct McSection {
    pub n: usize,
    pub m: usize,
    pub seed: Option<u64>,
    pub target_layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressSection {
    pub noise: f64,
    pub ladder_start_exp: i32,
    pub ladder_stop_exp: i32,
    pub ladder_scale: bool,
}

impl Default for RegressSection {
    fn default() -> Self {
        RegressSection {
            noise: 0.0,
            ladder_start_exp: -10,
            ladder_stop_exp: 5,
            ladder_scale: false,
        }
    }
}

impl RegressSection {
    pub fn ladder(&self) -> LadderSpec {
        LadderSpec {
            start_exp: self.ladder_start_exp,
            stop_exp: self.ladder_stop_exp,
            scale_by_diag_mean: self.ladder_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSection {
    pub w2_min: f64,
    pub w2_max: f64,
    pub w2_steps: usize,
    pub b2_min: f64,
    pub b2_max: f64,
    pub b2_steps: usize,
    pub depth: usize,
    pub nonlinearity: Nonlinearity,
}

impl Default for PhaseSection {
    fn default() -> Self {
        PhaseSection {
            w2_min: 0.1,
            w2_max: 5.0,
            w2_steps: 50,
            b2_min: 0.0,
            b2_max: 2.0,
            b2_steps: 50,
            depth: 1000,
            nonlinearity: Nonlinearity::Erf,
        }
    }
}

impl PhaseSection {
    pub fn grid(&self) -> Result<PhaseGrid, CliError> {
        PhaseGrid::uniform(
            (self.w2_min, self.w2_max),
            self.w2_steps,
            (self.b2_min, self.b2_max),
            self.b2_steps,
        )
        .map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub threads: usize,
    pub track: TrackChoice,
    pub payload: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            threads: 0,
            track: TrackChoice::Auto,
            payload: "class_kernel".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub arch: ArchSection,
    pub dataset: DatasetSection,
    pub mc: McSection,
    pub regress: RegressSection,
    pub phase: PhaseSection,
    pub run: RunSection,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("cannot parse '{value}' for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(CliError::Config(format!(
            "cannot parse '{value}' as bool for key {key}"
        ))),
    }
}

fn parse_f64_list(key: &str, value: &str) -> Result<Vec<f64>, CliError> {
    value
        .split(',')
        .map(|s| parse::<f64>(key, s.trim()))
        .collect()
}

/// Post-op schedule syntax: semicolon-separated `layer:op` entries, e.g.
/// `0:stride(2); 1:avg_pool(2,2); 2:subsample(0,3,5)`.
fn parse_post_ops(value: &str) -> Result<Vec<Vec<LinearPostOp>>, CliError> {
    let mut per_layer: Vec<Vec<LinearPostOp>> = Vec::new();
    if value.trim().is_empty() {
        return Ok(per_layer);
    }
    for entry in value.split(';') {
        let entry = entry.trim();
        if entry.is_empty() {
            continue;
        }
        let (layer_s, op_s) = entry
            .split_once(':')
            .ok_or_else(|| CliError::Config(format!("post-op '{entry}' lacks a layer prefix")))?;
        let layer: usize = parse("arch.post_ops", layer_s.trim())?;
        let op_s = op_s.trim();
        let (name, args) = match op_s.split_once('(') {
            Some((n, rest)) => {
                let args = rest.strip_suffix(')').ok_or_else(|| {
                    CliError::Config(format!("post-op '{op_s}' misses a closing paren"))
                })?;
                (n.trim(), args.trim())
            }
            None => (op_s, ""),
        };
        let nums: Vec<usize> = if args.is_empty() {
            Vec::new()
        } else {
            args.split(',')
                .map(|a| parse::<usize>("arch.post_ops", a.trim()))
                .collect::<Result<_, _>>()?
        };
        let op = match (name, nums.as_slice()) {
            ("stride", [s]) => LinearPostOp::Stride { s: *s },
            ("avg_pool", [s, ws]) => LinearPostOp::AvgPool { s: *s, ws: *ws },
            ("subsample", offsets) if !offsets.is_empty() => LinearPostOp::SubsampleSlice {
                offsets: offsets.to_vec(),
            },
            _ => {
                return Err(CliError::Config(format!(
                    "unknown post-op '{op_s}' (stride(s)|avg_pool(s,ws)|subsample(i,..))"
                )))
            }
        };
        if per_layer.len() <= layer {
            per_layer.resize(layer + 1, Vec::new());
        }
        per_layer[layer].push(op);
    }
    Ok(per_layer)
}

fn render_post_ops(ops: &[Vec<LinearPostOp>]) -> String {
    let mut parts = Vec::new();
    for (layer, layer_ops) in ops.iter().enumerate() {
        for op in layer_ops {
            let s = match op {
                LinearPostOp::Stride { s } => format!("{layer}:stride({s})"),
                LinearPostOp::AvgPool { s, ws } => format!("{layer}:avg_pool({s},{ws})"),
                LinearPostOp::SubsampleSlice { offsets } => {
                    let list: Vec<String> = offsets.iter().map(|o| o.to_string()).collect();
                    format!("{layer}:subsample({})", list.join(","))
                }
            };
            parts.push(s);
        }
    }
    parts.join("; ")
}

fn nonlinearity_of(key: &str, value: &str) -> Result<Nonlinearity, CliError> {
    match value {
        "relu" => Ok(Nonlinearity::Relu),
        "erf" => Ok(Nonlinearity::Erf),
        _ => Err(CliError::Config(format!(
            "unknown nonlinearity '{value}' for {key}"
        ))),
    }
}

impl RunConfig {
    /// Applies one `section.key = value` assignment; unknown keys fail.
    pub fn set(&mut self, dotted_key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        let (section, key) = dotted_key
            .split_once('.')
            .ok_or_else(|| CliError::Config(format!("key '{dotted_key}' lacks a section")))?;
        match (section, key) {
            ("arch", "depth") => self.arch.depth = parse(dotted_key, value)?,
            ("arch", "half_width") => self.arch.half_width = parse(dotted_key, value)?,
            ("arch", "weights") => {
                self.arch.weights = if value == "uniform" {
                    WeightsSpec::Uniform
                } else {
                    WeightsSpec::List(parse_f64_list(dotted_key, value)?)
                }
            }
            ("arch", "sigma_w2") => self.arch.sigma_w2 = Some(parse(dotted_key, value)?),
            ("arch", "q_star") => self.arch.q_star = Some(parse(dotted_key, value)?),
            ("arch", "sigma_b2") => self.arch.sigma_b2 = parse(dotted_key, value)?,
            ("arch", "nonlinearity") => {
                self.arch.nonlinearity = nonlinearity_of(dotted_key, value)?
            }
            ("arch", "padding") => {
                self.arch.padding = match value {
                    "circular" => Padding::Circular,
                    "valid" => Padding::Valid,
                    "same" => Padding::Same,
                    _ => {
                        return Err(CliError::Config(format!(
                            "unknown padding '{value}' (circular|valid|same)"
                        )))
                    }
                }
            }
            ("arch", "connectivity") => {
                self.arch.connectivity = match value {
                    "cnn" => Connectivity::Cnn,
                    "lcn" => Connectivity::Lcn,
                    "fcn" => Connectivity::Fcn,
                    _ => {
                        return Err(CliError::Config(format!(
                            "unknown connectivity '{value}' (cnn|lcn|fcn)"
                        )))
                    }
                }
            }
            ("arch", "post_ops") => self.arch.post_ops = parse_post_ops(value)?,
            ("arch", "readout") => self.arch.readout_kind = value.to_string(),
            ("arch", "readout.pixel") => self.arch.readout_pixel = parse(dotted_key, value)?,
            ("arch", "readout.weights") => {
                self.arch.readout_weights = parse_f64_list(dotted_key, value)?
            }
            ("arch", "readout.sigma_w2") => {
                self.arch.readout_sigma_w2 = Some(parse(dotted_key, value)?)
            }
            ("arch", "readout.sigma_b2") => {
                self.arch.readout_sigma_b2 = Some(parse(dotted_key, value)?)
            }
            ("dataset", "source") => self.dataset.source = value.to_string(),
            ("dataset", "cifar.paths") => {
                self.dataset.cifar_paths =
                    value.split(';').map(|p| PathBuf::from(p.trim())).collect()
            }
            ("dataset", "idx.images") => self.dataset.idx_images = Some(PathBuf::from(value)),
            ("dataset", "idx.labels") => self.dataset.idx_labels = Some(PathBuf::from(value)),
            ("dataset", "train_per_class") => {
                self.dataset.train_per_class = parse(dotted_key, value)?
            }
            ("dataset", "test_per_class") => {
                self.dataset.test_per_class = parse(dotted_key, value)?
            }
            ("dataset", "seed") => self.dataset.seed = Some(parse(dotted_key, value)?),
            ("dataset", "normalize") => self.dataset.normalize = parse_bool(dotted_key, value)?,
            ("dataset", "downsample.height") => {
                self.dataset.downsample_height = parse(dotted_key, value)?
            }
            ("dataset", "downsample.width") => {
                self.dataset.downsample_width = parse(dotted_key, value)?
            }
            ("dataset", "downsample.method") => {
                self.dataset.downsample_method = match value {
                    "bilinear" => DownsampleMethod::Bilinear,
                    "nearest" => DownsampleMethod::Nearest,
                    _ => {
                        return Err(CliError::Config(format!(
                            "unknown downsample method '{value}' (bilinear|nearest)"
                        )))
                    }
                }
            }
            ("dataset", "order") => match value {
                "downsample_first" | "normalize_first" => self.dataset.order = value.to_string(),
                _ => {
                    return Err(CliError::Config(format!(
                        "unknown order '{value}' (downsample_first|normalize_first)"
                    )))
                }
            },
            ("dataset", "synth.kind") => self.dataset.synth_kind = value.to_string(),
            ("dataset", "synth.classes") => self.dataset.synth_classes = parse(dotted_key, value)?,
            ("dataset", "synth.per_class") => {
                self.dataset.synth_per_class = parse(dotted_key, value)?
            }
            ("dataset", "synth.channels") => {
                self.dataset.synth_channels = parse(dotted_key, value)?
            }
            ("dataset", "synth.height") => self.dataset.synth_height = parse(dotted_key, value)?,
            ("dataset", "synth.width") => self.dataset.synth_width = parse(dotted_key, value)?,
            ("dataset", "synth.noise") => self.dataset.synth_noise = parse(dotted_key, value)?,
            ("dataset", "synth.bases") => self.dataset.synth_bases = parse(dotted_key, value)?,
            ("dataset", "synth.shifts") => self.dataset.synth_shifts = parse(dotted_key, value)?,
            ("mc", "n") => self.mc.n = parse(dotted_key, value)?,
            ("mc", "m") => self.mc.m = parse(dotted_key, value)?,
            ("mc", "seed") => self.mc.seed = Some(parse(dotted_key, value)?),
            ("mc", "target_layer") => self.mc.target_layer = Some(parse(dotted_key, value)?),
            ("regress", "noise") => self.regress.noise = parse(dotted_key, value)?,
            ("regress", "ladder.start_exp") => {
                self.regress.ladder_start_exp = parse(dotted_key, value)?
            }
            ("regress", "ladder.stop_exp") => {
                self.regress.ladder_stop_exp = parse(dotted_key, value)?
            }
            ("regress", "ladder.scale_by_diag_mean") => {
                self.regress.ladder_scale = parse_bool(dotted_key, value)?
            }
            ("phase", "w2_min") => self.phase.w2_min = parse(dotted_key, value)?,
            ("phase", "w2_max") => self.phase.w2_max = parse(dotted_key, value)?,
            ("phase", "w2_steps") => self.phase.w2_steps = parse(dotted_key, value)?,
            ("phase", "b2_min") => self.phase.b2_min = parse(dotted_key, value)?,
            ("phase", "b2_max") => self.phase.b2_max = parse(dotted_key, value)?,
            ("phase", "b2_steps") => self.phase.b2_steps = parse(dotted_key, value)?,
            ("phase", "depth") => self.phase.depth = parse(dotted_key, value)?,
            ("phase", "nonlinearity") => {
                self.phase.nonlinearity = nonlinearity_of(dotted_key, value)?
            }
            ("run", "threads") => self.run.threads = parse(dotted_key, value)?,
            ("run", "track") => {
                self.run.track = match value {
                    "auto" => TrackChoice::Auto,
                    "diag" => TrackChoice::Diag,
                    "full" => TrackChoice::Full,
                    _ => {
                        return Err(CliError::Config(format!(
                            "unknown track '{value}' (auto|diag|full)"
                        )))
                    }
                }
            }
            ("run", "payload") => match value {
                "class_kernel" | "cov_full" | "cov_diag" => self.run.payload = value.to_string(),
                _ => {
                    return Err(CliError::Config(format!(
                        "unknown payload '{value}' (class_kernel|cov_full|cov_diag)"
                    )))
                }
            },
            _ => {
                return Err(CliError::Config(format!(
                    "unknown config key '{dotted_key}'"
                )))
            }
        }
        Ok(())
    }

    /// Parses the INI-style config text.
    pub fn parse_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !matches!(
                    section.as_str(),
                    "arch" | "dataset" | "mc" | "regress" | "phase" | "run"
                ) {
                    return Err(CliError::Config(format!(
                        "line {}: unknown section [{section}]",
                        lineno + 1
                    )));
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            if section.is_empty() {
                return Err(CliError::Config(format!(
                    "line {}: key before any [section]",
                    lineno + 1
                )));
            }
            cfg.set(&format!("{section}.{}", key.trim()), value.trim())?;
        }
        Ok(cfg)
    }

    /// Canonical rendering; parsing it back reproduces the config.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let a = &self.arch;
        writeln!(s, "[arch]").unwrap();
        writeln!(s, "depth = {}", a.depth).unwrap();
        writeln!(s, "half_width = {}", a.half_width).unwrap();
        match &a.weights {
            WeightsSpec::Uniform => writeln!(s, "weights = uniform").unwrap(),
            WeightsSpec::List(v) => {
                let list: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
                writeln!(s, "weights = {}", list.join(",")).unwrap();
            }
        }
        if let Some(v) = a.sigma_w2 {
            writeln!(s, "sigma_w2 = {v}").unwrap();
        }
        if let Some(v) = a.q_star {
            writeln!(s, "q_star = {v}").unwrap();
        }
        writeln!(s, "sigma_b2 = {}", a.sigma_b2).unwrap();
        writeln!(s, "nonlinearity = {}", render_nl(a.nonlinearity)).unwrap();
        writeln!(
            s,
            "padding = {}",
            match a.padding {
                Padding::Circular => "circular",
                Padding::Valid => "valid",
                Padding::Same => "same",
            }
        )
        .unwrap();
        writeln!(
            s,
            "connectivity = {}",
            match a.connectivity {
                Connectivity::Cnn => "cnn",
                Connectivity::Lcn => "lcn",
                Connectivity::Fcn => "fcn",
            }
        )
        .unwrap();
        if !a.post_ops.is_empty() {
            writeln!(s, "post_ops = {}", render_post_ops(&a.post_ops)).unwrap();
        }
        writeln!(s, "readout = {}", a.readout_kind).unwrap();
        writeln!(s, "readout.pixel = {}", a.readout_pixel).unwrap();
        if !a.readout_weights.is_empty() {
            let list: Vec<String> = a.readout_weights.iter().map(|x| format!("{x}")).collect();
            writeln!(s, "readout.weights = {}", list.join(",")).unwrap();
        }
        if let Some(v) = a.readout_sigma_w2 {
            writeln!(s, "readout.sigma_w2 = {v}").unwrap();
        }
        if let Some(v) = a.readout_sigma_b2 {
            writeln!(s, "readout.sigma_b2 = {v}").unwrap();
        }

        let d = &self.dataset;
        writeln!(s, "\n[dataset]").unwrap();
        writeln!(s, "source = {}", d.source).unwrap();
        if !d.cifar_paths.is_empty() {
            let list: Vec<String> = d
                .cifar_paths
                .iter()
                .map(|p| p.display().to_string())
                .collect();
            writeln!(s, "cifar.paths = {}", list.join(";")).unwrap();
        }
        if let Some(p) = &d.idx_images {
            writeln!(s, "idx.images = {}", p.display()).unwrap();
        }
        if let Some(p) = &d.idx_labels {
            writeln!(s, "idx.labels = {}", p.display()).unwrap();
        }
        writeln!(s, "train_per_class = {}", d.train_per_class).unwrap();
        writeln!(s, "test_per_class = {}", d.test_per_class).unwrap();
        if let Some(seed) = d.seed {
            writeln!(s, "seed = {seed}").unwrap();
        }
        writeln!(s, "normalize = {}", d.normalize).unwrap();
        writeln!(s, "downsample.height = {}", d.downsample_height).unwrap();
        writeln!(s, "downsample.width = {}", d.downsample_width).unwrap();
        writeln!(
            s,
            "downsample.method = {}",
            match d.downsample_method {
                DownsampleMethod::Bilinear => "bilinear",
                DownsampleMethod::Nearest => "nearest",
            }
        )
        .unwrap();
        writeln!(s, "order = {}", d.order).unwrap();
        writeln!(s, "synth.kind = {}", d.synth_kind).unwrap();
        writeln!(s, "synth.classes = {}", d.synth_classes).unwrap();
        writeln!(s, "synth.per_class = {}", d.synth_per_class).unwrap();
        writeln!(s, "synth.channels = {}", d.synth_channels).unwrap();
        writeln!(s, "synth.height = {}", d.synth_height).unwrap();
        writeln!(s, "synth.width = {}", d.synth_width).unwrap();
        writeln!(s, "synth.noise = {}", d.synth_noise).unwrap();
        writeln!(s, "synth.bases = {}", d.synth_bases).unwrap();
        writeln!(s, "synth.shifts = {}", d.synth_shifts).unwrap();

        writeln!(s, "\n[mc]").unwrap();
        writeln!(s, "n = {}", self.mc.n).unwrap();
        writeln!(s, "m = {}", self.mc.m).unwrap();
        if let Some(seed) = self.mc.seed {
            writeln!(s, "seed = {seed}").unwrap();
        }
        if let Some(t) = self.mc.target_layer {
            writeln!(s, "target_layer = {t}").unwrap();
        }

        writeln!(s, "\n[regress]").unwrap();
        writeln!(s, "noise = {}", self.regress.noise).unwrap();
        writeln!(s, "ladder.start_exp = {}", self.regress.ladder_start_exp).unwrap();
        writeln!(s, "ladder.stop_exp = {}", self.regress.ladder_stop_exp).unwrap();
        writeln!(
            s,
            "ladder.scale_by_diag_mean = {}",
            self.regress.ladder_scale
        )
        .unwrap();

        let p = &self.phase;
        writeln!(s, "\n[phase]").unwrap();
        writeln!(s, "w2_min = {}", p.w2_min).unwrap();
        writeln!(s, "w2_max = {}", p.w2_max).unwrap();
        writeln!(s, "w2_steps = {}", p.w2_steps).unwrap();
        writeln!(s, "b2_min = {}", p.b2_min).unwrap();
        writeln!(s, "b2_max = {}", p.b2_max).unwrap();
        writeln!(s, "b2_steps = {}", p.b2_steps).unwrap();
        writeln!(s, "depth = {}", p.depth).unwrap();
        writeln!(s, "nonlinearity = {}", render_nl(p.nonlinearity)).unwrap();

        writeln!(s, "\n[run]").unwrap();
        writeln!(s, "threads = {}", self.run.threads).unwrap();
        writeln!(
            s,
            "track = {}",
            match self.run.track {
                TrackChoice::Auto => "auto",
                TrackChoice::Diag => "diag",
                TrackChoice::Full => "full",
            }
        )
        .unwrap();
        writeln!(s, "payload = {}", self.run.payload).unwrap();
        s
    }
}

fn render_nl(nl: Nonlinearity) -> &'static str {
    match nl {
        Nonlinearity::Relu => "relu",
        Nonlinearity::Erf => "erf",
    }
}
