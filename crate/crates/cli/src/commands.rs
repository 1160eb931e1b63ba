//! Subcommand implementations. Every command is a pure function of its
//! configuration (seeds included), so identical configs produce identical
//! bytes on disk and identical reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nngp_core::data::{
    balanced_subset, downsample, load_cifar_binary, load_idx, normalize, synth_dataset, write_idx,
    RawDataset, SynthSpec,
};
use nngp_core::input::InputSet;
use nngp_core::mc::{mc_estimate, mc_estimate_class};
use nngp_core::phase::phase_scan;
use nngp_core::propagate::{
    class_kernel_streamed, propagate, readout, resolve_track, PropagateOptions, Track, TrackChoice,
};
use nngp_core::regress::{accuracy, solve_with_ladder, RegressionProblem};
use nngp_core::tensor::ClassKernel;
use nngp_core::Connectivity;

use crate::config::RunConfig;
use crate::kernel_file::{arch_digest, KernelFile};
use crate::CliError;

/// Joint sample set in train-then-test order, with labels and the split.
pub struct AssembledData {
    pub inputs: InputSet,
    pub labels: Vec<usize>,
    pub n_train: usize,
}

fn build_raw(cfg: &RunConfig) -> Result<RawDataset, CliError> {
    let d = &cfg.dataset;
    match d.source.as_str() {
        "cifar" => {
            if d.cifar_paths.is_empty() {
                return Err(CliError::Config("dataset.cifar.paths is empty".into()));
            }
            Ok(load_cifar_binary(&d.cifar_paths)?)
        }
        "idx" => {
            let images = d
                .idx_images
                .as_ref()
                .ok_or_else(|| CliError::Config("dataset.idx.images not set".into()))?;
            let labels = d
                .idx_labels
                .as_ref()
                .ok_or_else(|| CliError::Config("dataset.idx.labels not set".into()))?;
            Ok(load_idx(images, labels)?)
        }
        "synth" => {
            let seed = d.seed.ok_or_else(|| {
                CliError::Config("dataset.seed must be explicit for synth".into())
            })?;
            let spec = match d.synth_kind.as_str() {
                "blobs" => SynthSpec::Blobs {
                    classes: d.synth_classes,
                    per_class: d.synth_per_class,
                    channels: d.synth_channels,
                    height: d.synth_height,
                    width: d.synth_width,
                    noise: d.synth_noise,
                },
                "shift_family" => SynthSpec::ShiftFamily {
                    bases: d.synth_bases,
                    shifts: d.synth_shifts,
                    channels: d.synth_channels,
                    width: d.synth_width,
                },
                other => {
                    return Err(CliError::Config(format!(
                        "unknown synth kind '{other}' (blobs|shift_family)"
                    )))
                }
            };
            Ok(synth_dataset(&spec, seed)?)
        }
        other => Err(CliError::Config(format!(
            "unknown dataset source '{other}'"
        ))),
    }
}

/// Balanced disjoint train/test split, reordered train-first.
fn split_balanced(
    raw: &RawDataset,
    train_pc: usize,
    test_pc: usize,
    seed: u64,
) -> Result<(RawDataset, usize), CliError> {
    let subset = balanced_subset(raw, train_pc + test_pc, seed)?;
    // balanced_subset groups picks class by class: the first train_pc of
    // every class group go to the train block.
    let per = train_pc + test_pc;
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in 0..subset.n_classes {
        let start = class * per;
        train_idx.extend(start..start + train_pc);
        test_idx.extend(start + train_pc..start + per);
    }
    let order: Vec<usize> = train_idx.iter().chain(test_idx.iter()).copied().collect();
    let ds = RawDataset {
        images: order.iter().map(|&i| subset.images[i].clone()).collect(),
        labels: order.iter().map(|&i| subset.labels[i]).collect(),
        n_classes: subset.n_classes,
        channels: subset.channels,
        height: subset.height,
        width: subset.width,
    };
    Ok((ds, train_idx.len()))
}

/// Loads, subsets, downsamples, and normalizes per configuration.
pub fn assemble_dataset(cfg: &RunConfig) -> Result<AssembledData, CliError> {
    let d = &cfg.dataset;
    let raw = build_raw(cfg)?;
    let (ds, n_train) = if d.train_per_class + d.test_per_class > 0 {
        let seed = d.seed.ok_or_else(|| {
            CliError::Config("dataset.seed must be explicit for subsetting".into())
        })?;
        split_balanced(&raw, d.train_per_class, d.test_per_class, seed)?
    } else {
        let n = raw.len();
        (raw, n)
    };
    let want_downsample = d.downsample_height > 0 || d.downsample_width > 0;
    let do_downsample = |ds: &RawDataset| -> Result<RawDataset, CliError> {
        let h = if d.downsample_height > 0 {
            d.downsample_height
        } else {
            ds.height
        };
        let w = if d.downsample_width > 0 {
            d.downsample_width
        } else {
            ds.width
        };
        Ok(downsample(ds, h, w, d.downsample_method)?)
    };
    let inputs = match (want_downsample, d.normalize, d.order.as_str()) {
        (true, true, "normalize_first") => {
            let normalized = normalize(&ds)?;
            let as_raw = RawDataset {
                images: (0..normalized.len())
                    .map(|i| normalized.sample(i).to_vec())
                    .collect(),
                labels: ds.labels.clone(),
                n_classes: ds.n_classes,
                channels: ds.channels,
                height: ds.height,
                width: ds.width,
            };
            do_downsample(&as_raw)?.to_input_set()?
        }
        (true, true, _) => normalize(&do_downsample(&ds)?)?,
        (true, false, _) => do_downsample(&ds)?.to_input_set()?,
        (false, true, _) => normalize(&ds)?,
        (false, false, _) => ds.to_input_set()?,
    };
    let labels = ds.labels.clone();
    Ok(AssembledData {
        inputs,
        labels,
        n_train,
    })
}

fn class_kernel_for(cfg: &RunConfig, data: &AssembledData) -> Result<ClassKernel, CliError> {
    let arch = cfg.arch.resolve()?;
    let inputs = if arch.connectivity == Connectivity::Fcn {
        data.inputs.flatten_to_single_pixel()
    } else {
        data.inputs.clone()
    };
    let track = resolve_track(&arch, cfg.run.track)?;
    let kernel = match track {
        Track::Diag => class_kernel_streamed(&inputs, &arch)?,
        Track::Full => {
            let opts = PropagateOptions {
                track: TrackChoice::Full,
                keep_snapshots: false,
            };
            readout(&propagate(&inputs, &arch, &opts)?)?
        }
    };
    Ok(kernel)
}

fn write_sidecar(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let sidecar = PathBuf::from(format!("{}.config.txt", out.display()));
    fs::write(&sidecar, cfg.render()).map_err(|e| CliError::Io(e.to_string()))
}

fn base_metadata(command: &str, data: &AssembledData) -> String {
    format!(
        "command={command}\nsamples={}\ntrain={}\ntest={}\n",
        data.inputs.len(),
        data.n_train,
        data.inputs.len() - data.n_train,
    )
}

/// `kernel`: exact propagation to a kernel file.
pub fn cmd_kernel(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let data = assemble_dataset(cfg)?;
    let arch = cfg.arch.resolve()?;
    let digest = arch_digest(&arch);
    let meta = base_metadata("kernel", &data) + &format!("payload={}\n", cfg.run.payload);
    let file = match cfg.run.payload.as_str() {
        "class_kernel" => {
            let kernel = class_kernel_for(cfg, &data)?;
            KernelFile::from_class_kernel(&kernel, digest, meta)
        }
        "cov_full" => {
            let inputs = if arch.connectivity == Connectivity::Fcn {
                data.inputs.flatten_to_single_pixel()
            } else {
                data.inputs.clone()
            };
            let opts = PropagateOptions {
                track: TrackChoice::Full,
                keep_snapshots: false,
            };
            let trace = propagate(&inputs, &arch, &opts)?;
            KernelFile::from_cov_full(trace.full.as_ref().unwrap(), digest, meta)
        }
        "cov_diag" => {
            let inputs = if arch.connectivity == Connectivity::Fcn {
                data.inputs.flatten_to_single_pixel()
            } else {
                data.inputs.clone()
            };
            let opts = PropagateOptions {
                track: TrackChoice::Diag,
                keep_snapshots: false,
            };
            let trace = propagate(&inputs, &arch, &opts)?;
            KernelFile::from_cov_diag(trace.diag.as_ref().unwrap(), digest, meta)
        }
        other => return Err(CliError::Config(format!("unknown payload '{other}'"))),
    };
    file.save(out)?;
    write_sidecar(out, cfg)?;
    Ok(format!(
        "command=kernel\nout={}\nrows={}\npayload={}\ndigest={:#018x}\n",
        out.display(),
        file.rows,
        cfg.run.payload,
        digest
    ))
}

/// `mc`: Monte Carlo kernel estimate to a kernel file.
pub fn cmd_mc(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    let mc = &cfg.mc;
    if mc.n == 0 || mc.m == 0 {
        return Err(CliError::Config("mc.n and mc.m must be >= 1".into()));
    }
    let seed = mc
        .seed
        .ok_or_else(|| CliError::Config("mc.seed must be explicit".into()))?;
    let data = assemble_dataset(cfg)?;
    let arch = cfg.arch.resolve()?;
    let inputs = if arch.connectivity == Connectivity::Fcn {
        data.inputs.flatten_to_single_pixel()
    } else {
        data.inputs.clone()
    };
    let digest = arch_digest(&arch);
    let meta = base_metadata("mc", &data)
        + &format!(
            "payload={}\nn={}\nm={}\nseed={}\ntarget_layer={}\n",
            cfg.run.payload,
            mc.n,
            mc.m,
            seed,
            mc.target_layer
                .map_or_else(|| "top".to_string(), |t| t.to_string()),
        );
    let file = match cfg.run.payload.as_str() {
        "class_kernel" => {
            let kernel = mc_estimate_class(&inputs, &arch, mc.n, mc.m, seed)?;
            KernelFile::from_class_kernel(&kernel, digest, meta)
        }
        "cov_full" => {
            let est = mc_estimate(
                &inputs,
                &arch,
                mc.n,
                mc.m,
                seed,
                Track::Full,
                mc.target_layer,
            )?;
            KernelFile::from_cov_full(est.full.as_ref().unwrap(), digest, meta)
        }
        "cov_diag" => {
            let est = mc_estimate(
                &inputs,
                &arch,
                mc.n,
                mc.m,
                seed,
                Track::Diag,
                mc.target_layer,
            )?;
            KernelFile::from_cov_diag(est.diag.as_ref().unwrap(), digest, meta)
        }
        other => return Err(CliError::Config(format!("unknown payload '{other}'"))),
    };
    file.save(out)?;
    write_sidecar(out, cfg)?;
    Ok(format!(
        "command=mc\nout={}\nrows={}\nn={}\nm={}\nseed={}\n",
        out.display(),
        file.rows,
        mc.n,
        mc.m,
        seed
    ))
}

/// Where `regress` finds its kernel blocks.
pub enum KernelSource {
    /// One square kernel over train-then-test samples.
    Joint(PathBuf),
    /// Separate train / cross / test-diagonal blocks.
    Blocks {
        train: PathBuf,
        cross: PathBuf,
        test_diag: PathBuf,
    },
}

/// `regress`: exact GP posterior from saved kernels, reported as
/// line-delimited `key=value`.
pub fn cmd_regress(
    cfg: &RunConfig,
    source: &KernelSource,
    force: bool,
) -> Result<String, CliError> {
    let data = assemble_dataset(cfg)?;
    let arch = cfg.arch.resolve()?;
    let digest = arch_digest(&arch);
    let n_train = data.n_train;
    let n_test = data.labels.len() - n_train;
    if n_test == 0 {
        return Err(CliError::Config(
            "regress needs test samples; set dataset.test_per_class".into(),
        ));
    }
    let n_classes = data.labels.iter().copied().max().unwrap_or(0) + 1;
    let problem = match source {
        KernelSource::Joint(path) => {
            let file = KernelFile::load(path)?;
            file.check_digest(digest, force)?;
            let kernel = file.to_class_kernel()?;
            if kernel.n() != data.labels.len() {
                return Err(CliError::Config(format!(
                    "kernel covers {} samples, dataset has {}",
                    kernel.n(),
                    data.labels.len()
                )));
            }
            RegressionProblem::from_joint_kernel(
                &kernel,
                &data.labels,
                n_train,
                n_classes,
                cfg.regress.noise,
            )?
        }
        KernelSource::Blocks {
            train,
            cross,
            test_diag,
        } => {
            let train_file = KernelFile::load(train)?;
            train_file.check_digest(digest, force)?;
            let train_kernel = train_file.to_class_kernel()?;
            let cross_file = KernelFile::load(cross)?;
            cross_file.check_digest(digest, force)?;
            let diag_file = KernelFile::load(test_diag)?;
            diag_file.check_digest(digest, force)?;
            if train_kernel.n() != n_train {
                return Err(CliError::Config(format!(
                    "train kernel covers {} samples, split says {n_train}",
                    train_kernel.n()
                )));
            }
            if cross_file.rows as usize != n_test || cross_file.cols as usize != n_train {
                return Err(CliError::Config(format!(
                    "cross block is {}x{}, expected {n_test}x{n_train}",
                    cross_file.rows, cross_file.cols
                )));
            }
            if diag_file.rows as usize != n_test || diag_file.cols != 1 {
                return Err(CliError::Config(format!(
                    "test-diagonal block is {}x{}, expected {n_test}x1",
                    diag_file.rows, diag_file.cols
                )));
            }
            RegressionProblem {
                k_train: train_kernel.data().to_vec(),
                n_train,
                k_cross: cross_file.payload.clone(),
                n_test,
                k_test_diag: diag_file.payload.clone(),
                targets: nngp_core::regress::encode_labels(&data.labels[..n_train], n_classes),
                n_classes,
                noise: cfg.regress.noise,
            }
        }
    };
    let result = solve_with_ladder(&problem, &cfg.regress.ladder())?;
    let test_labels = &data.labels[n_train..];
    let acc = accuracy(&result, test_labels);
    let mean_var = result.variance.iter().sum::<f64>() / result.variance.len() as f64;
    let min_var = result
        .variance
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let max_var = result
        .variance
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let failed: Vec<String> = result.failed_rungs.iter().map(|e| e.to_string()).collect();
    let mut report = String::new();
    writeln!(report, "command=regress").unwrap();
    writeln!(report, "n_train={n_train}").unwrap();
    writeln!(report, "n_test={n_test}").unwrap();
    writeln!(report, "n_classes={n_classes}").unwrap();
    writeln!(report, "noise={}", cfg.regress.noise).unwrap();
    writeln!(report, "ladder.start_exp={}", cfg.regress.ladder_start_exp).unwrap();
    writeln!(report, "ladder.stop_exp={}", cfg.regress.ladder_stop_exp).unwrap();
    writeln!(
        report,
        "ladder.scale_by_diag_mean={}",
        cfg.regress.ladder_scale
    )
    .unwrap();
    writeln!(report, "ladder.failed_rungs={}", failed.join(",")).unwrap();
    writeln!(
        report,
        "ladder.rung_exponent={}",
        result.rung_exponent.unwrap()
    )
    .unwrap();
    writeln!(report, "accuracy={acc}").unwrap();
    writeln!(report, "mean_predictive_variance={mean_var}").unwrap();
    writeln!(report, "min_predictive_variance={min_var}").unwrap();
    writeln!(report, "max_predictive_variance={max_var}").unwrap();
    Ok(report)
}

/// `phase`: fixed-point scan over a variance grid, one row per cell.
pub fn cmd_phase(cfg: &RunConfig) -> Result<String, CliError> {
    let grid = cfg.phase.grid()?;
    let points = phase_scan(&grid, cfg.phase.nonlinearity, cfg.phase.depth);
    let mut out = String::from("sigma_w2\tsigma_b2\tq_star\tc_star\trate\tlabel\n");
    let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
    for p in &points {
        writeln!(
            out,
            "{:.6}\t{:.6}\t{}\t{}\t{}\t{}",
            p.sigma_w2,
            p.sigma_b2,
            fmt(p.q_star),
            fmt(p.c_star),
            fmt(p.rate),
            p.label
        )
        .unwrap();
    }
    Ok(out)
}

/// `datagen`: synthetic dataset to an IDX pair.
pub fn cmd_datagen(cfg: &RunConfig, out_prefix: &Path) -> Result<String, CliError> {
    if cfg.dataset.source != "synth" {
        return Err(CliError::Config(
            "datagen only emits synthetic datasets".into(),
        ));
    }
    let raw = build_raw(cfg)?;
    let images = PathBuf::from(format!("{}-images.idx", out_prefix.display()));
    let labels = PathBuf::from(format!("{}-labels.idx", out_prefix.display()));
    write_idx(&raw, &images, &labels)?;
    Ok(format!(
        "command=datagen\nimages={}\nlabels={}\nsamples={}\nclasses={}\n",
        images.display(),
        labels.display(),
        raw.len(),
        raw.n_classes
    ))
}
