use std::path::PathBuf;
use std::process::ExitCode;

use nngp_cli::commands::{cmd_datagen, cmd_kernel, cmd_mc, cmd_phase, cmd_regress, KernelSource};
use nngp_cli::config::RunConfig;
use nngp_cli::CliError;

const USAGE: &str = "\
nngp - compositional kernels of infinitely wide convolutional networks

USAGE:
    nngp <kernel|mc|regress|phase|datagen> [OPTIONS] [--section.key=value ...]

OPTIONS:
    --config PATH            read a run configuration file
    --out PATH               output file (kernel/mc: kernel file, required;
                             datagen: file prefix, required;
                             regress/phase: also write the report here)
    --kernel PATH            regress: joint train+test kernel file
    --kernel-train PATH      regress: train-block kernel file
    --kernel-cross PATH      regress: cross-block kernel file
    --kernel-testdiag PATH   regress: test-diagonal block file
    --threads N              cap the worker thread count (alias run.threads)
    --force                  ignore architecture digest mismatches
    --section.key=value      override any config key, e.g. --arch.depth=3

EXIT CODES:
    0 success, 2 configuration error, 3 numerical failure, 4 i/o error
";

struct Cli {
    command: String,
    config: RunConfig,
    out: Option<PathBuf>,
    kernel: Option<PathBuf>,
    kernel_train: Option<PathBuf>,
    kernel_cross: Option<PathBuf>,
    kernel_testdiag: Option<PathBuf>,
    force: bool,
}

fn parse_args(argv: &[String]) -> Result<Cli, CliError> {
    if argv.is_empty() {
        return Err(CliError::Config(format!("missing subcommand\n\n{USAGE}")));
    }
    let command = argv[0].clone();
    if command == "--help" || command == "-h" {
        println!("{USAGE}");
        std::process::exit(0);
    }
    if !matches!(
        command.as_str(),
        "kernel" | "mc" | "regress" | "phase" | "datagen"
    ) {
        return Err(CliError::Config(format!(
            "unknown subcommand '{command}'\n\n{USAGE}"
        )));
    }
    // First pass: locate --config so file values load before overrides.
    let mut config = RunConfig::default();
    let mut i = 1;
    while i < argv.len() {
        if argv[i] == "--config" {
            let path = argv
                .get(i + 1)
                .ok_or_else(|| CliError::Config("--config needs a path".into()))?;
            let text =
                std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{path}: {e}")))?;
            config = RunConfig::parse_text(&text)?;
            i += 2;
        } else {
            i += 1;
        }
    }
    let mut cli = Cli {
        command,
        config,
        out: None,
        kernel: None,
        kernel_train: None,
        kernel_cross: None,
        kernel_testdiag: None,
        force: false,
    };
    let mut i = 1;
    while i < argv.len() {
        let arg = &argv[i];
        let take_value = |name: &str| -> Result<String, CliError> {
            argv.get(i + 1)
                .cloned()
                .ok_or_else(|| CliError::Config(format!("{name} needs a value")))
        };
        match arg.as_str() {
            "--config" => {
                i += 2; // consumed in the first pass
                continue;
            }
            "--out" => {
                cli.out = Some(PathBuf::from(take_value("--out")?));
                i += 2;
            }
            "--kernel" => {
                cli.kernel = Some(PathBuf::from(take_value("--kernel")?));
                i += 2;
            }
            "--kernel-train" => {
                cli.kernel_train = Some(PathBuf::from(take_value("--kernel-train")?));
                i += 2;
            }
            "--kernel-cross" => {
                cli.kernel_cross = Some(PathBuf::from(take_value("--kernel-cross")?));
                i += 2;
            }
            "--kernel-testdiag" => {
                cli.kernel_testdiag = Some(PathBuf::from(take_value("--kernel-testdiag")?));
                i += 2;
            }
            "--threads" => {
                let v = take_value("--threads")?;
                cli.config.set("run.threads", &v)?;
                i += 2;
            }
            "--force" => {
                cli.force = true;
                i += 1;
            }
            "--help" | "-h" => {
                println!("{USAGE}");
                std::process::exit(0);
            }
            other => {
                let dotted = other
                    .strip_prefix("--")
                    .ok_or_else(|| CliError::Config(format!("unexpected argument '{other}'")))?;
                if let Some((key, value)) = dotted.split_once('=') {
                    cli.config.set(key, value)?;
                    i += 1;
                } else {
                    let value = take_value(other)?;
                    cli.config.set(dotted, &value)?;
                    i += 2;
                }
            }
        }
    }
    Ok(cli)
}

fn run(cli: &Cli) -> Result<String, CliError> {
    if cli.config.run.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.config.run.threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let need_out = |what: &str| -> Result<&PathBuf, CliError> {
        cli.out
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("{what} needs --out PATH")))
    };
    match cli.command.as_str() {
        "kernel" => cmd_kernel(&cli.config, need_out("kernel")?),
        "mc" => cmd_mc(&cli.config, need_out("mc")?),
        "regress" => {
            let source = match (
                &cli.kernel,
                &cli.kernel_train,
                &cli.kernel_cross,
                &cli.kernel_testdiag,
            ) {
                (Some(joint), None, None, None) => KernelSource::Joint(joint.clone()),
                (None, Some(train), Some(cross), Some(diag)) => KernelSource::Blocks {
                    train: train.clone(),
                    cross: cross.clone(),
                    test_diag: diag.clone(),
                },
                _ => {
                    return Err(CliError::Config(
                        "regress needs --kernel PATH, or all of --kernel-train, \
                         --kernel-cross, --kernel-testdiag"
                            .into(),
                    ))
                }
            };
            let report = cmd_regress(&cli.config, &source, cli.force)?;
            if let Some(out) = &cli.out {
                std::fs::write(out, &report).map_err(|e| CliError::Io(e.to_string()))?;
            }
            Ok(report)
        }
        "phase" => {
            let table = cmd_phase(&cli.config)?;
            if let Some(out) = &cli.out {
                std::fs::write(out, &table).map_err(|e| CliError::Io(e.to_string()))?;
            }
            Ok(table)
        }
        "datagen" => cmd_datagen(&cli.config, need_out("datagen")?),
        _ => unreachable!("validated in parse_args"),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = match parse_args(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(&cli) {
        Ok(output) => {
            print!("{output}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
