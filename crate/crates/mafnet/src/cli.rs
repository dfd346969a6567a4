//! Argument parsing and command dispatch for the `mafnet` binary.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use mafnet_core::checks::{attention_cases, model_case, model_check_config, primitive_cases, Case};
use mafnet_core::data::SynthConfig;
use mafnet_core::gradcheck::GradCheckConfig;
use mafnet_core::model::{describe, MafNet};

use crate::config::{RunConfig, Split};
use crate::dataset::synthesize;
use crate::error::{CliError, CliResult};
use crate::{inference, training};

#[derive(Debug, Parser)]
#[command(name = "mafnet", version, about = "RGB-thermal crowd counting with multi-attention fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CheckModule {
    Tensor,
    Attention,
    Model,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic RGB-thermal dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        pairs: usize,
        /// Image side; a multiple of 64.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Probability that a scene's RGB image is darkened.
        #[arg(long, default_value_t = SynthConfig::default().darkness_prob)]
        darkness_prob: f64,
    },
    /// Train a model and write checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count metrics of a checkpoint over a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
        #[arg(long)]
        report: PathBuf,
    },
    /// Density map and count for one image pair.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        thermal: PathBuf,
        #[arg(long)]
        out_density: PathBuf,
        #[arg(long)]
        out_pgm: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// All modules when omitted.
        #[arg(long, value_enum)]
        module: Option<CheckModule>,
    },
    /// Export every attention matrix for one image pair.
    AttnMaps {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        thermal: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the parameters of the configured model.
    Describe {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Help and version requests exit 0.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.kind.exit_code()
        }
    }
}

fn emit(out: &mut dyn Write, text: impl std::fmt::Display) -> CliResult<()> {
    writeln!(out, "{text}").map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn execute(cmd: Command, out: &mut dyn Write) -> CliResult<i32> {
    match cmd {
        Command::Synth {
            out: dir,
            pairs,
            size,
            seed,
            darkness_prob,
        } => {
            let cfg = SynthConfig {
                pairs,
                size,
                seed,
                darkness_prob,
                ..SynthConfig::default()
            };
            let ids = synthesize(&dir, &cfg)?;
            emit(out, format_args!("wrote {} pairs to {}", ids.len(), dir.display()))?;
        }
        Command::Train { config, data, out: dir } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = training::train(&cfg, &data, &dir)?;
            let last = outcome.log.last().map_or(f64::NAN, |r| r.2);
            emit(
                out,
                format_args!(
                    "trained {} iterations, final loss {last}; checkpoint in {}",
                    outcome.iterations,
                    dir.display()
                ),
            )?;
        }
        Command::Eval { ckpt, data, split, report } => {
            let r = inference::evaluate(&ckpt, &data, split)?;
            inference::write_report(&report, &r)?;
            emit(
                out,
                format_args!("{} images ({}): mae {} rmse {}", r.n_images, split.label(), r.mae, r.rmse),
            )?;
        }
        Command::Predict {
            ckpt,
            rgb,
            thermal,
            out_density,
            out_pgm,
        } => {
            let p = inference::predict(&ckpt, &rgb, &thermal, &out_density, out_pgm.as_deref())?;
            emit(out, format_args!("count {}", p.count()))?;
        }
        Command::Gradcheck { module } => return gradcheck(module, out),
        Command::AttnMaps {
            ckpt,
            rgb,
            thermal,
            out: dir,
        } => {
            let entries = inference::attention_maps(&ckpt, &rgb, &thermal, &dir)?;
            emit(out, format_args!("wrote {} attention maps to {}", entries.len(), dir.display()))?;
        }
        Command::Describe { config } => {
            let cfg = RunConfig::load(&config)?;
            let (_, store) = MafNet::init::<f32>(&cfg.model_config()?, cfg.seed)?;
            let infos = describe(&store);
            for p in &infos {
                emit(out, format_args!("{}\t{:?}\t{}", p.name, p.shape, p.numel))?;
            }
            let total: usize = infos.iter().map(|p| p.numel).sum();
            emit(out, format_args!("total\t{} tensors\t{total}", infos.len()))?;
        }
    }
    Ok(0)
}

fn gradcheck(module: Option<CheckModule>, out: &mut dyn Write) -> CliResult<i32> {
    let all = [CheckModule::Tensor, CheckModule::Attention, CheckModule::Model];
    let modules = module.map_or(all.to_vec(), |m| vec![m]);
    let mut failures = 0;
    for m in modules {
        let (cases, cfg): (Vec<Case>, GradCheckConfig) = match m {
            CheckModule::Tensor => (primitive_cases(0), GradCheckConfig::default()),
            CheckModule::Attention => (attention_cases(0)?, GradCheckConfig::default()),
            CheckModule::Model => (vec![model_case(0)?], model_check_config(0)),
        };
        for case in &cases {
            let r = case.run(&cfg)?;
            let verdict = if r.passed() { "PASS" } else { "FAIL" };
            failures += usize::from(!r.passed());
            emit(
                out,
                format_args!(
                    "{verdict} {:<24} checked {:>5} failed {:>3} kinks {:>3} max_rel {:.3e} tol {:.0e}",
                    case.name,
                    r.checked,
                    r.failures.len(),
                    r.skipped_kinks,
                    r.max_rel_error,
                    r.tol
                ),
            )?;
        }
    }
    Ok(if failures > 0 { 3 } else { 0 })
}
