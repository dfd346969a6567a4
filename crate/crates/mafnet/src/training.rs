//! The `train` command: data loading, the optimizer loop, the loss log and
//! checkpoints.
//!
//! Output layout: the final (or last good) checkpoint lives directly in the
//! output directory next to `loss.csv`; intermediate checkpoints go to
//! `iter_NNNNNN/` subdirectories.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mafnet_core::data::{augment, keyed_rng, AnnotatedPair};
use mafnet_core::model::MafNet;
use mafnet_core::optim::OptimizerState;
use mafnet_core::train::{batch_indices, prepare_sample, train_step, Sample};
use mafnet_core::Error as CoreError;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{load_dataset, pad_to_multiple};
use crate::error::{CliError, CliResult};

pub const LOSS_LOG: &str = "loss.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub iterations: u64,
    /// `(iteration, lr, loss)` per completed iteration.
    pub log: Vec<(u64, f64, f64)>,
}

pub fn intermediate_dir(out: &Path, iteration: u64) -> PathBuf {
    out.join(format!("iter_{iteration:06}"))
}

struct LossLog {
    path: PathBuf,
    file: BufWriter<File>,
}

impl LossLog {
    fn create(path: PathBuf) -> CliResult<Self> {
        let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut log = Self {
            file: BufWriter::new(f),
            path,
        };
        log.line("iteration,lr,loss")?;
        Ok(log)
    }

    fn line(&mut self, text: &str) -> CliResult<()> {
        writeln!(self.file, "{text}").map_err(|e| CliError::io(&self.path, e))
    }

    fn flush(&mut self) -> CliResult<()> {
        self.file.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

/// Samples for one iteration. Without augmentation the prepared samples
/// are reused; with it each batch slot draws from its own keyed stream.
fn batch_samples<'a>(
    cfg: &RunConfig,
    pairs: &[AnnotatedPair],
    fixed: &'a [Sample],
    indices: &[usize],
    iteration: u64,
) -> CliResult<Vec<std::borrow::Cow<'a, Sample>>> {
    let mask = cfg.modalities.mask();
    indices
        .iter()
        .enumerate()
        .map(|(slot, &i)| match &cfg.augment {
            None => Ok(std::borrow::Cow::Borrowed(&fixed[i])),
            Some(aug) => {
                let mut rng = keyed_rng(aug.seed, iteration, slot as u64);
                let a = augment(&pairs[i], aug, &mut rng).map_err(|e| CliError::from(e).context(&pairs[i].id))?;
                Ok(std::borrow::Cow::Owned(prepare_sample(&a.pair, &cfg.density, mask)?))
            }
        })
        .collect()
}

/// Trains on every pair under `data` and writes checkpoints and the loss log
/// to `out`. A non-finite loss stops the run with a numeric error after the
/// parameters that produced the last finite loss are saved.
pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model_config()?;
    let pairs = load_dataset(data)?;
    if pairs.is_empty() {
        return Err(CliError::data(format!("{}: no training pairs", data.display())));
    }
    let mask = cfg.modalities.mask();
    let fixed: Vec<Sample> = if cfg.augment.is_none() {
        pairs
            .iter()
            .map(|p| prepare_sample(&pad_to_multiple(p).0, &cfg.density, mask).map_err(|e| CliError::from(e).context(&p.id)))
            .collect::<CliResult<_>>()?
    } else {
        Vec::new()
    };

    let (model, mut store) = MafNet::init::<f32>(&model_cfg, cfg.seed)?;
    let mut state = OptimizerState::new(&store, cfg.optimizer);
    let schedule = cfg.schedule();
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut log = LossLog::create(out.join(LOSS_LOG))?;
    let mut outcome = TrainOutcome {
        iterations: 0,
        log: Vec::new(),
    };
    let batch_size = cfg.batch_size();
    // parameters after `it - 1` updates, whose loss was finite
    let mut last_good = None;

    for it in 0..cfg.max_iters {
        let indices = batch_indices(pairs.len(), batch_size, it, cfg.seed, cfg.shuffle)?;
        let samples = batch_samples(cfg, &pairs, &fixed, &indices, it)?;
        let batch: Vec<&Sample> = samples.iter().map(|s| s.as_ref()).collect();
        let lr = schedule.lr_at(it);
        let before = store.clone();
        match train_step(&model, &mut store, &mut state, &batch, lr) {
            Ok(loss) => {
                log.line(&format!("{it},{lr},{loss}"))?;
                outcome.log.push((it, lr, loss));
                last_good = Some(before);
            }
            Err(CoreError::Numeric(msg)) => {
                log.flush()?;
                // with no finite loss yet the initialization is saved
                let (kept, good) = match &last_good {
                    Some(s) => (s, it - 1),
                    None => (&store, 0),
                };
                checkpoint::save(out, cfg, &model, kept, good)?;
                return Err(CliError::numeric(format!(
                    "iteration {it}: {msg}; saved the state after {good} iterations to {}",
                    out.display()
                )));
            }
            Err(e) => return Err(e.into()),
        }
        outcome.iterations = it + 1;
        let done = it + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.max_iters {
            log.flush()?;
            checkpoint::save(&intermediate_dir(out, done), cfg, &model, &store, done)?;
        }
    }
    log.flush()?;
    checkpoint::save(out, cfg, &model, &store, outcome.iterations)?;
    Ok(outcome)
}
