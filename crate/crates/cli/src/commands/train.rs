use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use kldd::data::{augment, load_folder, random_crop, SampleRecord};
use kldd::diffusion::{gaussian, DiffusionSchedule};
use kldd::model::ModelBundle;
use kldd::optim::Adam;
use kldd::train::{derive_seed, mean_gradients, sample_gradients, LossValues, TrainSample};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{config_err, data_err, CliError, Result};

pub const LOSS_LOG: &str = "loss.csv";
pub const CHECKPOINT: &str = "checkpoint.kldd";
const LOSS_HEADER: &str = "step,L_N,L_clDice,total";

/// Where a training run left its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    /// Losses of the steps run by this invocation, `(step, values)`.
    pub losses: Vec<(u64, LossValues)>,
    pub epoch: u64,
    pub step: u64,
}

/// Training records from `dir`, checked against the patch size.
pub fn training_records(dir: &Path, patch: usize) -> Result<Vec<SampleRecord>> {
    let records = load_folder(dir)?;
    if records.is_empty() {
        return Err(data_err(dir, "no training images (expected images/ and masks/)"));
    }
    if let Some(r) = records.iter().find(|r| r.height() < patch || r.width() < patch) {
        return Err(data_err(dir, format!("{} is smaller than the {patch}px patch", r.id)));
    }
    Ok(records)
}

/// Trains from scratch, or continues `resume` for the remaining epochs.
///
/// Every epoch shuffles the records, splits them into batches and takes one
/// Adam step per batch on the mean of per-sample gradients. Each sample gets a
/// random crop, optional augmentation, a uniform step `t ∈ 1..=T` and fresh
/// noise, all drawn in order from the run RNG before the gradients are
/// computed in parallel.
pub fn cmd_train(cfg: &RunConfig, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let records = training_records(&cfg.train_dir, cfg.patch)?;
    let sched = DiffusionSchedule::scaled_default(cfg.model.steps)?;
    let (mut model, mut opt, mut rng, mut epoch, mut step) = match resume {
        Some(ck) => {
            if ck.config.model != cfg.model {
                return config_err("checkpoint/config mismatch: model settings differ from the checkpoint");
            }
            let mut opt = ck.optimizer()?;
            opt.config = cfg.adam;
            (ck.model()?, opt, ck.rng.restore(), ck.epoch, ck.step)
        }
        None => {
            let model = ModelBundle::new(cfg.model.clone(), cfg.seed)?;
            let opt = Adam::new(cfg.adam, &model.params)?;
            let rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0, 3));
            (model, opt, rng, 0, 0)
        }
    };

    fs::create_dir_all(&cfg.out_dir).map_err(|e| data_err(&cfg.out_dir, e))?;
    let loss_log = cfg.out_dir.join(LOSS_LOG);
    let checkpoint = cfg.out_dir.join(CHECKPOINT);
    let fresh = step == 0 || !loss_log.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&loss_log)
        .map_err(|e| data_err(&loss_log, e))?;
    if fresh {
        writeln!(log, "{LOSS_HEADER}").map_err(|e| data_err(&loss_log, e))?;
    }

    let capped = |s: u64| cfg.max_steps > 0 && s >= cfg.max_steps as u64;
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..records.len()).collect();
    while epoch < cfg.epochs as u64 && !capped(step) {
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut finished = true;
        for batch in order.chunks(cfg.batch) {
            if capped(step) {
                finished = false;
                break;
            }
            let draws = batch
                .iter()
                .map(|&i| draw(&records[i], cfg, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let results = draws
                .par_iter()
                .map(|s| sample_gradients(&model, &sched, s, cfg.cldice_weight))
                .collect::<Vec<_>>();
            step += 1;
            let mut grads = Vec::with_capacity(results.len());
            let mut mean = LossValues::default();
            for r in results {
                let (l, g) = r.map_err(|e| numeric(step, e))?;
                mean.noise += l.noise / batch.len() as f64;
                mean.cldice += l.cldice / batch.len() as f64;
                mean.total += l.total / batch.len() as f64;
                grads.push(g);
            }
            let grads = mean_gradients(&grads)?;
            if grads.iter().flatten().flatten().any(|g| !g.is_finite()) {
                return Err(CliError::Numeric(format!("non-finite gradient at step {step}")));
            }
            opt.step(&mut model.params, &grads).map_err(|e| numeric(step, e))?;
            writeln!(log, "{step},{},{},{}", mean.noise, mean.cldice, mean.total).map_err(|e| data_err(&loss_log, e))?;
            if cfg.log_every > 0 && step % cfg.log_every as u64 == 0 {
                eprintln!("step {step} epoch {} total {:.4} L_N {:.4} L_clDice {:.4}", epoch + 1, mean.total, mean.noise, mean.cldice);
            }
            losses.push((step, mean));
        }
        if finished {
            epoch += 1;
        }
        log.flush().map_err(|e| data_err(&loss_log, e))?;
        Checkpoint::new(cfg, &model, &opt, &rng, epoch, step).save(&checkpoint)?;
    }
    Ok(TrainOutcome {
        checkpoint,
        loss_log,
        losses,
        epoch,
        step,
    })
}

fn draw(record: &SampleRecord, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<TrainSample> {
    let mut rec = random_crop(record, cfg.patch, rng)?;
    if cfg.augment {
        rec = augment(&rec, rng);
    }
    let t = rng.random_range(1..=cfg.model.steps);
    let eps = gaussian(rec.mask.shape(), rng);
    Ok(TrainSample {
        image: rec.image,
        mask: rec.mask,
        t,
        eps,
    })
}

fn numeric(step: u64, e: kldd::Error) -> CliError {
    match e {
        kldd::Error::NonFinite(what) => CliError::Numeric(format!("{what} is not finite at step {step}")),
        other => CliError::Core(other),
    }
}
