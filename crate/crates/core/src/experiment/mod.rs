//! Experiment orchestration: building initial models, running each training
//! strategy, recording curves and aggregating sweeps.

mod config;
mod report;

use std::sync::{Mutex, OnceLock};

pub use config::{ExperimentConfig, Strategy, SweepConfig, DATA_DIR_ENV};
pub use report::{
    read_curve_csv, write_curve_csv, write_json, write_run_info, write_sweep_csv, write_table_csv, RunInfo, RunSummary,
};

use crate::combine::{average_weights, majority_vote, Ensemble};
use crate::data::{Dataset, NUM_CLASSES};
use crate::dist::{run_async, run_sync, EventLog};
use crate::error::{Error, Result};
use crate::math::{Matrix, Rng};
use crate::net::{
    error_rate, evaluate, fine_tune_worker, mean_loss, predict_proba, FineTuneHooks, ModelWeights, StepOutput,
};
use crate::rbm::{pretrain_stack_with, PretrainProgress, Rbm};

const INIT_STREAM: u64 = 0x4d4f_4445;

/// One row of a training curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy on the loss probe under the inference rule.
    pub train_loss: f64,
    pub test_error: f64,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub strategy: Strategy,
    pub seed: u64,
    pub test_error: f64,
    pub curve: Vec<EpochRecord>,
    /// The single model a strategy produced; `None` for majority voting.
    pub model: Option<ModelWeights>,
    /// Ensemble members, or every worker's final replica.
    pub members: Vec<ModelWeights>,
    pub log: Option<EventLog>,
}

/// A configuration bound to loaded data.
pub struct Experiment<'a> {
    config: &'a ExperimentConfig,
    train: &'a Dataset,
    test: &'a Dataset,
    probe: Dataset,
    given_stack: Option<Vec<Rbm>>,
    /// Member 0's pre-trained stack, shared when `shared_init` is set.
    stack: OnceLock<Vec<Rbm>>,
    on_pretrain: Option<&'a (dyn Fn(&PretrainProgress) + Sync)>,
}

impl<'a> Experiment<'a> {
    pub fn new(config: &'a ExperimentConfig, train: &'a Dataset, test: &'a Dataset) -> Result<Self> {
        config.validate()?;
        for (name, d) in [("training", train), ("test", test)] {
            if d.n_features() != config.layer_sizes[0] {
                return Err(Error::shape(
                    "Experiment::new",
                    format!("{name} images have {} pixels, the model takes {}", d.n_features(), config.layer_sizes[0]),
                ));
            }
        }
        Ok(Experiment {
            config,
            train,
            test,
            probe: train.head(config.loss_probe_size.min(train.len())),
            given_stack: None,
            stack: OnceLock::new(),
            on_pretrain: None,
        })
    }

    /// Starts every member from this stack instead of pre-training one.
    pub fn with_pretrained(mut self, stack: Vec<Rbm>) -> Result<Self> {
        let sizes: Vec<usize> = stack.iter().map(Rbm::n_visible).chain(stack.last().map(Rbm::n_hidden)).collect();
        let hidden = &self.config.layer_sizes[..self.config.layer_sizes.len() - 1];
        if sizes != hidden {
            return Err(Error::shape(
                "Experiment::with_pretrained",
                format!("stack has sizes {sizes:?}, config needs {hidden:?}"),
            ));
        }
        self.given_stack = Some(stack);
        Ok(self)
    }

    /// Reports pre-training progress to `f`.
    pub fn on_pretrain(mut self, f: &'a (dyn Fn(&PretrainProgress) + Sync)) -> Self {
        self.on_pretrain = Some(f);
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        self.config
    }

    fn pretrain(&self, seed_offset: u64) -> Result<Vec<Rbm>> {
        let cfg = self.config.pretrain.as_ref().expect("pre-training configured");
        let cfg = crate::rbm::PretrainConfig {
            seed: cfg.seed.wrapping_add(seed_offset),
            ..cfg.clone()
        };
        let hidden = &self.config.layer_sizes[1..self.config.layer_sizes.len() - 1];
        pretrain_stack_with(hidden, self.train, &cfg, |p| {
            if let Some(f) = self.on_pretrain {
                f(&p);
            }
        })
    }

    /// Initial weights of ensemble member `member` (all members share
    /// member 0's weights when `shared_init` is set).
    pub fn initial_model(&self, member: usize) -> Result<ModelWeights> {
        let member = if self.config.shared_init { 0 } else { member as u64 };
        let mut rng = Rng::stream(self.config.fine_tune.seed, &[INIT_STREAM, member]);
        if let Some(stack) = &self.given_stack {
            return ModelWeights::from_rbms(stack, NUM_CLASSES, &mut rng);
        }
        if self.config.pretrain.is_none() {
            return ModelWeights::init(&self.config.layer_sizes, &mut rng);
        }
        if member != 0 {
            return ModelWeights::from_rbms(&self.pretrain(member)?, NUM_CLASSES, &mut rng);
        }
        if self.stack.get().is_none() {
            let _ = self.stack.set(self.pretrain(0)?);
        }
        ModelWeights::from_rbms(self.stack.get().expect("set above"), NUM_CLASSES, &mut rng)
    }

    fn wants_row(&self, epoch: usize) -> bool {
        let every = self.config.metrics_every;
        epoch == self.config.fine_tune.epochs || (every > 0 && epoch.is_multiple_of(every))
    }

    fn record(&self, epoch: usize, model: &ModelWeights) -> Result<EpochRecord> {
        let ft = &self.config.fine_tune;
        Ok(EpochRecord {
            epoch,
            train_loss: mean_loss(model, &self.probe, ft.hidden_dropout_p, ft.input_dropout_p)?,
            test_error: evaluate(model, self.test, ft.hidden_dropout_p, ft.input_dropout_p)?,
        })
    }

    pub fn run(&self, strategy: Strategy) -> Result<RunResult> {
        let ft = &self.config.fine_tune;
        let curve = Mutex::new(Vec::new());
        let observe = |epoch: usize, model: &ModelWeights| -> Result<()> {
            if self.wants_row(epoch) {
                let row = self.record(epoch, model)?;
                curve.lock().unwrap_or_else(|e| e.into_inner()).push(row);
            }
            Ok(())
        };
        let (model, members, log) = match strategy {
            Strategy::Sequential => {
                let init = self.initial_model(0)?;
                let mut hooks = CurveHooks(&observe);
                let m = fine_tune_worker(init, self.train, ft, 0, &mut hooks)?;
                (Some(m.clone()), vec![m], None)
            }
            Strategy::SyncUpdate | Strategy::AsyncUpdate => {
                let init = self.initial_model(0)?;
                let run = if strategy == Strategy::SyncUpdate { run_sync } else { run_async };
                let out = run(&self.config.harness, ft, self.train, &init, Some(&observe))?;
                (Some(out.model), out.workers, Some(out.log))
            }
            Strategy::WeightAverage | Strategy::MajorityVote => {
                let members = (0..self.config.ensemble_size)
                    .map(|j| fine_tune_worker(self.initial_model(j)?, self.train, ft, j, &mut ()))
                    .collect::<Result<Vec<_>>>()?;
                let ensemble = Ensemble::new(members)?;
                if strategy == Strategy::WeightAverage {
                    let avg = average_weights(&ensemble);
                    observe(ft.epochs, &avg)?;
                    (Some(avg), ensemble.members().to_vec(), None)
                } else {
                    let row = self.vote_record(&ensemble)?;
                    curve.lock().unwrap_or_else(|e| e.into_inner()).push(row);
                    (None, ensemble.members().to_vec(), None)
                }
            }
        };
        let curve = curve.into_inner().unwrap_or_else(|e| e.into_inner());
        let test_error = match (&model, curve.last()) {
            (_, Some(last)) if last.epoch == ft.epochs => last.test_error,
            (Some(m), _) => evaluate(m, self.test, ft.hidden_dropout_p, ft.input_dropout_p)?,
            (None, _) => self.vote_record(&Ensemble::new(members.clone())?)?.test_error,
        };
        if let Some(bad) = curve.iter().find(|r| !r.train_loss.is_finite()) {
            return Err(Error::NonFinite(format!("training loss after epoch {}", bad.epoch)));
        }
        Ok(RunResult {
            strategy,
            seed: ft.seed,
            test_error,
            curve,
            model,
            members,
            log,
        })
    }

    /// Vote error on the test set, and the loss probe scored with the
    /// members' mean class probabilities.
    fn vote_record(&self, ensemble: &Ensemble) -> Result<EpochRecord> {
        let ft = &self.config.fine_tune;
        let (hp, ip) = (ft.hidden_dropout_p, ft.input_dropout_p);
        let votes = majority_vote(ensemble, self.test.images(), hp, ip)?;
        let mut mean = Matrix::zeros(self.probe.len(), NUM_CLASSES);
        for m in ensemble.members() {
            mean.axpy(1.0 / ensemble.len() as f64, &predict_proba(m, self.probe.images(), hp, ip)?)?;
        }
        let loss = if self.probe.is_empty() {
            0.0
        } else {
            let total: f64 = self
                .probe
                .labels()
                .iter()
                .enumerate()
                .map(|(r, &l)| -mean.get(r, l as usize).max(f64::MIN_POSITIVE).ln())
                .sum();
            total / self.probe.len() as f64
        };
        Ok(EpochRecord {
            epoch: ft.epochs,
            train_loss: loss,
            test_error: error_rate(&votes, self.test.labels()),
        })
    }
}

struct CurveHooks<'o>(&'o (dyn Fn(usize, &ModelWeights) -> Result<()> + Sync));

impl FineTuneHooks for CurveHooks<'_> {
    fn after_batch(&mut self, _model: &mut ModelWeights, _step: &StepOutput) -> Result<()> {
        Ok(())
    }

    fn after_epoch(&mut self, epoch: usize, model: &ModelWeights) -> Result<()> {
        (self.0)(epoch, model)
    }
}

/// Aggregate of one sweep point.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub p: f64,
    pub mean_error: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for one repeat.
    pub std_error: f64,
    pub n_repeats: usize,
    pub errors: Vec<f64>,
}

pub fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains once per (hidden dropout probability, repeat) with the configured
/// strategy. Repeat `r` uses seed `fine_tune.seed + r`.
pub fn sweep_dropout(
    config: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    mut on_run: impl FnMut(f64, usize, &RunResult),
) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let mut rows = Vec::with_capacity(config.sweep.dropout_p.len());
    for &p in &config.sweep.dropout_p {
        let mut errors = Vec::with_capacity(config.sweep.repeats);
        for r in 0..config.sweep.repeats {
            let mut cfg = config.clone();
            cfg.fine_tune.hidden_dropout_p = p;
            cfg.set_seed(config.fine_tune.seed.wrapping_add(r as u64));
            cfg.metrics_every = 0;
            let result = Experiment::new(&cfg, train, test)?.run(cfg.strategy)?;
            on_run(p, r, &result);
            errors.push(result.test_error);
        }
        let (mean_error, std_error) = mean_and_std(&errors);
        rows.push(SweepRow {
            p,
            mean_error,
            std_error,
            n_repeats: errors.len(),
            errors,
        });
    }
    Ok(rows)
}
