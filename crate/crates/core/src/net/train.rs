use serde::{Deserialize, Serialize};

use super::forward::{backprop_with_loss, cross_entropy, forward_infer, infer_logits, DropoutMask, HiddenKeepPattern};
use super::model::{ModelWeights, WeightDelta};
use crate::data::{Dataset, MiniBatchPlan};
use crate::error::{Error, Result};
use crate::math::{Matrix, Rng};

const MASK_STREAM: u64 = 0x4d41_534b;

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 1000;

/// Supervised fine-tuning hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden_dropout_p: f64,
    pub input_dropout_p: f64,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            epochs: 200,
            batch_size: 100,
            learning_rate: 1.0,
            hidden_dropout_p: 0.5,
            input_dropout_p: 0.2,
            seed: 0,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("hidden_dropout_p", self.hidden_dropout_p),
            ("input_dropout_p", self.input_dropout_p),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("fine_tune: {name} must lie in [0, 1), got {p}")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("fine_tune: learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("fine_tune: batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One computed update of a [`Replica`].
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub epoch: usize,
    pub batch: usize,
    /// Global step index of this replica, counting from 0.
    pub step: u64,
    pub delta: WeightDelta,
    /// Mean cross-entropy of the masked forward pass.
    pub loss: f64,
    /// True for the last step of an epoch.
    pub epoch_end: bool,
}

/// The data-and-randomness side of one worker's training run.
///
/// A replica does not own weights: it hands out `Δw` for the next mini-batch
/// given whatever weights the caller currently holds. Its shuffles and
/// masks come from streams addressed by `(seed, worker, epoch, batch)`, so
/// worker 0 of any harness sees exactly the batches and masks of a
/// sequential run with the same seed.
#[derive(Clone, Debug)]
pub struct Replica<'a> {
    data: &'a Dataset,
    config: FineTuneConfig,
    worker: u64,
    pattern: Option<HiddenKeepPattern>,
    epoch: usize,
    batch: usize,
    step: u64,
    plan: Option<MiniBatchPlan>,
}

impl<'a> Replica<'a> {
    pub fn new(data: &'a Dataset, config: &FineTuneConfig, worker: usize) -> Result<Self> {
        config.validate()?;
        if data.is_empty() && config.epochs > 0 {
            return Err(Error::Config("cannot train on an empty dataset".into()));
        }
        Ok(Replica {
            data,
            config: config.clone(),
            worker: worker as u64,
            pattern: None,
            epoch: 0,
            batch: 0,
            step: 0,
            plan: None,
        })
    }

    /// Fixes the hidden masks instead of resampling them per case.
    pub fn with_pattern(mut self, pattern: HiddenKeepPattern) -> Self {
        self.pattern = Some(pattern);
        self
    }

    pub fn config(&self) -> &FineTuneConfig {
        &self.config
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.steps_per_epoch() * self.config.epochs) as u64
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// `Δw` for the next mini-batch evaluated at `model`, or `None` once all
    /// epochs are consumed.
    pub fn compute(&mut self, model: &ModelWeights) -> Result<Option<StepOutput>> {
        if self.is_done() {
            return Ok(None);
        }
        if self.plan.is_none() {
            self.plan = Some(MiniBatchPlan::new(
                self.data.len(),
                self.config.batch_size,
                self.config.seed,
                self.worker,
                self.epoch as u64,
            )?);
        }
        let plan = self.plan.as_ref().expect("plan prepared");
        let (images, labels) = crate::data::next_batch(plan, self.data, self.batch)?;
        let mut rng = Rng::stream(
            self.config.seed,
            &[MASK_STREAM, self.worker, self.epoch as u64, self.batch as u64],
        );
        let mask = match &self.pattern {
            Some(p) => DropoutMask::with_pattern(model, images.rows(), p, self.config.input_dropout_p, &mut rng)?,
            None => DropoutMask::sample(
                model,
                images.rows(),
                self.config.hidden_dropout_p,
                self.config.input_dropout_p,
                &mut rng,
            )?,
        };
        let (delta, loss) = backprop_with_loss(model, &images, &labels, &mask)?;

        let epoch_end = self.batch + 1 == plan.num_batches();
        let out = StepOutput {
            epoch: self.epoch,
            batch: self.batch,
            step: self.step,
            delta,
            loss,
            epoch_end,
        };
        self.step += 1;
        if epoch_end {
            self.epoch += 1;
            self.batch = 0;
            self.plan = None;
        } else {
            self.batch += 1;
        }
        Ok(Some(out))
    }
}

/// Callbacks invoked by [`fine_tune`].
pub trait FineTuneHooks {
    /// Called after every update with the freshly updated model.
    fn after_batch(&mut self, _model: &mut ModelWeights, _step: &StepOutput) -> Result<()> {
        Ok(())
    }

    /// Called once per finished epoch (`epoch` counts from 1).
    fn after_epoch(&mut self, _epoch: usize, _model: &ModelWeights) -> Result<()> {
        Ok(())
    }
}

impl FineTuneHooks for () {}

/// Mini-batch SGD with dropout: masks per case, `Δw` by backprop, `w ← w − ηΔw`.
pub fn fine_tune(
    model: ModelWeights,
    data: &Dataset,
    config: &FineTuneConfig,
    hooks: &mut dyn FineTuneHooks,
) -> Result<ModelWeights> {
    fine_tune_worker(model, data, config, 0, hooks)
}

/// [`fine_tune`] drawing shuffles and masks from the streams of `worker`,
/// so that runs sharing a seed still see different batches and masks.
pub fn fine_tune_worker(
    model: ModelWeights,
    data: &Dataset,
    config: &FineTuneConfig,
    worker: usize,
    hooks: &mut dyn FineTuneHooks,
) -> Result<ModelWeights> {
    if model.input_size() != data.n_features() {
        return Err(Error::shape(
            "fine_tune",
            format!("model expects {} inputs, data has {}", model.input_size(), data.n_features()),
        ));
    }
    let mut model = model;
    let mut replica = Replica::new(data, config, worker)?;
    while let Some(out) = replica.compute(&model)? {
        model.apply_delta(&out.delta, config.learning_rate)?;
        hooks.after_batch(&mut model, &out)?;
        if out.epoch_end {
            if !model.is_finite() {
                return Err(Error::NonFinite(format!("weights after epoch {}", out.epoch + 1)));
            }
            hooks.after_epoch(out.epoch + 1, &model)?;
        }
    }
    Ok(model)
}

/// Predicted class per row under the inference rule.
pub fn predict(model: &ModelWeights, images: &Matrix, hidden_p: f64, input_p: f64) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(images.rows());
    for start in (0..images.rows()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(images.rows())).collect();
        let logits = infer_logits(model, &images.select_rows(&idx)?, hidden_p, input_p)?;
        out.extend(logits.argmax_rows().into_iter().map(|c| c as u8));
    }
    Ok(out)
}

/// Class probabilities for every row, in evaluation-sized chunks.
pub fn predict_proba(model: &ModelWeights, images: &Matrix, hidden_p: f64, input_p: f64) -> Result<Matrix> {
    if images.rows() <= EVAL_CHUNK {
        return forward_infer(model, images, hidden_p, input_p);
    }
    let mut data = Vec::with_capacity(images.rows() * model.output_size());
    for start in (0..images.rows()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(images.rows())).collect();
        data.extend_from_slice(forward_infer(model, &images.select_rows(&idx)?, hidden_p, input_p)?.as_slice());
    }
    Matrix::from_vec(images.rows(), model.output_size(), data)
}

/// Fraction of misclassified examples.
pub fn evaluate(model: &ModelWeights, data: &Dataset, hidden_p: f64, input_p: f64) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let predicted = predict(model, data.images(), hidden_p, input_p)?;
    Ok(error_rate(&predicted, data.labels()))
}

pub fn error_rate(predicted: &[u8], labels: &[u8]) -> f64 {
    debug_assert_eq!(predicted.len(), labels.len());
    if labels.is_empty() {
        return 0.0;
    }
    let wrong = predicted.iter().zip(labels).filter(|(p, l)| p != l).count();
    wrong as f64 / labels.len() as f64
}

/// Mean cross-entropy of the inference-time network over `data`.
pub fn mean_loss(model: &ModelWeights, data: &Dataset, hidden_p: f64, input_p: f64) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
        let logits = infer_logits(model, &data.images().select_rows(&idx)?, hidden_p, input_p)?;
        let labels: Vec<u8> = idx.iter().map(|&i| data.labels()[i]).collect();
        total += cross_entropy(&logits, &labels)? * idx.len() as f64;
    }
    Ok(total / data.len() as f64)
}
