//! Bernoulli RBMs trained greedily, layer by layer, with CD-1.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MiniBatchPlan};
use crate::error::{Error, Result};
use crate::math::{sigmoid_inplace, Matrix, Rng};

pub const INIT_STD: f64 = 0.01;

const INIT_STREAM: u64 = 0x494e_4954;
const CD_STREAM: u64 = 0x4344_3121;
const PLAN_WORKER_BASE: u64 = 0x5052_0000;

/// Hyper-parameters of greedy pre-training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_decay: f64,
    pub momentum_initial: f64,
    /// Linear momentum increase per epoch.
    pub momentum_increment: f64,
    pub momentum_cap: f64,
    /// Epochs over which the momentum ramps before holding at the cap.
    pub momentum_ramp_epochs: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 50,
            batch_size: 100,
            lr_initial: 10.0,
            lr_decay: 0.998,
            momentum_initial: 0.5,
            momentum_increment: 0.001,
            momentum_cap: 0.99,
            momentum_ramp_epochs: 490,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("pretrain: {m}")));
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return bad("lr_initial must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        for (name, m) in [
            ("momentum_initial", self.momentum_initial),
            ("momentum_cap", self.momentum_cap),
        ] {
            if !(0.0..1.0).contains(&m) {
                return bad(&format!("{name} must lie in [0, 1)"));
            }
        }
        if !(self.momentum_increment >= 0.0 && self.momentum_increment.is_finite()) {
            return bad("momentum_increment must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }

    /// `lr_initial · lr_decay^epoch`
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr_initial * self.lr_decay.powi(epoch as i32)
    }

    /// Linear ramp from `momentum_initial`, held at `momentum_cap` once the
    /// ramp is over or the cap is reached.
    pub fn momentum(&self, epoch: usize) -> f64 {
        if epoch >= self.momentum_ramp_epochs {
            return self.momentum_cap;
        }
        (self.momentum_initial + self.momentum_increment * epoch as f64).min(self.momentum_cap)
    }
}

/// CD-1 statistics for one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct RbmGradient {
    pub weights: Matrix,
    pub visible_bias: Vec<f64>,
    pub hidden_bias: Vec<f64>,
}

/// How the positive-phase hidden layer feeds the reconstruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HiddenSampling {
    /// Binary states drawn from the hidden probabilities.
    Stochastic,
    /// The probabilities themselves.
    MeanField,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rbm {
    pub weights: Matrix,
    pub visible_bias: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    pub weight_velocity: Matrix,
    pub visible_velocity: Vec<f64>,
    pub hidden_velocity: Vec<f64>,
}

impl Rbm {
    /// Gaussian(0, 0.01) weights, zero biases, zero momentum state.
    pub fn new(n_visible: usize, n_hidden: usize, rng: &mut Rng) -> Self {
        Rbm::from_parameters(
            rng.gaussian_matrix(n_visible, n_hidden, INIT_STD),
            vec![0.0; n_visible],
            vec![0.0; n_hidden],
        )
        .expect("consistent shapes")
    }

    pub fn from_parameters(weights: Matrix, visible_bias: Vec<f64>, hidden_bias: Vec<f64>) -> Result<Self> {
        if weights.rows() != visible_bias.len() || weights.cols() != hidden_bias.len() {
            return Err(Error::shape(
                "Rbm::from_parameters",
                format!(
                    "weights {:?}, visible bias {}, hidden bias {}",
                    weights.shape(),
                    visible_bias.len(),
                    hidden_bias.len()
                ),
            ));
        }
        let (v, h) = weights.shape();
        Ok(Rbm {
            weight_velocity: Matrix::zeros(v, h),
            visible_velocity: vec![0.0; v],
            hidden_velocity: vec![0.0; h],
            weights,
            visible_bias,
            hidden_bias,
        })
    }

    pub fn n_visible(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_hidden(&self) -> usize {
        self.weights.cols()
    }

    /// `sigmoid(v·W + hidden_bias)`
    pub fn hidden_probs(&self, visible: &Matrix) -> Result<Matrix> {
        let mut h = visible.matmul(&self.weights)?;
        h.add_row_vector(&self.hidden_bias)?;
        sigmoid_inplace(&mut h);
        Ok(h)
    }

    /// `sigmoid(h·Wᵀ + visible_bias)`
    pub fn visible_probs(&self, hidden: &Matrix) -> Result<Matrix> {
        let mut v = hidden.matmul_t(&self.weights)?;
        v.add_row_vector(&self.visible_bias)?;
        sigmoid_inplace(&mut v);
        Ok(v)
    }

    /// Mean squared error of the deterministic one-step reconstruction.
    pub fn reconstruction_error(&self, data: &Matrix) -> Result<f64> {
        if data.rows() == 0 {
            return Ok(0.0);
        }
        let recon = self.visible_probs(&self.hidden_probs(data)?)?;
        Ok(recon.sub(data)?.sum_of_squares() / data.as_slice().len() as f64)
    }

    /// Momentum step: `velocity ← m·velocity + η·Δ`, then `θ ← θ + velocity`.
    pub fn apply_update(&mut self, grad: &RbmGradient, learning_rate: f64, momentum: f64) -> Result<()> {
        if grad.weights.shape() != self.weights.shape()
            || grad.visible_bias.len() != self.visible_bias.len()
            || grad.hidden_bias.len() != self.hidden_bias.len()
        {
            return Err(Error::shape(
                "Rbm::apply_update",
                format!("gradient {:?} for weights {:?}", grad.weights.shape(), self.weights.shape()),
            ));
        }
        fn step(param: &mut [f64], velocity: &mut [f64], delta: &[f64], lr: f64, m: f64) {
            for ((p, v), d) in param.iter_mut().zip(velocity.iter_mut()).zip(delta) {
                *v = m * *v + lr * d;
                *p += *v;
            }
        }
        step(
            self.weights.as_mut_slice(),
            self.weight_velocity.as_mut_slice(),
            grad.weights.as_slice(),
            learning_rate,
            momentum,
        );
        step(&mut self.visible_bias, &mut self.visible_velocity, &grad.visible_bias, learning_rate, momentum);
        step(&mut self.hidden_bias, &mut self.hidden_velocity, &grad.hidden_bias, learning_rate, momentum);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite()
            && self.visible_bias.iter().chain(&self.hidden_bias).all(|x| x.is_finite())
    }
}

fn mean_difference(a: &Matrix, b: &Matrix) -> Vec<f64> {
    let n = a.rows() as f64;
    a.column_sums()
        .into_iter()
        .zip(b.column_sums())
        .map(|(x, y)| (x - y) / n)
        .collect()
}

/// CD-1 estimate of the log-likelihood gradient over `batch`.
pub fn cd1_gradient(rbm: &Rbm, batch: &Matrix, rng: &mut Rng) -> Result<RbmGradient> {
    cd1_gradient_with(rbm, batch, HiddenSampling::Stochastic, rng)
}

pub fn cd1_gradient_with(
    rbm: &Rbm,
    batch: &Matrix,
    sampling: HiddenSampling,
    rng: &mut Rng,
) -> Result<RbmGradient> {
    if batch.cols() != rbm.n_visible() {
        return Err(Error::shape(
            "cd1_gradient",
            format!("batch has {} columns, RBM has {} visible units", batch.cols(), rbm.n_visible()),
        ));
    }
    if batch.rows() == 0 {
        return Err(Error::shape("cd1_gradient", "empty batch"));
    }
    let h_prob = rbm.hidden_probs(batch)?;
    let h_state = match sampling {
        HiddenSampling::Stochastic => rng.sample_binary(&h_prob),
        HiddenSampling::MeanField => h_prob.clone(),
    };
    let v_recon = rbm.visible_probs(&h_state)?;
    let h_recon = rbm.hidden_probs(&v_recon)?;

    let n = batch.rows() as f64;
    let mut weights = batch.t_matmul(&h_prob)?;
    weights.axpy(-1.0, &v_recon.t_matmul(&h_recon)?)?;
    weights.scale(1.0 / n);

    Ok(RbmGradient {
        weights,
        visible_bias: mean_difference(batch, &v_recon),
        hidden_bias: mean_difference(&h_prob, &h_recon),
    })
}

/// Progress report emitted after each pre-training epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainProgress {
    pub layer: usize,
    /// Number of completed epochs; 0 reports the untrained layer.
    pub epoch: usize,
    pub reconstruction_error: f64,
}

/// Trains one RBM per entry of `hidden_sizes`, each on the hidden
/// probabilities of the one below.
pub fn pretrain_stack(hidden_sizes: &[usize], data: &Dataset, config: &PretrainConfig) -> Result<Vec<Rbm>> {
    pretrain_stack_with(hidden_sizes, data, config, |_| {})
}

pub fn pretrain_stack_with(
    hidden_sizes: &[usize],
    data: &Dataset,
    config: &PretrainConfig,
    mut on_epoch: impl FnMut(PretrainProgress),
) -> Result<Vec<Rbm>> {
    if hidden_sizes.is_empty() {
        return Err(Error::Config("pretraining needs at least one hidden layer".into()));
    }
    if hidden_sizes.contains(&0) {
        return Err(Error::Config("hidden layer sizes must be positive".into()));
    }
    config.validate()?;

    let mut stack = Vec::with_capacity(hidden_sizes.len());
    let mut input = data.images().clone();
    for (layer, &n_hidden) in hidden_sizes.iter().enumerate() {
        let mut init_rng = Rng::stream(config.seed, &[INIT_STREAM, layer as u64]);
        let mut rbm = Rbm::new(input.cols(), n_hidden, &mut init_rng);
        on_epoch(PretrainProgress {
            layer,
            epoch: 0,
            reconstruction_error: rbm.reconstruction_error(&input)?,
        });

        for epoch in 0..config.epochs {
            let lr = config.learning_rate(epoch);
            let momentum = config.momentum(epoch);
            let plan = MiniBatchPlan::new(
                input.rows(),
                config.batch_size,
                config.seed,
                PLAN_WORKER_BASE + layer as u64,
                epoch as u64,
            )?;
            for b in 0..plan.num_batches() {
                let batch = input.select_rows(plan.batch_indices(b)?)?;
                let mut rng = Rng::stream(config.seed, &[CD_STREAM, layer as u64, epoch as u64, b as u64]);
                let grad = cd1_gradient(&rbm, &batch, &mut rng)?;
                rbm.apply_update(&grad, lr, momentum)?;
            }
            if !rbm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "RBM {layer} diverged in epoch {}",
                    epoch + 1
                )));
            }
            on_epoch(PretrainProgress {
                layer,
                epoch: epoch + 1,
                reconstruction_error: rbm.reconstruction_error(&input)?,
            });
        }

        let next = if layer + 1 < hidden_sizes.len() {
            Some(rbm.hidden_probs(&input)?)
        } else {
            None
        };
        stack.push(rbm);
        if let Some(next) = next {
            input = next;
        }
    }
    Ok(stack)
}
