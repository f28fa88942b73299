use crate::error::{Error, Result};
use crate::math::{checksum, Matrix, Rng};
use crate::rbm::{Rbm, INIT_STD};

/// One fully connected layer: `out = in · weights + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weights.cols() != bias.len() {
            return Err(Error::shape(
                "Layer::new",
                format!("weights {:?} with bias of length {}", weights.shape(), bias.len()),
            ));
        }
        Ok(Layer { weights, bias })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            weights: Matrix::zeros(inputs, outputs),
            bias: vec![0.0; outputs],
        }
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.weights.shape() == other.weights.shape() && self.bias.len() == other.bias.len()
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.as_slice().iter().chain(&self.bias)
    }
}

fn check_chain(layers: &[Layer], op: &'static str) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::shape(op, "a network needs at least one layer"));
    }
    for (i, pair) in layers.windows(2).enumerate() {
        if pair[0].weights.cols() != pair[1].weights.rows() {
            return Err(Error::shape(
                op,
                format!(
                    "layer {i} emits {} units but layer {} expects {}",
                    pair[0].weights.cols(),
                    i + 1,
                    pair[1].weights.rows()
                ),
            ));
        }
    }
    for (i, l) in layers.iter().enumerate() {
        if l.weights.cols() != l.bias.len() {
            return Err(Error::shape(op, format!("layer {i} bias length mismatch")));
        }
    }
    Ok(())
}

/// Weights and biases of a feed-forward classifier.
///
/// The last layer feeds a softmax over `output_size()` classes; every other
/// layer is a sigmoid hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    layers: Vec<Layer>,
}

impl ModelWeights {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        check_chain(&layers, "ModelWeights::new")?;
        Ok(ModelWeights { layers })
    }

    /// Gaussian(0, 0.01) weights and zero biases for `sizes = [input, hidden.., output]`.
    pub fn init(sizes: &[usize], rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                weights: rng.gaussian_matrix(w[0], w[1], INIT_STD),
                bias: vec![0.0; w[1]],
            })
            .collect();
        ModelWeights::new(layers)
    }

    /// Hidden layers taken from a pre-trained stack, plus a freshly
    /// initialized softmax layer.
    pub fn from_rbms(stack: &[Rbm], n_classes: usize, rng: &mut Rng) -> Result<Self> {
        let top = stack
            .last()
            .ok_or_else(|| Error::Config("empty RBM stack".into()))?;
        let mut layers: Vec<Layer> = stack
            .iter()
            .map(|r| Layer::new(r.weights.clone(), r.hidden_bias.clone()))
            .collect::<Result<_>>()?;
        layers.push(Layer {
            weights: rng.gaussian_matrix(top.n_hidden(), n_classes, INIT_STD),
            bias: vec![0.0; n_classes],
        });
        ModelWeights::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    /// `[input, hidden.., output]`
    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].weights.rows())
            .chain(self.layers.iter().map(|l| l.weights.cols()))
            .collect()
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].weights.rows()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().expect("non-empty").weights.cols()
    }

    pub fn n_hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn same_shape(&self, other: &ModelWeights) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
    }

    /// All parameters, layer by layer, weights before bias.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Layer::values)
    }

    pub fn checksum(&self) -> u64 {
        checksum(self.values())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|x| x.is_finite())
    }

    /// `w ← w − η·Δw` on every weight and bias.
    pub fn apply_delta(&mut self, delta: &WeightDelta, eta: f64) -> Result<()> {
        if !delta.matches(self) {
            return Err(Error::shape("apply_delta", "delta does not mirror the model"));
        }
        for (l, d) in self.layers.iter_mut().zip(&delta.layers) {
            for (w, g) in l.weights.as_mut_slice().iter_mut().zip(d.weights.as_slice()) {
                *w -= eta * g;
            }
            for (b, g) in l.bias.iter_mut().zip(&d.bias) {
                *b -= eta * g;
            }
        }
        Ok(())
    }
}

/// A gradient (or any update) with the shape of a [`ModelWeights`].
#[derive(Clone, Debug, PartialEq)]
pub struct WeightDelta {
    pub layers: Vec<Layer>,
}

impl WeightDelta {
    pub fn zeros_like(model: &ModelWeights) -> Self {
        WeightDelta {
            layers: model
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weights.rows(), l.weights.cols()))
                .collect(),
        }
    }

    pub fn matches(&self, model: &ModelWeights) -> bool {
        self.layers.len() == model.layers.len()
            && self.layers.iter().zip(&model.layers).all(|(a, b)| a.same_shape(b))
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Layer::values)
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn checksum(&self) -> u64 {
        checksum(self.values())
    }

    /// `self += alpha · other`
    pub fn add_scaled(&mut self, alpha: f64, other: &WeightDelta) -> Result<()> {
        if self.layers.len() != other.layers.len()
            || !self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
        {
            return Err(Error::shape("WeightDelta::add_scaled", "mismatched deltas"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.axpy(alpha, &b.weights)?;
            crate::math::axpy_slice(&mut a.bias, alpha, &b.bias);
        }
        Ok(())
    }
}

/// `w' = w − η·Δw`
pub fn sgd_step(model: &ModelWeights, delta: &WeightDelta, eta: f64) -> Result<ModelWeights> {
    let mut next = model.clone();
    next.apply_delta(delta, eta)?;
    Ok(next)
}
