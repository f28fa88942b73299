use super::model::{Layer, ModelWeights, WeightDelta};
use crate::error::{Error, Result};
use crate::math::{sigmoid_inplace, softmax_rows_inplace, Matrix, Rng};

/// Binary keep masks for one mini-batch: one row per training case.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub input: Matrix,
    /// One mask per hidden layer; the output layer is never masked.
    pub hidden: Vec<Matrix>,
}

/// Fixed per-unit keep flags for the hidden layers of one worker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HiddenKeepPattern(pub Vec<Vec<bool>>);

impl DropoutMask {
    pub fn all_keep(model: &ModelWeights, rows: usize) -> Self {
        let sizes = model.layer_sizes();
        DropoutMask {
            input: Matrix::filled(rows, sizes[0], 1.0),
            hidden: sizes[1..sizes.len() - 1]
                .iter()
                .map(|&n| Matrix::filled(rows, n, 1.0))
                .collect(),
        }
    }

    /// Independent keep decisions per unit per training case.
    pub fn sample(model: &ModelWeights, rows: usize, hidden_p: f64, input_p: f64, rng: &mut Rng) -> Result<Self> {
        let sizes = model.layer_sizes();
        let input = rng.bernoulli_matrix(rows, sizes[0], 1.0 - input_p)?;
        let hidden = sizes[1..sizes.len() - 1]
            .iter()
            .map(|&n| rng.bernoulli_matrix(rows, n, 1.0 - hidden_p))
            .collect::<Result<_>>()?;
        Ok(DropoutMask { input, hidden })
    }

    /// Input mask sampled as usual, hidden masks fixed by `pattern`.
    pub fn with_pattern(
        model: &ModelWeights,
        rows: usize,
        pattern: &HiddenKeepPattern,
        input_p: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let sizes = model.layer_sizes();
        let hidden_sizes = &sizes[1..sizes.len() - 1];
        if pattern.0.len() != hidden_sizes.len()
            || pattern.0.iter().zip(hidden_sizes).any(|(p, &n)| p.len() != n)
        {
            return Err(Error::shape("DropoutMask::with_pattern", "pattern does not match hidden layers"));
        }
        let input = rng.bernoulli_matrix(rows, sizes[0], 1.0 - input_p)?;
        let hidden = pattern
            .0
            .iter()
            .map(|keep| {
                let mut m = Matrix::zeros(rows, keep.len());
                for r in 0..rows {
                    for (slot, &k) in m.row_mut(r).iter_mut().zip(keep) {
                        if k {
                            *slot = 1.0;
                        }
                    }
                }
                m
            })
            .collect();
        Ok(DropoutMask { input, hidden })
    }

    fn check(&self, model: &ModelWeights, rows: usize) -> Result<()> {
        let sizes = model.layer_sizes();
        let ok = self.input.shape() == (rows, sizes[0])
            && self.hidden.len() == sizes.len() - 2
            && self
                .hidden
                .iter()
                .zip(&sizes[1..])
                .all(|(m, &n)| m.shape() == (rows, n));
        if ok {
            Ok(())
        } else {
            Err(Error::shape("dropout mask", "mask shapes do not match the activations"))
        }
    }
}

/// Activations of a masked forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Masked input followed by each masked hidden activation.
    pub activations: Vec<Matrix>,
    pub logits: Matrix,
    pub probs: Matrix,
}

fn affine(input: &Matrix, layer: &Layer) -> Result<Matrix> {
    let mut z = input.matmul(&layer.weights)?;
    z.add_row_vector(&layer.bias)?;
    Ok(z)
}

pub fn forward_train(model: &ModelWeights, batch: &Matrix, mask: &DropoutMask) -> Result<ForwardPass> {
    if batch.cols() != model.input_size() {
        return Err(Error::shape(
            "forward_train",
            format!("batch has {} features, model expects {}", batch.cols(), model.input_size()),
        ));
    }
    mask.check(model, batch.rows())?;
    let layers = model.layers();
    let mut activations = Vec::with_capacity(layers.len());
    activations.push(batch.hadamard(&mask.input)?);
    for (layer, m) in layers[..layers.len() - 1].iter().zip(&mask.hidden) {
        let mut a = affine(activations.last().expect("non-empty"), layer)?;
        sigmoid_inplace(&mut a);
        a.hadamard_inplace(m)?;
        activations.push(a);
    }
    let logits = affine(activations.last().expect("non-empty"), layers.last().expect("non-empty"))?;
    let mut probs = logits.clone();
    softmax_rows_inplace(&mut probs);
    Ok(ForwardPass {
        activations,
        logits,
        probs,
    })
}

/// Test-time logits: no masks; the product leaving each dropout layer is
/// scaled by that layer's keep probability.
pub fn infer_logits(model: &ModelWeights, batch: &Matrix, hidden_p: f64, input_p: f64) -> Result<Matrix> {
    if batch.cols() != model.input_size() {
        return Err(Error::shape(
            "forward_infer",
            format!("batch has {} features, model expects {}", batch.cols(), model.input_size()),
        ));
    }
    let layers = model.layers();
    let mut a = batch.clone();
    for (i, layer) in layers.iter().enumerate() {
        let keep = if i == 0 { 1.0 - input_p } else { 1.0 - hidden_p };
        let mut z = a.matmul(&layer.weights)?;
        if keep != 1.0 {
            z.scale(keep);
        }
        z.add_row_vector(&layer.bias)?;
        if i + 1 < layers.len() {
            sigmoid_inplace(&mut z);
        }
        a = z;
    }
    Ok(a)
}

pub fn forward_infer(model: &ModelWeights, batch: &Matrix, hidden_p: f64, input_p: f64) -> Result<Matrix> {
    let mut p = infer_logits(model, batch, hidden_p, input_p)?;
    softmax_rows_inplace(&mut p);
    Ok(p)
}

/// Mean of `−log softmax(logits)[label]` over the rows.
pub fn cross_entropy(logits: &Matrix, labels: &[u8]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::shape("cross_entropy", "one label per row required"));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let y = y as usize;
        if y >= row.len() {
            return Err(Error::Value(format!("label {y} out of range for {} classes", row.len())));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Gradient of the batch's mean cross-entropy, plus the loss itself.
pub fn backprop_with_loss(
    model: &ModelWeights,
    batch: &Matrix,
    labels: &[u8],
    mask: &DropoutMask,
) -> Result<(WeightDelta, f64)> {
    if labels.len() != batch.rows() {
        return Err(Error::shape(
            "backprop_batch",
            format!("{} labels for {} rows", labels.len(), batch.rows()),
        ));
    }
    if batch.rows() == 0 {
        return Err(Error::shape("backprop_batch", "empty batch"));
    }
    let pass = forward_train(model, batch, mask)?;
    let loss = cross_entropy(&pass.logits, labels)?;
    let n = batch.rows() as f64;
    let layers = model.layers();

    // δ at the output: (softmax − onehot) / n
    let mut delta = pass.probs;
    for (r, &y) in labels.iter().enumerate() {
        let row = delta.row_mut(r);
        row[y as usize] -= 1.0;
    }
    delta.scale(1.0 / n);

    let mut grads: Vec<Layer> = Vec::with_capacity(layers.len());
    for i in (0..layers.len()).rev() {
        let input = &pass.activations[i];
        let weights = input.t_matmul(&delta)?;
        let bias = delta.column_sums();
        if i > 0 {
            let mut back = delta.matmul_t(&layers[i].weights)?;
            let a = &pass.activations[i];
            let m = &mask.hidden[i - 1];
            for ((d, &act), &keep) in back
                .as_mut_slice()
                .iter_mut()
                .zip(a.as_slice())
                .zip(m.as_slice())
            {
                *d *= act * (1.0 - act) * keep;
            }
            delta = back;
        }
        grads.push(Layer { weights, bias });
    }
    grads.reverse();
    Ok((WeightDelta { layers: grads }, loss))
}

pub fn backprop_batch(model: &ModelWeights, batch: &Matrix, labels: &[u8], mask: &DropoutMask) -> Result<WeightDelta> {
    backprop_with_loss(model, batch, labels, mask).map(|(d, _)| d)
}
