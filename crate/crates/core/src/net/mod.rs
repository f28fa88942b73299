//! Dropout-regularised feed-forward classifier: masked forward pass,
//! backpropagation, SGD fine-tuning and evaluation.

mod forward;
mod model;
mod train;

pub use forward::{
    backprop_batch, backprop_with_loss, cross_entropy, forward_infer, forward_train, infer_logits, DropoutMask,
    ForwardPass, HiddenKeepPattern,
};
pub use model::{sgd_step, Layer, ModelWeights, WeightDelta};
pub use train::{
    error_rate, evaluate, fine_tune, fine_tune_worker, mean_loss, predict, predict_proba, FineTuneConfig, FineTuneHooks, Replica,
    StepOutput,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::error::Error;
    use crate::math::{Matrix, Rng};

    /// Straight-line forward pass with explicit loops; shares no code with
    /// the production path.
    fn oracle_logits(model: &ModelWeights, x: &[f64], mask: Option<(&[f64], &[Vec<f64>])>) -> Vec<f64> {
        let layers = model.layers();
        let mut a: Vec<f64> = match mask {
            Some((m, _)) => x.iter().zip(m).map(|(v, k)| v * k).collect(),
            None => x.to_vec(),
        };
        for (li, layer) in layers.iter().enumerate() {
            let (n_in, n_out) = layer.weights.shape();
            let mut z = vec![0.0; n_out];
            for (j, zj) in z.iter_mut().enumerate() {
                let mut s = layer.bias[j];
                for (i, ai) in a.iter().enumerate().take(n_in) {
                    s += ai * layer.weights.get(i, j);
                }
                *zj = s;
            }
            if li + 1 < layers.len() {
                for (j, zj) in z.iter_mut().enumerate() {
                    *zj = 1.0 / (1.0 + (-*zj).exp());
                    if let Some((_, hidden)) = mask {
                        *zj *= hidden[li][j];
                    }
                }
            }
            a = z;
        }
        a
    }

    fn oracle_loss(model: &ModelWeights, x: &Matrix, y: &[u8], mask: Option<&DropoutMask>) -> f64 {
        let mut total = 0.0;
        for r in 0..x.rows() {
            let hidden: Vec<Vec<f64>> = mask
                .map(|m| m.hidden.iter().map(|h| h.row(r).to_vec()).collect())
                .unwrap_or_default();
            let m = mask.map(|m| (m.input.row(r), &hidden[..]));
            let z = oracle_logits(model, x.row(r), m);
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            total += lse - z[y[r] as usize];
        }
        total / x.rows() as f64
    }

    fn toy(sizes: &[usize], rows: usize, seed: u64) -> (ModelWeights, Matrix, Vec<u8>) {
        let mut rng = Rng::new(seed);
        // Larger-than-default weights so the check exercises curvature.
        let layers = sizes
            .windows(2)
            .map(|w| {
                let weights = rng.gaussian_matrix(w[0], w[1], 0.5);
                let bias = (0..w[1]).map(|_| rng.gaussian(0.0, 0.1)).collect();
                Layer::new(weights, bias).unwrap()
            })
            .collect();
        let model = ModelWeights::new(layers).unwrap();
        let x = Matrix::from_vec(rows, sizes[0], (0..rows * sizes[0]).map(|_| rng.uniform()).collect()).unwrap();
        let classes = *sizes.last().unwrap() as u64;
        let y = (0..rows).map(|_| (rng.next_u64() % classes) as u8).collect();
        (model, x, y)
    }

    fn check_gradient(model: &ModelWeights, x: &Matrix, y: &[u8], mask: &DropoutMask, use_mask_in_oracle: bool) {
        let grad = backprop_batch(model, x, y, mask).unwrap();
        let h = 1e-5;
        let oracle_mask = use_mask_in_oracle.then_some(mask);
        for (li, layer) in model.layers().iter().enumerate() {
            let n_w = layer.weights.as_slice().len();
            for k in 0..n_w + layer.bias.len() {
                let analytic = if k < n_w {
                    grad.layers[li].weights.as_slice()[k]
                } else {
                    grad.layers[li].bias[k - n_w]
                };
                let perturbed = |delta: f64| {
                    let mut m = model.clone();
                    let l = &mut m.layers_mut()[li];
                    if k < n_w {
                        l.weights.as_mut_slice()[k] += delta;
                    } else {
                        l.bias[k - n_w] += delta;
                    }
                    oracle_loss(&m, x, y, oracle_mask)
                };
                let numeric = (perturbed(h) - perturbed(-h)) / (2.0 * h);
                let scale = analytic.abs().max(numeric.abs());
                if scale < 1e-9 {
                    continue;
                }
                let rel = (analytic - numeric).abs() / scale;
                assert!(rel < 1e-4, "layer {li} param {k}: analytic {analytic} numeric {numeric} rel {rel}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in [1, 2, 3] {
            let (model, x, y) = toy(&[20, 10, 5], 8, seed);
            let mask = DropoutMask::all_keep(&model, x.rows());
            check_gradient(&model, &x, &y, &mask, false);
        }
    }

    #[test]
    fn masked_gradient_matches_finite_differences() {
        for seed in [4, 5, 6] {
            let (model, x, y) = toy(&[12, 9, 7, 4], 6, seed);
            let mask = DropoutMask::sample(&model, x.rows(), 0.5, 0.2, &mut Rng::new(seed)).unwrap();
            check_gradient(&model, &x, &y, &mask, true);
        }
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let (model, x, _) = toy(&[6, 5, 3], 4, 17);
        let mask = DropoutMask::sample(&model, 4, 0.5, 0.2, &mut Rng::new(99)).unwrap();
        let pass = forward_train(&model, &x, &mask).unwrap();
        for r in 0..4 {
            let hidden: Vec<Vec<f64>> = mask.hidden.iter().map(|h| h.row(r).to_vec()).collect();
            let z = oracle_logits(&model, x.row(r), Some((mask.input.row(r), &hidden)));
            for (a, b) in pass.logits.row(r).iter().zip(&z) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_keep_mask_equals_inference_without_dropout() {
        let (model, x, _) = toy(&[6, 5, 4, 3], 5, 2);
        let pass = forward_train(&model, &x, &DropoutMask::all_keep(&model, 5)).unwrap();
        let infer = forward_infer(&model, &x, 0.0, 0.0).unwrap();
        assert_eq!(pass.probs, infer);
    }

    #[test]
    fn dropped_last_hidden_layer_leaves_output_bias() {
        let (model, x, _) = toy(&[6, 5, 3], 3, 8);
        let mut mask = DropoutMask::all_keep(&model, 3);
        mask.hidden[0] = Matrix::zeros(3, 5);
        let pass = forward_train(&model, &x, &mask).unwrap();
        let bias = Matrix::from_rows(&[model.layers()[1].bias.clone()]).unwrap();
        let expected = crate::math::softmax_rows(&bias);
        for r in 0..3 {
            assert_eq!(pass.probs.row(r), expected.row(0));
        }
    }

    #[test]
    fn linear_probe_scales_by_keep_probability() {
        let mut rng = Rng::new(3);
        let layer = Layer::new(rng.gaussian_matrix(4, 3, 1.0), vec![0.0; 3]).unwrap();
        let model = ModelWeights::new(vec![layer]).unwrap();
        let x = rng.gaussian_matrix(5, 4, 1.0);
        let full = infer_logits(&model, &x, 0.0, 0.0).unwrap();
        let half = infer_logits(&model, &x, 0.0, 0.5).unwrap();
        for (h, f) in half.as_slice().iter().zip(full.as_slice()) {
            assert!((h - 0.5 * f).abs() < 1e-15);
        }
        let hidden_p_only = infer_logits(&model, &x, 0.5, 0.0).unwrap();
        assert_eq!(hidden_p_only, full);
    }

    #[test]
    fn dropped_unit_gets_zero_gradient() {
        let (model, x, y) = toy(&[6, 5, 4, 3], 7, 21);
        let mut mask = DropoutMask::all_keep(&model, 7);
        for r in 0..7 {
            mask.hidden[0].set(r, 2, 0.0);
        }
        let g = backprop_batch(&model, &x, &y, &mask).unwrap();
        for i in 0..6 {
            assert_eq!(g.layers[0].weights.get(i, 2), 0.0);
        }
        assert_eq!(g.layers[0].bias[2], 0.0);
        for j in 0..4 {
            assert_eq!(g.layers[1].weights.get(2, j), 0.0);
        }
    }

    #[test]
    fn saturated_perfect_model_has_vanishing_gradient() {
        let weights = Matrix::from_rows(&[[60.0, -60.0], [-60.0, 60.0]]).unwrap();
        let model = ModelWeights::new(vec![Layer::new(weights, vec![0.0, 0.0]).unwrap()]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let g = backprop_batch(&model, &x, &[0, 1], &DropoutMask::all_keep(&model, 2)).unwrap();
        assert!(g.norm() < 1e-8);
    }

    #[test]
    fn sgd_step_arithmetic() {
        let model = ModelWeights::new(vec![Layer::new(Matrix::filled(1, 1, 1.0), vec![2.0]).unwrap()]).unwrap();
        let delta = WeightDelta {
            layers: vec![Layer::new(Matrix::filled(1, 1, 0.5), vec![0.5]).unwrap()],
        };
        let next = sgd_step(&model, &delta, 1.0).unwrap();
        assert_eq!(next.layers()[0].weights.get(0, 0), 0.5);
        assert_eq!(next.layers()[0].bias[0], 1.5);
        assert_eq!(sgd_step(&model, &delta, 0.0).unwrap(), model);
        assert_eq!(sgd_step(&model, &WeightDelta::zeros_like(&model), 1.0).unwrap(), model);
    }

    #[test]
    fn masked_parameters_survive_the_step() {
        let (model, x, y) = toy(&[6, 5, 3], 4, 30);
        let mut mask = DropoutMask::all_keep(&model, 4);
        for r in 0..4 {
            mask.hidden[0].set(r, 1, 0.0);
        }
        let g = backprop_batch(&model, &x, &y, &mask).unwrap();
        let next = sgd_step(&model, &g, 1.0).unwrap();
        for i in 0..6 {
            assert_eq!(next.layers()[0].weights.get(i, 1), model.layers()[0].weights.get(i, 1));
        }
        for j in 0..3 {
            assert_eq!(next.layers()[1].weights.get(1, j), model.layers()[1].weights.get(1, j));
        }
    }

    #[test]
    fn shape_errors_are_reported() {
        let (model, x, y) = toy(&[6, 5, 3], 4, 1);
        let bad_mask = DropoutMask::all_keep(&model, 3);
        assert!(matches!(forward_train(&model, &x, &bad_mask), Err(Error::Shape { .. })));
        assert!(matches!(
            backprop_batch(&model, &x, &y[..3], &DropoutMask::all_keep(&model, 4)),
            Err(Error::Shape { .. })
        ));
        let other = WeightDelta::zeros_like(&toy(&[6, 4, 3], 1, 1).0);
        assert!(sgd_step(&model, &other, 1.0).is_err());
        assert!(ModelWeights::new(vec![Layer::zeros(3, 4), Layer::zeros(5, 2)]).is_err());
    }

    fn toy_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = Rng::new(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let class = (i % 3) as u8;
            let row: Vec<f64> = (0..9)
                .map(|j| if j / 3 == class as usize { 0.9 } else { 0.1 } + 0.05 * rng.uniform())
                .collect();
            rows.push(row);
            labels.push(class);
        }
        Dataset::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
    }

    #[test]
    fn zero_epochs_is_identity_and_runs_repeat_bitwise() {
        let data = toy_dataset(30, 1);
        let model = ModelWeights::init(&[9, 6, 3], &mut Rng::new(5)).unwrap();
        let none = FineTuneConfig { epochs: 0, ..Default::default() };
        assert_eq!(fine_tune(model.clone(), &data, &none, &mut ()).unwrap(), model);

        let cfg = FineTuneConfig { epochs: 3, batch_size: 7, seed: 11, ..Default::default() };
        let a = fine_tune(model.clone(), &data, &cfg, &mut ()).unwrap();
        let b = fine_tune(model.clone(), &data, &cfg, &mut ()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), model.checksum());
    }

    #[test]
    fn fine_tune_learns_a_separable_toy_problem() {
        let data = toy_dataset(90, 2);
        let model = ModelWeights::init(&[9, 8, 3], &mut Rng::new(5)).unwrap();
        let cfg = FineTuneConfig { epochs: 60, batch_size: 10, hidden_dropout_p: 0.2, input_dropout_p: 0.0, ..Default::default() };
        let trained = fine_tune(model, &data, &cfg, &mut ()).unwrap();
        assert_eq!(evaluate(&trained, &data, 0.2, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn hooks_see_every_batch_and_epoch() {
        struct Count(usize, Vec<usize>);
        impl FineTuneHooks for Count {
            fn after_batch(&mut self, _: &mut ModelWeights, _: &StepOutput) -> crate::Result<()> {
                self.0 += 1;
                Ok(())
            }
            fn after_epoch(&mut self, epoch: usize, _: &ModelWeights) -> crate::Result<()> {
                self.1.push(epoch);
                Ok(())
            }
        }
        let data = toy_dataset(10, 3);
        let model = ModelWeights::init(&[9, 4, 3], &mut Rng::new(1)).unwrap();
        let cfg = FineTuneConfig { epochs: 2, batch_size: 3, ..Default::default() };
        let mut hooks = Count(0, vec![]);
        fine_tune(model, &data, &cfg, &mut hooks).unwrap();
        assert_eq!(hooks.0, 8);
        assert_eq!(hooks.1, vec![1, 2]);
    }

    #[test]
    fn evaluate_counts_errors() {
        // A bias-only model that always predicts class 0.
        let layer = Layer::new(Matrix::zeros(2, 10), {
            let mut b = vec![0.0; 10];
            b[0] = 5.0;
            b
        })
        .unwrap();
        let model = ModelWeights::new(vec![layer]).unwrap();
        for (errors, expected) in [(98usize, 0.0098), (108, 0.0108), (0, 0.0)] {
            let labels: Vec<u8> = (0..10_000).map(|i| if i < errors { 1 } else { 0 }).collect();
            let data = Dataset::new(Matrix::zeros(10_000, 2), labels).unwrap();
            let err = evaluate(&model, &data, 0.5, 0.2).unwrap();
            assert!((err - expected).abs() < 1e-15, "{err}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(FineTuneConfig::default().validate().is_ok());
        for bad in [
            FineTuneConfig { hidden_dropout_p: 1.0, ..Default::default() },
            FineTuneConfig { input_dropout_p: -0.1, ..Default::default() },
            FineTuneConfig { learning_rate: 0.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
