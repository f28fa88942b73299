//! Post-training combination of independently trained replicas.

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::net::{predict_proba, ModelWeights};

/// Shape-identical members trained independently.
#[derive(Clone, Debug)]
pub struct Ensemble {
    members: Vec<ModelWeights>,
}

impl Ensemble {
    pub fn new(members: Vec<ModelWeights>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Config("an ensemble needs at least one member".into()))?;
        if let Some(i) = members.iter().position(|m| !m.same_shape(first)) {
            return Err(Error::shape(
                "Ensemble::new",
                format!("member {i} has layer sizes {:?}, member 0 has {:?}", members[i].layer_sizes(), first.layer_sizes()),
            ));
        }
        Ok(Ensemble { members })
    }

    pub fn members(&self) -> &[ModelWeights] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Elementwise mean of every weight and bias.
///
/// Uses the running form `μₖ = μₖ₋₁ + (xₖ − μₖ₋₁)/k`, which returns a
/// member exactly when all members agree.
pub fn average_weights(ensemble: &Ensemble) -> ModelWeights {
    let mut mean = ensemble.members[0].clone();
    for (k, member) in ensemble.members.iter().enumerate().skip(1) {
        let inv = 1.0 / (k as f64 + 1.0);
        for (acc, layer) in mean.layers_mut().iter_mut().zip(member.layers()) {
            for (m, x) in acc.weights.as_mut_slice().iter_mut().zip(layer.weights.as_slice()) {
                *m += (x - *m) * inv;
            }
            for (m, x) in acc.bias.iter_mut().zip(&layer.bias) {
                *m += (x - *m) * inv;
            }
        }
    }
    mean
}

/// Plurality vote of the members' predicted classes for each row of `batch`.
pub fn majority_vote(ensemble: &Ensemble, batch: &Matrix, hidden_p: f64, input_p: f64) -> Result<Vec<u8>> {
    let probs = ensemble
        .members
        .iter()
        .map(|m| predict_proba(m, batch, hidden_p, input_p))
        .collect::<Result<Vec<_>>>()?;
    resolve_votes(&probs)
}

/// Combines per-member class probabilities into one label per row.
///
/// Each member votes for its argmax class. The class with the most votes
/// wins; ties go to the class with the highest mean probability across
/// members, then to the smallest class index.
pub fn resolve_votes(member_probs: &[Matrix]) -> Result<Vec<u8>> {
    let first = member_probs
        .first()
        .ok_or_else(|| Error::Config("no member predictions to vote over".into()))?;
    if member_probs.iter().any(|p| p.shape() != first.shape()) {
        return Err(Error::shape("resolve_votes", "members disagree on prediction shape"));
    }
    let (rows, classes) = first.shape();
    let member_votes: Vec<Vec<usize>> = member_probs.iter().map(Matrix::argmax_rows).collect();
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut votes = vec![0usize; classes];
        let mut mass = vec![0.0f64; classes];
        for (probs, choice) in member_probs.iter().zip(&member_votes) {
            votes[choice[r]] += 1;
            for (m, p) in mass.iter_mut().zip(probs.row(r)) {
                *m += p;
            }
        }
        let mut best = 0;
        for c in 1..classes {
            if votes[c] > votes[best] || (votes[c] == votes[best] && mass[c] > mass[best]) {
                best = c;
            }
        }
        out.push(best as u8);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rng;
    use crate::net::{predict, Layer};
    use proptest::prelude::*;

    fn single(weights: [[f64; 2]; 2], bias: [f64; 2]) -> ModelWeights {
        ModelWeights::new(vec![Layer::new(Matrix::from_rows(&weights).unwrap(), bias.to_vec()).unwrap()]).unwrap()
    }

    #[test]
    fn identical_members_average_to_themselves() {
        let m = ModelWeights::init(&[5, 4, 3], &mut Rng::new(1)).unwrap();
        for n in 1..8 {
            let e = Ensemble::new(vec![m.clone(); n]).unwrap();
            assert_eq!(average_weights(&e), m);
        }
    }

    #[test]
    fn opposite_members_cancel() {
        let m = ModelWeights::init(&[5, 4, 3], &mut Rng::new(2)).unwrap();
        let mut neg = m.clone();
        for l in neg.layers_mut() {
            l.weights.scale(-1.0);
            for b in &mut l.bias {
                *b = -*b;
            }
        }
        let avg = average_weights(&Ensemble::new(vec![m, neg]).unwrap());
        assert!(avg.values().all(|&x| x == 0.0));
    }

    #[test]
    fn hand_computed_mean() {
        let a = single([[1.0, 2.0], [3.0, 4.0]], [0.0, 3.0]);
        let b = single([[4.0, -2.0], [0.5, 8.0]], [3.0, 0.0]);
        let c = single([[-2.0, 6.0], [2.5, 0.0]], [0.0, 0.0]);
        let avg = average_weights(&Ensemble::new(vec![a, b, c]).unwrap());
        let expected = [1.0, 2.0, 2.0, 4.0];
        for (x, e) in avg.layers()[0].weights.as_slice().iter().zip(expected) {
            assert!((x - e).abs() <= 1e-15, "{x} vs {e}");
        }
        assert!((avg.layers()[0].bias[0] - 1.0).abs() <= 1e-15);
        assert!((avg.layers()[0].bias[1] - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn mismatched_members_are_rejected() {
        let a = ModelWeights::init(&[5, 4, 3], &mut Rng::new(1)).unwrap();
        let b = ModelWeights::init(&[5, 6, 3], &mut Rng::new(1)).unwrap();
        assert!(matches!(Ensemble::new(vec![a, b]), Err(Error::Shape { .. })));
        assert!(matches!(Ensemble::new(vec![]), Err(Error::Config(_))));
    }

    /// The chosen class gets 0.6; the remaining mass is spread evenly.
    fn confident_probs(choice: usize, classes: usize) -> Matrix {
        let mut m = Matrix::filled(1, classes, 0.4 / (classes - 1) as f64);
        m.set(0, choice, 0.6);
        m
    }

    #[test]
    fn strict_majority_wins() {
        let probs: Vec<Matrix> = [2, 2, 7].iter().map(|&c| confident_probs(c, 10)).collect();
        assert_eq!(resolve_votes(&probs).unwrap(), vec![2]);
    }

    #[test]
    fn tie_goes_to_higher_mean_probability() {
        // Member A: p(1)=0.9, p(3)=0.1. Member B: p(1)=0.3, p(3)=0.7.
        // One vote each; mean p(1)=0.6 beats mean p(3)=0.4.
        let mut a = Matrix::zeros(1, 10);
        a.set(0, 1, 0.9);
        a.set(0, 3, 0.1);
        let mut b = Matrix::zeros(1, 10);
        b.set(0, 1, 0.3);
        b.set(0, 3, 0.7);
        assert_eq!(resolve_votes(&[a.clone(), b.clone()]).unwrap(), vec![1]);
        assert_eq!(resolve_votes(&[b, a]).unwrap(), vec![1]);
    }

    #[test]
    fn full_tie_goes_to_smallest_class() {
        // One vote each for 2 and 3, and equal summed probability.
        let mut a = Matrix::zeros(1, 4);
        a.set(0, 3, 0.4);
        a.set(0, 2, 0.6);
        let mut b = Matrix::zeros(1, 4);
        b.set(0, 2, 0.4);
        b.set(0, 3, 0.6);
        assert_eq!(resolve_votes(&[b.clone(), a.clone()]).unwrap(), vec![2]);
        assert_eq!(resolve_votes(&[a, b]).unwrap(), vec![2]);
    }

    #[test]
    fn single_member_vote_matches_its_argmax() {
        let m = ModelWeights::init(&[6, 5, 4], &mut Rng::new(3)).unwrap();
        let x = Rng::new(4).gaussian_matrix(30, 6, 1.0);
        let e = Ensemble::new(vec![m.clone()]).unwrap();
        assert_eq!(majority_vote(&e, &x, 0.5, 0.2).unwrap(), predict(&m, &x, 0.5, 0.2).unwrap());
        let e3 = Ensemble::new(vec![m.clone(); 3]).unwrap();
        assert_eq!(majority_vote(&e3, &x, 0.5, 0.2).unwrap(), predict(&m, &x, 0.5, 0.2).unwrap());
    }

    proptest! {
        #[test]
        fn averaging_ignores_member_order(seed in any::<u64>(), n in 2usize..6) {
            let members: Vec<_> = (0..n).map(|i| ModelWeights::init(&[4, 3, 2], &mut Rng::new(seed ^ i as u64)).unwrap()).collect();
            let mut rev = members.clone();
            rev.reverse();
            let scale = members.iter().flat_map(|m| m.values()).fold(0.0f64, |a, x| a.max(x.abs()));
            let a = average_weights(&Ensemble::new(members).unwrap());
            let b = average_weights(&Ensemble::new(rev).unwrap());
            for (x, y) in a.values().zip(b.values()) {
                prop_assert!((x - y).abs() <= 1e-15 * scale);
            }
        }

        #[test]
        fn averaging_commutes_with_scaling(seed in any::<u64>(), c in -4.0f64..4.0) {
            let members: Vec<_> = (0..3).map(|i| ModelWeights::init(&[4, 3, 2], &mut Rng::new(seed.wrapping_add(i))).unwrap()).collect();
            let scaled: Vec<_> = members.iter().map(|m| {
                let mut s = m.clone();
                for l in s.layers_mut() { l.weights.scale(c); }
                s
            }).collect();
            let scale = scaled.iter().flat_map(|m| m.values()).fold(0.0f64, |a, x| a.max(x.abs()));
            let a = average_weights(&Ensemble::new(members).unwrap());
            let b = average_weights(&Ensemble::new(scaled).unwrap());
            for (la, lb) in a.layers().iter().zip(b.layers()) {
                for (x, y) in la.weights.as_slice().iter().zip(lb.weights.as_slice()) {
                    prop_assert!((c * x - y).abs() <= 1e-15 * scale);
                }
            }
        }
    }
}
