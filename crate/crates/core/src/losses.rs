//! Training objective: L1 score loss plus the router load-balancing and
//! z-losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::moe::RoutingRecord;
use crate::tensor::{logsumexp, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub aux: f64,
    pub z: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            aux: 0.01,
            z: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.aux >= 0.0 && self.z >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative, got aux={} z={}",
                self.aux, self.z
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub main: f64,
    pub aux: f64,
    pub z: f64,
    pub total: f64,
}

/// Mean absolute error over the batch.
pub fn l1_main(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Argument("L1 loss over an empty batch".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::dim("l1_main", &[pred.len()], &[target.len()]));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// `N_E · Σ_e t̂_e · p̂_e` with `t̂` the fraction of tokens whose Top-K set
/// contains `e` and `p̂` the mean dense routing probability.
pub fn load_balance_loss(routing: &RoutingRecord) -> f64 {
    load_balance_from_stats(&routing.probs, &routing.mask)
}

pub fn load_balance_from_stats(probs: &Tensor, mask: &Tensor) -> f64 {
    let (n, e) = probs.dims2();
    let mut total = 0.0;
    for j in 0..e {
        let t_hat: f64 = (0..n).map(|i| mask.get2(i, j)).sum::<f64>() / n as f64;
        let p_hat: f64 = (0..n).map(|i| probs.get2(i, j)).sum::<f64>() / n as f64;
        total += t_hat * p_hat;
    }
    e as f64 * total
}

/// Mean over tokens of the squared log-sum-exp of the raw gate logits.
pub fn z_loss(logits: &Tensor) -> f64 {
    let (n, e) = logits.dims2();
    logits
        .data()
        .chunks(e)
        .map(|row| logsumexp(row).powi(2))
        .sum::<f64>()
        / n as f64
}

pub fn total_loss(main: f64, aux: f64, z: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        main,
        aux,
        z,
        total: main + weights.aux * aux + weights.z * z,
    }
}

/// Load-balancing loss on the graph. Differentiable through the dense
/// probabilities only; the mask statistics are constants.
pub fn load_balance_on_graph(g: &mut Graph<'_>, probs: Var, mask: &Tensor) -> Result<Var> {
    let (n, e) = mask.dims2();
    let mut t_hat = vec![0.0; e];
    for row in mask.data().chunks(e) {
        for (t, m) in t_hat.iter_mut().zip(row) {
            *t += m / n as f64;
        }
    }
    let p_hat = g.mean_rows(probs);
    let weighted = g.mul_const(p_hat, Tensor::new(&[1, e], t_hat)?)?;
    let summed = g.sum_all(weighted);
    Ok(g.scale(summed, e as f64))
}

pub fn z_loss_on_graph(g: &mut Graph<'_>, logits: Var) -> Var {
    let lse = g.logsumexp_rows(logits);
    let sq = g.square(lse);
    g.mean_all(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::route;

    #[test]
    fn l1_examples() {
        assert_eq!(l1_main(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(l1_main(&[1.0, 3.0], &[2.0, 1.0]).unwrap(), 1.5);
        let t = [0.1, 0.5, 0.9];
        let shifted: Vec<f64> = t.iter().map(|v| v - 0.25).collect();
        assert!((l1_main(&shifted, &t).unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(l1_main(&[], &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn load_balance_uniform_equals_k() {
        // 4 tokens, 4 experts, K=2, every expert chosen by exactly half the tokens
        let probs = Tensor::full(&[4, 4], 0.25);
        let mask = Tensor::from_rows(&[
            &[1.0, 1.0, 0.0, 0.0],
            &[0.0, 0.0, 1.0, 1.0],
            &[1.0, 0.0, 1.0, 0.0],
            &[0.0, 1.0, 0.0, 1.0],
        ]);
        assert!((load_balance_from_stats(&probs, &mask) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn load_balance_collapsed_top1() {
        let probs = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]);
        let mask = probs.clone();
        assert_eq!(load_balance_from_stats(&probs, &mask), 3.0);
    }

    #[test]
    fn load_balance_single_expert_is_one() {
        let logits = Tensor::from_rows(&[&[0.4], &[-2.0], &[7.0]]);
        let r = route(&logits, 1).unwrap();
        assert_eq!(load_balance_loss(&r), 1.0);
    }

    #[test]
    fn z_loss_examples() {
        assert!((z_loss(&Tensor::zeros(&[3, 4])) - 4f64.ln().powi(2)).abs() < 1e-12);
        assert!((z_loss(&Tensor::zeros(&[3, 4])) - 1.9218).abs() < 1e-4);
        assert!((z_loss(&Tensor::from_rows(&[&[-1.5]])) - 2.25).abs() < 1e-15);
        let l2 = 2f64.ln();
        assert!((z_loss(&Tensor::from_rows(&[&[l2, l2]])) - 4f64.ln().powi(2)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 0.0, 0.0, &w).total, 1.0);
        assert!((total_loss(0.0, 2.0, 0.0, &w).total - 0.02).abs() < 1e-15);
        let b = total_loss(0.5, 2.0, 1.9218, &w);
        assert!((b.total - 0.5219218).abs() < 1e-12);
        assert!((b.total - (b.main + w.aux * b.aux + w.z * b.z)).abs() < 1e-9);
    }

    #[test]
    fn graph_losses_match_pure_versions() {
        let logits = Tensor::from_rows(&[&[0.3, -1.2, 2.0], &[1.0, 1.0, 0.5], &[-0.4, 0.0, 0.9]]);
        let r = route(&logits, 2).unwrap();
        let mut g = Graph::default();
        let l = g.constant(logits.clone());
        let p = g.softmax(l).unwrap();
        let aux = load_balance_on_graph(&mut g, p, &r.mask).unwrap();
        let z = z_loss_on_graph(&mut g, l);
        assert!((g.value(aux).data()[0] - load_balance_loss(&r)).abs() < 1e-15);
        assert!((g.value(z).data()[0] - z_loss(&logits)).abs() < 1e-15);
    }

    #[test]
    fn negative_weights_rejected() {
        assert!(LossWeights { aux: -1.0, z: 0.0 }.validate().is_err());
    }
}
