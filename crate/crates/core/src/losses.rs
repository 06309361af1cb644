//! Objective terms: supervised density regression, domain classification,
//! and the within-image and across-image counting-consistency hinges.
//!
//! Each term has a plain scalar form, used for reporting and as a
//! reference, and a graph form that records it on a [`Graph`] for
//! back-propagation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::tensor::{bce_value, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Source,
    Dma,
    Cwi,
    Cai,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Source => "source",
            Stage::Dma => "dma",
            Stage::Cwi => "cwi",
            Stage::Cai => "cai",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Stage::Source),
            "dma" => Ok(Stage::Dma),
            "cwi" => Ok(Stage::Cwi),
            "cai" => Ok(Stage::Cai),
            other => Err(Error::InvalidArgument(format!("unknown stage {other:?}"))),
        }
    }
}

/// Component values of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub bce: f64,
    pub wi: f64,
    pub ai: f64,
    pub total: f64,
    pub stage: Stage,
}

/// Loss weights in effect for a stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    /// Combines the components with the weights the stage uses.
    pub fn new(stage: Stage, w: LossWeights, mse: f64, bce: f64, wi: f64, ai: f64) -> Self {
        let total = match stage {
            Stage::Source => mse,
            Stage::Dma => compose_dma(mse, bce, w.alpha),
            Stage::Cwi => compose_cwi(compose_dma(mse, bce, w.alpha), wi, w.lambda1),
            Stage::Cai => {
                // the per-image hinge mean already covers both members of a pair
                compose_dma(mse, bce, w.alpha) + w.lambda1 * wi + w.lambda2 * ai
            }
        };
        LossBreakdown {
            mse,
            bce,
            wi,
            ai,
            total,
            stage,
        }
    }
}

/// `(1/2N) * sum_i ||gt_i - pred_i||^2` over a list of map pairs.
pub fn mse_loss(pred: &[DensityMap], gt: &[DensityMap]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::InvalidShape(format!(
            "mse over {} predictions and {} targets",
            pred.len(),
            gt.len()
        )));
    }
    let mut ss = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        if p.height() != g.height() || p.width() != g.width() {
            return Err(Error::InvalidShape(format!(
                "map {}x{} against {}x{}",
                p.height(),
                p.width(),
                g.height(),
                g.width()
            )));
        }
        ss += p.data().iter().zip(g.data()).map(|(a, b)| (b - a) * (b - a)).sum::<f64>();
    }
    Ok(ss / (2.0 * pred.len() as f64))
}

/// Graph form of [`mse_loss`] over a `[N, 1, h, w]` batch.
pub fn mse_on_graph(graph: &mut Graph, pred: Var, gt: &Tensor) -> Result<Var> {
    graph.mse(pred, gt)
}

/// Two-class cross-entropy, probability clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce_loss(pred_prob: f64, label: f64) -> f64 {
    bce_value(pred_prob, label)
}

/// Mean cross-entropy of a `[N]` probability vector.
pub fn bce_on_graph(graph: &mut Graph, probs: Var, labels: &[f64]) -> Result<Var> {
    graph.bce(probs, labels)
}

/// `max(0, -(full - sub) + m)`.
pub fn within_image_loss(count_full: f64, count_sub: f64, m: f64) -> f64 {
    (-(count_full - count_sub) + m).max(0.0)
}

pub fn within_image_on_graph(graph: &mut Graph, count_full: Var, count_sub: Var, m: f64) -> Result<Var> {
    let diff = graph.sub(count_full, count_sub)?;
    Ok(graph.hinge(diff, m))
}

/// Which sub-image must not be outcounted: `true` when the hinge is taken
/// on `a_sub - b_sub`, i.e. when `count_a >= count_b`.
pub fn across_image_order(count_a: f64, count_b: f64) -> bool {
    count_a >= count_b
}

pub fn across_image_loss(count_a: f64, count_b: f64, count_a_sub: f64, count_b_sub: f64, m: f64) -> f64 {
    if across_image_order(count_a, count_b) {
        (-(count_a_sub - count_b_sub) + m).max(0.0)
    } else {
        (-(count_b_sub - count_a_sub) + m).max(0.0)
    }
}

/// Graph form of [`across_image_loss`]. The branch is chosen from the
/// current values of the full-image counts and passes no gradient.
pub fn across_image_on_graph(
    graph: &mut Graph,
    count_a: Var,
    count_b: Var,
    count_a_sub: Var,
    count_b_sub: Var,
    m: f64,
) -> Result<Var> {
    let order = across_image_order(graph.scalar(count_a), graph.scalar(count_b));
    graph.note_branch(order);
    let diff = if order {
        graph.sub(count_a_sub, count_b_sub)?
    } else {
        graph.sub(count_b_sub, count_a_sub)?
    };
    Ok(graph.hinge(diff, m))
}

/// `mse + alpha * bce`.
pub fn compose_dma(mse: f64, bce: f64, alpha: f64) -> f64 {
    mse + alpha * bce
}

/// `dma + lambda1 * wi`.
pub fn compose_cwi(dma: f64, wi: f64, lambda1: f64) -> f64 {
    dma + lambda1 * wi
}

/// `dma + lambda1 * (wi_a + wi_b) + lambda2 * ai`.
pub fn compose_cai(dma: f64, wi_a: f64, wi_b: f64, ai: f64, lambda1: f64, lambda2: f64) -> f64 {
    dma + lambda1 * (wi_a + wi_b) + lambda2 * ai
}

/// Weighted sum of scalar graph values; zero-weight terms are left out of
/// the graph entirely.
pub fn weighted_sum_on_graph(graph: &mut Graph, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        if w == 0.0 {
            continue;
        }
        let t = if w == 1.0 { v } else { graph.scale(v, w) };
        acc = Some(match acc {
            None => t,
            Some(a) => graph.add(a, t)?,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => Ok(graph.input(Tensor::scalar(0.0))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        let a = DensityMap::from_data(2, 2, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(mse_loss(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        let p = DensityMap::from_data(1, 1, 4, vec![3.0]).unwrap();
        let g = DensityMap::from_data(1, 1, 4, vec![1.0]).unwrap();
        assert_eq!(mse_loss(&[p.clone()], &[g]).unwrap(), 2.0);
        assert!(mse_loss(&[p], &[a]).is_err());
        assert!(mse_loss(&[], &[]).is_err());
    }

    #[test]
    fn bce_examples() {
        assert!(bce_loss(1.0, 1.0).abs() < 1e-11);
        assert!((bce_loss(0.5, 1.0) - 0.693147).abs() < 1e-6);
        assert!((bce_loss(0.5, 0.0) - std::f64::consts::LN_2).abs() < 1e-9);
        assert!(bce_loss(0.0, 1.0).is_finite());
    }

    #[test]
    fn within_examples() {
        assert_eq!(within_image_loss(10.0, 4.0, 0.0), 0.0);
        assert_eq!(within_image_loss(4.0, 10.0, 0.0), 6.0);
        assert_eq!(within_image_loss(5.0, 5.0, 1.0), 1.0);

        let mut g = Graph::new();
        let full = g.param(Tensor::scalar(5.0));
        let sub = g.param(Tensor::scalar(5.0));
        let l = within_image_on_graph(&mut g, full, sub, 1.0).unwrap();
        assert_eq!(g.scalar(l), 1.0);
        g.backward(l).unwrap();
        assert_eq!(g.grad(full).unwrap(), &[-1.0]);
        assert_eq!(g.grad(sub).unwrap(), &[1.0]);
    }

    #[test]
    fn across_examples() {
        assert_eq!(across_image_loss(20.0, 5.0, 16.0, 4.0, 0.0), 0.0);
        assert_eq!(across_image_loss(20.0, 5.0, 3.0, 9.0, 0.0), 6.0);
        assert_eq!(across_image_loss(5.0, 20.0, 9.0, 3.0, 0.0), 6.0);
    }

    #[test]
    fn composer_examples() {
        assert_eq!(compose_dma(0.0, 0.0, 0.1), 0.0);
        assert_eq!(compose_cwi(0.0, 0.0, 45.0), 0.0);
        assert_eq!(compose_cai(0.0, 0.0, 0.0, 0.0, 45.0, 1.0), 0.0);
        assert_eq!(compose_cwi(1.0, 2.0, 45.0), 91.0);
        assert!((compose_cai(1.0, 0.0, 0.0, 26.0, 45.0, 1.0 / 26.0) - 2.0).abs() < 1e-12);
        assert_eq!(compose_dma(2.0, 3.0, 0.1), 2.0 + 0.1 * 3.0);
    }

    #[test]
    fn breakdown_totals() {
        let w = LossWeights {
            alpha: 0.1,
            lambda1: 45.0,
            lambda2: 1.0 / 26.0,
        };
        let b = LossBreakdown::new(Stage::Source, w, 1.0, 2.0, 3.0, 4.0);
        assert_eq!(b.total, 1.0);
        let b = LossBreakdown::new(Stage::Dma, w, 1.0, 2.0, 3.0, 4.0);
        assert!((b.total - 1.2).abs() < 1e-12);
        let b = LossBreakdown::new(Stage::Cwi, w, 1.0, 2.0, 3.0, 4.0);
        assert!((b.total - (1.2 + 135.0)).abs() < 1e-12);
        let b = LossBreakdown::new(Stage::Cai, w, 1.0, 2.0, 3.0, 4.0);
        assert!((b.total - (1.2 + 135.0 + 4.0 / 26.0)).abs() < 1e-12);
    }

    #[test]
    fn weighted_sum_skips_zero_weights() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(2.0));
        let b = g.param(Tensor::scalar(3.0));
        let s = weighted_sum_on_graph(&mut g, &[(a, 1.0), (b, 0.0)]).unwrap();
        assert_eq!(s, a);
        let s = weighted_sum_on_graph(&mut g, &[(a, 0.5), (b, 2.0)]).unwrap();
        assert_eq!(g.scalar(s), 7.0);
    }

    #[test]
    fn stage_parse_roundtrip() {
        for s in [Stage::Source, Stage::Dma, Stage::Cwi, Stage::Cai] {
            assert_eq!(s.to_string().parse::<Stage>().unwrap(), s);
        }
        assert!("xyz".parse::<Stage>().is_err());
    }
}
