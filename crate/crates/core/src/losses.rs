//! Triplet, classification and mask-overlap losses and their weighted sum.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::masking::{self, MaskPair};
use crate::params::{Bound, Params};
use crate::seed::Rng;
use crate::tensor::Tensor;

/// Linear map `d_model -> 2` with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn init(d: usize, rng: &mut Rng) -> Self {
        let bound = (3.0 / d as f64).sqrt();
        let data = (0..d * 2).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            weight: Tensor::matrix(d, 2, data).expect("valid shape"),
            bias: Tensor::zeros(&[2]),
        }
    }

    pub fn insert_into(self, params: &mut Params, prefix: &str) {
        params.insert(format!("{prefix}.weight"), self.weight);
        params.insert(format!("{prefix}.bias"), self.bias);
    }

    pub fn from_params(params: &Params, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: params.get(&format!("{prefix}.weight"))?.clone(),
            bias: params.get(&format!("{prefix}.bias"))?.clone(),
        })
    }

    /// Logits `[B, 2]` for representations `z` (`[B, d]`).
    pub fn logits(g: &mut Graph, p: &Bound, prefix: &str, z: Var) -> Result<Var> {
        let w = p.var(&format!("{prefix}.weight"))?;
        let b = p.var(&format!("{prefix}.bias"))?;
        let out = g.matmul(z, w)?;
        g.add(out, b)
    }

    pub fn loss(g: &mut Graph, p: &Bound, prefix: &str, z: Var, labels: &[usize]) -> Result<Var> {
        let logits = Self::logits(g, p, prefix, z)?;
        g.cross_entropy(logits, labels)
    }

    /// Eager predictions (argmax, ties to class 0) for rows of `z`.
    pub fn predict(&self, z: &[Vec<f64>]) -> Vec<u8> {
        let w = self.weight.data();
        let b = self.bias.data();
        z.iter()
            .map(|row| {
                let mut s = [b[0], b[1]];
                for (i, &x) in row.iter().enumerate() {
                    s[0] += x * w[i * 2];
                    s[1] += x * w[i * 2 + 1];
                }
                u8::from(s[1] > s[0])
            })
            .collect()
    }
}

/// Coefficients of the total loss and the triplet margin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_trp: f64,
    pub lambda_ovl: f64,
    pub lambda_cls: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_trp: 1.0,
            lambda_ovl: 1e-3,
            lambda_cls: 1.0,
            alpha: 2.0,
        }
    }
}

impl LossWeights {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("lambda_trp", self.lambda_trp),
            ("lambda_ovl", self.lambda_ovl),
            ("lambda_cls", self.lambda_cls),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!(
                    "loss.{name} must be finite and non-negative, got {v}"
                ));
            }
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            out.push(format!("loss.alpha must be positive, got {}", self.alpha));
        }
        out
    }
}

/// Batched triplet losses over rows. Returns `(L_a, L_b, (L_a + L_b) / 2)`,
/// each averaged over the batch.
///
/// `L_a = max(|z0a - z1a| - |z0a - z2a| + alpha, 0)` and
/// `L_b = max(|z0b - z2b| - |z0b - z1b| + alpha, 0)`.
#[allow(clippy::too_many_arguments)]
pub fn triplet_loss(
    g: &mut Graph,
    z0a: Var,
    z1a: Var,
    z2a: Var,
    z0b: Var,
    z1b: Var,
    z2b: Var,
    alpha: f64,
) -> Result<(Var, Var, Var)> {
    let shape = g.shape(z0a).to_vec();
    for v in [z1a, z2a, z0b, z1b, z2b] {
        if g.shape(v) != shape.as_slice() {
            return Err(Error::Dimension {
                op: "triplet_loss",
                left: shape,
                right: g.shape(v).to_vec(),
            });
        }
    }
    let hinge = |g: &mut Graph, anchor: Var, near: Var, far: Var| -> Result<Var> {
        let dn = g.sub(anchor, near)?;
        let dn = g.row_norms(dn)?;
        let df = g.sub(anchor, far)?;
        let df = g.row_norms(df)?;
        let diff = g.sub(dn, df)?;
        let shifted = g.add_scalar(diff, alpha)?;
        let h = g.relu(shifted)?;
        g.mean(h)
    };
    let la = hinge(g, z0a, z1a, z2a)?;
    let lb = hinge(g, z0b, z2b, z1b)?;
    let sum = g.add(la, lb)?;
    let total = g.scale(sum, 0.5)?;
    Ok((la, lb, total))
}

/// Eager triplet loss for a single triplet of vectors.
pub fn triplet_loss_values(z: [&[f64]; 6], alpha: f64) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let mut vars = Vec::with_capacity(6);
    for v in z {
        vars.push(g.constant(Tensor::matrix(1, v.len(), v.to_vec())?));
    }
    let (la, lb, l) = triplet_loss(
        &mut g, vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], alpha,
    )?;
    Ok((g.value(la).item(), g.value(lb).item(), g.value(l).item()))
}

pub(crate) fn labels_to_classes(labels: &[u8]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&y| match y {
            0 | 1 => Ok(y as usize),
            other => Err(Error::Input(format!("label {other} outside {{0, 1}}"))),
        })
        .collect()
}

/// Per-aspect softmax cross-entropy through heads `head_a` / `head_b` bound
/// in `heads`. Returns `(L_a, L_b, (L_a + L_b) / 2)`.
pub fn classification_loss(
    g: &mut Graph,
    heads: &Bound,
    za: Var,
    zb: Var,
    ya: &[u8],
    yb: &[u8],
) -> Result<(Var, Var, Var)> {
    let ya = labels_to_classes(ya)?;
    let yb = labels_to_classes(yb)?;
    let la = ClassifierHead::loss(g, heads, "head_a", za, &ya)?;
    let lb = ClassifierHead::loss(g, heads, "head_b", zb, &yb)?;
    let sum = g.add(la, lb)?;
    let total = g.scale(sum, 0.5)?;
    Ok((la, lb, total))
}

/// Forward value of the overlap loss: the binarized overlap count averaged
/// over masked sublayers.
pub fn overlap_loss(masks: &MaskPair) -> Result<f64> {
    let a = masks.binarized(crate::masking::Aspect::A);
    let b = masks.binarized(crate::masking::Aspect::B);
    let pairs: Vec<(&Tensor, &Tensor)> = a.iter().zip(&b).collect();
    masking::overlap_count(&pairs)
}

/// Scalar values of the individual loss terms on one minibatch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub triplet: f64,
    pub overlap: f64,
    pub classification: f64,
}

/// `lambda_trp * L_trp + lambda_ovl * L_ovl (+ lambda_cls * L_cls)`.
pub fn total_loss(parts: &LossParts, w: &LossWeights, labels_available: bool) -> f64 {
    let mut total = w.lambda_trp * parts.triplet + w.lambda_ovl * parts.overlap;
    if labels_available {
        total += w.lambda_cls * parts.classification;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplet_fixtures() {
        let zero = [0.0, 0.0];
        let far = [10.0, 0.0];
        let (la, _, _) =
            triplet_loss_values([&zero, &zero, &far, &zero, &zero, &zero], 2.0).unwrap();
        assert_eq!(la, 0.0);
        let (la, lb, l) =
            triplet_loss_values([&zero, &[1.0, 0.0], &[2.0, 0.0], &zero, &zero, &zero], 2.0)
                .unwrap();
        assert_eq!(la, 1.0);
        // all-equal b vectors sit exactly at the margin
        assert_eq!(lb, 2.0);
        assert_eq!(l, 1.5);
        assert_eq!(LossWeights::default().alpha, 2.0);
    }

    #[test]
    fn triplet_dimension_mismatch() {
        let err = triplet_loss_values(
            [
                &[0.0, 0.0],
                &[0.0],
                &[0.0, 0.0],
                &[0.0, 0.0],
                &[0.0, 0.0],
                &[0.0, 0.0],
            ],
            2.0,
        );
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn classification_rejects_bad_labels() {
        let mut g = Graph::new();
        let mut p = Params::new();
        let mut rng = crate::seed::rng(0);
        ClassifierHead::init(2, &mut rng).insert_into(&mut p, "head_a");
        ClassifierHead::init(2, &mut rng).insert_into(&mut p, "head_b");
        let bound = p.bind(&mut g, true);
        let z = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            classification_loss(&mut g, &bound, z, z, &[2], &[0]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn total_loss_fixtures() {
        let parts = LossParts {
            triplet: 1.25,
            overlap: 40.0,
            classification: 0.5,
        };
        let zero = LossWeights {
            lambda_trp: 0.0,
            lambda_ovl: 0.0,
            lambda_cls: 0.0,
            alpha: 2.0,
        };
        assert_eq!(total_loss(&parts, &zero, true), 0.0);
        let trp_only = LossWeights {
            lambda_trp: 1.0,
            ..zero
        };
        assert_eq!(total_loss(&parts, &trp_only, true), 1.25);
        let w = LossWeights::default();
        assert_eq!(total_loss(&parts, &w, false), 1.25 + 0.04);
    }

    #[test]
    fn weights_validation_lists_every_problem() {
        let w = LossWeights {
            lambda_trp: -1.0,
            lambda_ovl: f64::NAN,
            lambda_cls: 1.0,
            alpha: 0.0,
        };
        assert_eq!(w.problems().len(), 3);
    }
}
