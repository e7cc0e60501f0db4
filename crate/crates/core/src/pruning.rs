//! One-shot global magnitude pruning and the prune-then-mask pipeline.

use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::masking::{init_masks, InitPolicy, MaskMode, MaskPair};
use crate::params::Params;
use crate::tensor::Tensor;
use crate::train::{self, KeepMasks, TrainConfig, TrainLog};

/// Sparsity levels of the default sweep.
pub const DEFAULT_LEVELS: [f64; 8] = [0.0, 0.2, 0.4, 0.6, 0.8, 0.85, 0.9, 0.95];

#[derive(Clone, Debug, PartialEq)]
pub struct PruneResult {
    /// Binary keep mask per pruned tensor, same shape as the tensor.
    pub keep: KeepMasks,
    pub achieved_sparsity: f64,
    /// Largest pruned magnitude; 0 when nothing was pruned.
    pub magnitude_threshold: f64,
    pub pruned: usize,
    pub total: usize,
}

/// Prunes the `round(fraction * total)` smallest-magnitude weights across all
/// tensors. Ties in magnitude are broken by tensor name, then flat index,
/// both ascending.
pub fn magnitude_prune(weights: &Params, fraction: f64) -> Result<PruneResult> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Input(format!(
            "prune fraction must be in [0, 1), got {fraction}"
        )));
    }
    let mut entries: Vec<(f64, &str, usize)> = Vec::with_capacity(weights.numel());
    for (name, t) in weights.iter() {
        entries.extend(t.data().iter().enumerate().map(|(i, w)| (w.abs(), name, i)));
    }
    let total = entries.len();
    let m = (fraction * total as f64).round() as usize;
    entries.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(y.1)).then(x.2.cmp(&y.2)));
    let mut keep: KeepMasks = weights
        .iter()
        .map(|(name, t)| (name.to_string(), Tensor::ones(t.shape())))
        .collect();
    for &(_, name, i) in &entries[..m] {
        keep.get_mut(name).expect("tensor present").data_mut()[i] = 0.0;
    }
    Ok(PruneResult {
        keep,
        achieved_sparsity: if total == 0 {
            0.0
        } else {
            m as f64 / total as f64
        },
        magnitude_threshold: if m == 0 { 0.0 } else { entries[m - 1].0 },
        pruned: m,
        total,
    })
}

/// The encoder's prunable tensors: the weights of its maskable sublayers.
pub fn prunable_weights(enc: &Encoder) -> Result<Params> {
    let mut out = Params::new();
    for (name, _) in enc.maskable_sublayers() {
        out.insert(name.clone(), enc.params().get(&name)?.clone());
    }
    Ok(out)
}

/// Magnitude-prunes a copy of `enc`, zeroing the pruned weights. The copy is
/// left unfrozen.
pub fn prune_encoder(enc: &Encoder, fraction: f64) -> Result<(Encoder, PruneResult)> {
    let result = magnitude_prune(&prunable_weights(enc)?, fraction)?;
    let mut pruned = enc.clone();
    train::apply_keep(pruned.params_mut()?, &result.keep)?;
    Ok((pruned, result))
}

/// Outcome of [`prune_then_mask`].
#[derive(Clone, Debug)]
pub struct PruneThenMask {
    /// The finetuned, pruned and frozen encoder.
    pub encoder: Encoder,
    pub masks: MaskPair,
    pub heads: Params,
    pub prune: PruneResult,
    /// Mask sparsity after refinement, averaged over both aspects.
    pub post_refinement_sparsity: f64,
    pub finetune_log: TrainLog,
    pub mask_log: TrainLog,
}

/// Seeds for the stages of [`prune_then_mask`].
#[derive(Clone, Copy, Debug)]
pub struct StageSeeds {
    pub finetune: u64,
    pub masks: u64,
    pub heads: u64,
    pub train: u64,
}

/// Finetunes all weights for `k_iters` steps, prunes to `fraction`, freezes
/// the pruned weights, starts both aspects' masks from the keep mask and
/// refines them with mask training.
#[allow(clippy::too_many_arguments)]
pub fn prune_then_mask(
    enc: &Encoder,
    data: &[LabeledExample],
    weights: &LossWeights,
    cfg: &TrainConfig,
    k_iters: usize,
    fraction: f64,
    tau: f64,
    seeds: StageSeeds,
) -> Result<PruneThenMask> {
    if !enc.is_pretrained() {
        return Err(Error::State(
            "prune-then-mask needs a pretrained encoder".into(),
        ));
    }
    let mut tuned = enc.clone();
    let finetune_log = if k_iters > 0 {
        let mut scratch_heads = train::init_heads(enc.config().d_model, seeds.heads);
        let epochs = k_iters.div_ceil(cfg.steps_per_epoch());
        train::finetune(
            &mut tuned,
            &mut scratch_heads,
            data,
            weights,
            cfg,
            epochs,
            Some(k_iters),
            None,
            seeds.finetune,
        )?
    } else {
        TrainLog::default()
    };
    let (mut pruned, prune) = prune_encoder(&tuned, fraction)?;
    pruned.freeze();
    let shapes = pruned.mask_shapes(MaskMode::Weights);
    let keep: Params = prune
        .keep
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let mut masks = init_masks(
        &shapes,
        MaskMode::Weights,
        tau,
        &InitPolicy::FromKeepMask(keep),
        seeds.masks,
    )?;
    let mut heads = train::init_heads(enc.config().d_model, seeds.heads);
    let mask_log = train::train_masks(
        &pruned,
        &mut masks,
        &mut heads,
        data,
        weights,
        cfg,
        seeds.train,
    )?;
    Ok(PruneThenMask {
        post_refinement_sparsity: masks.sparsity(),
        encoder: pruned,
        masks,
        heads,
        prune,
        finetune_log,
        mask_log,
    })
}

/// Arms of the sparsity sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneArm {
    PrunedUntuned,
    PrunedFinetuned,
    PrunedMasked,
}

impl PruneArm {
    pub const ALL: [PruneArm; 3] = [
        Self::PrunedUntuned,
        Self::PrunedFinetuned,
        Self::PrunedMasked,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::PrunedUntuned => "pruned_untuned",
            Self::PrunedFinetuned => "pruned_finetuned",
            Self::PrunedMasked => "pruned_masked",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(tensors: &[(&str, Vec<f64>)]) -> Params {
        let mut p = Params::new();
        for (name, data) in tensors {
            p.insert(*name, Tensor::vector(data.clone()).unwrap());
        }
        p
    }

    /// Prunes exactly the elements with fewer than `m` elements ranked
    /// before them, by pairwise comparison.
    fn pairwise_oracle(p: &Params, fraction: f64) -> Vec<(String, usize)> {
        let all: Vec<(f64, String, usize)> = p
            .iter()
            .flat_map(|(n, t)| {
                t.data()
                    .iter()
                    .enumerate()
                    .map(move |(i, w)| (w.abs(), n.to_string(), i))
            })
            .collect();
        let m = (fraction * all.len() as f64).round() as usize;
        all.iter()
            .filter(|x| {
                let before = all
                    .iter()
                    .filter(|y| y.0 < x.0 || (y.0 == x.0 && (&y.1, y.2) < (&x.1, x.2)))
                    .count();
                before < m
            })
            .map(|x| (x.1.clone(), x.2))
            .collect()
    }

    fn pruned_set(r: &PruneResult) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (name, k) in &r.keep {
            for (i, v) in k.data().iter().enumerate() {
                if *v == 0.0 {
                    out.push((name.clone(), i));
                }
            }
        }
        out
    }

    #[test]
    fn hand_cases() {
        let p = params(&[("w", vec![3.0, -1.0, 2.0])]);
        let r = magnitude_prune(&p, 1.0 / 3.0).unwrap();
        assert_eq!(r.keep["w"].data(), &[1.0, 0.0, 1.0]);
        assert_eq!(r.magnitude_threshold, 1.0);
        let r = magnitude_prune(&p, 0.0).unwrap();
        assert_eq!(r.pruned, 0);
        assert!(r.keep["w"].data().iter().all(|&v| v == 1.0));
        assert!(matches!(magnitude_prune(&p, 1.0), Err(Error::Input(_))));
    }

    #[test]
    fn ties_break_by_name_then_index() {
        let p = params(&[("b", vec![1.0, 1.0]), ("a", vec![5.0, -1.0, 1.0])]);
        let r = magnitude_prune(&p, 0.6).unwrap();
        assert_eq!(
            pruned_set(&r),
            vec![("a".into(), 1), ("a".into(), 2), ("b".into(), 0)]
        );
    }

    proptest! {
        #[test]
        fn matches_pairwise_oracle(
            a in proptest::collection::vec(-3i32..4, 1..20),
            b in proptest::collection::vec(-3i32..4, 1..20),
            fraction in 0.0f64..0.99,
        ) {
            let p = params(&[("x", a.iter().map(|&v| v as f64 / 2.0).collect()), ("y", b.iter().map(|&v| v as f64 / 2.0).collect())]);
            let r = magnitude_prune(&p, fraction).unwrap();
            let mut expected = pairwise_oracle(&p, fraction);
            expected.sort();
            let mut got = pruned_set(&r);
            got.sort();
            prop_assert_eq!(got, expected);
            prop_assert_eq!(r.pruned, (fraction * r.total as f64).round() as usize);
        }
    }
}
