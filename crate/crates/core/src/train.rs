//! Training loops: mask learning on a frozen encoder, the finetuned arm and
//! head-only training for the untuned arm.
//!
//! Every minibatch is a set of triplets. Its `3B` sequences are stacked as
//! anchors, then `x1` rows, then `x2` rows, and the classification loss is
//! applied to all of them.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{build_triplets, LabeledExample, Triplet};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, ClassifierHead, LossParts, LossWeights};
use crate::masking::{self, Aspect, MaskPair};
use crate::optim::Adam;
use crate::params::Params;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub mask_epochs: usize,
    pub finetune_epochs: usize,
    /// Head-only training epochs of the untuned arm.
    pub head_epochs: usize,
    /// Step size of the straight-through mask update.
    pub lr_masks: f64,
    /// Adam learning rate for encoder weights (pretraining and finetuning).
    pub lr_weights: f64,
    /// Adam learning rate for the classifier heads.
    pub lr_heads: f64,
    /// Triplets per minibatch.
    pub batch_size: usize,
    /// Freshly sampled triplets per epoch.
    pub triplets_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 20,
            mask_epochs: 30,
            finetune_epochs: 30,
            head_epochs: 30,
            lr_masks: 0.1,
            lr_weights: 1e-3,
            lr_heads: 1e-2,
            batch_size: 32,
            triplets_per_epoch: 512,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("lr_masks", self.lr_masks),
            ("lr_weights", self.lr_weights),
            ("lr_heads", self.lr_heads),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("train.{name} must be positive, got {v}"));
            }
        }
        if self.batch_size == 0 {
            out.push("train.batch_size must be positive".into());
        }
        if self.triplets_per_epoch == 0 {
            out.push("train.triplets_per_epoch must be positive".into());
        }
        out
    }

    /// Number of optimizer steps in one epoch.
    pub fn steps_per_epoch(&self) -> usize {
        self.triplets_per_epoch.div_ceil(self.batch_size.max(1))
    }
}

/// Mean loss terms per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<LossParts>,
}

/// Fresh `head_a` and `head_b` classifiers.
pub fn init_heads(d_model: usize, seed: u64) -> Params {
    let mut rng = seed::rng(seed);
    let mut heads = Params::new();
    ClassifierHead::init(d_model, &mut rng).insert_into(&mut heads, "head_a");
    ClassifierHead::init(d_model, &mut rng).insert_into(&mut heads, "head_b");
    heads
}

fn epoch_batches(
    data: &[LabeledExample],
    cfg: &TrainConfig,
    rng: &mut seed::Rng,
) -> Result<Vec<Vec<Triplet>>> {
    let triplets = build_triplets(data, cfg.triplets_per_epoch, rng.gen())?;
    Ok(triplets
        .chunks(cfg.batch_size.max(1))
        .map(<[Triplet]>::to_vec)
        .collect())
}

fn stacked_indices(batch: &[Triplet]) -> Vec<usize> {
    let mut idx: Vec<usize> = batch.iter().map(|t| t.i0).collect();
    idx.extend(batch.iter().map(|t| t.i1));
    idx.extend(batch.iter().map(|t| t.i2));
    idx
}

/// Splits stacked `[3B, d]` representations into anchor, `x1` and `x2` rows.
fn split3(g: &mut Graph, z: Var, b: usize) -> Result<(Var, Var, Var)> {
    let z0 = g.gather_rows(z, &(0..b).collect::<Vec<_>>())?;
    let z1 = g.gather_rows(z, &(b..2 * b).collect::<Vec<_>>())?;
    let z2 = g.gather_rows(z, &(2 * b..3 * b).collect::<Vec<_>>())?;
    Ok((z0, z1, z2))
}

/// Builds `lambda_trp * L_trp + lambda_cls * L_cls` for one minibatch.
#[allow(clippy::too_many_arguments)]
fn objective(
    g: &mut Graph,
    heads: &crate::params::Bound,
    za: Var,
    zb: Var,
    b: usize,
    ya: &[u8],
    yb: &[u8],
    weights: &LossWeights,
) -> Result<(Var, f64, f64)> {
    let (z0a, z1a, z2a) = split3(g, za, b)?;
    let (z0b, z1b, z2b) = split3(g, zb, b)?;
    let (_, _, trp) = losses::triplet_loss(g, z0a, z1a, z2a, z0b, z1b, z2b, weights.alpha)?;
    let (_, _, cls) = losses::classification_loss(g, heads, za, zb, ya, yb)?;
    let t = g.scale(trp, weights.lambda_trp)?;
    let c = g.scale(cls, weights.lambda_cls)?;
    let loss = g.add(t, c)?;
    Ok((loss, g.value(trp).item(), g.value(cls).item()))
}

/// Hidden states of every example entering the first masked layer,
/// `[N*seq, d]`. These do not depend on the masks.
pub fn cache_prefix(enc: &Encoder, data: &[LabeledExample]) -> Result<Tensor> {
    let upto = enc.config().first_masked_layer();
    let seq = data
        .first()
        .map(|e| e.tokens.len())
        .ok_or_else(|| Error::Input("empty dataset".into()))?;
    let mut out = Vec::with_capacity(data.len() * seq * enc.config().d_model);
    for chunk in data.chunks(64) {
        let batch: Vec<&[usize]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
        out.extend_from_slice(enc.hidden_states(&batch, upto)?.data());
    }
    Tensor::new(vec![data.len() * seq, enc.config().d_model], out)
}

fn gather_cached(cache: &Tensor, seq: usize, idx: &[usize]) -> Result<Tensor> {
    let d = cache.shape()[1];
    let mut rows = Vec::with_capacity(idx.len() * seq * d);
    for &i in idx {
        rows.extend_from_slice(&cache.data()[i * seq * d..(i + 1) * seq * d]);
    }
    Tensor::new(vec![idx.len() * seq, d], rows)
}

/// Learns both aspects' masks (straight-through updates) and the two heads
/// (Adam) on a frozen encoder. Each step runs one masked forward pass per
/// aspect over the same frozen weights.
#[allow(clippy::too_many_arguments)]
pub fn train_masks(
    enc: &Encoder,
    masks: &mut MaskPair,
    heads: &mut Params,
    data: &[LabeledExample],
    weights: &LossWeights,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    if !enc.is_frozen() {
        return Err(Error::State("mask training needs a frozen encoder".into()));
    }
    let cache = cache_prefix(enc, data)?;
    let seq = data[0].tokens.len();
    let from = enc.config().first_masked_layer();
    let ovl_scale = weights.lambda_ovl / masks.slots.len().max(1) as f64;
    let mut rng = seed::rng(seed);
    let mut opt = Adam::new(cfg.lr_heads);
    let mut log = TrainLog::default();
    for _ in 0..cfg.mask_epochs {
        let mut sums = LossParts::default();
        let batches = epoch_batches(data, cfg, &mut rng)?;
        for batch in &batches {
            let idx = stacked_indices(batch);
            let ya: Vec<u8> = idx.iter().map(|&i| data[i].y_a).collect();
            let yb: Vec<u8> = idx.iter().map(|&i| data[i].y_b).collect();
            let mut g = Graph::new();
            let p = enc.params().bind(&mut g, false);
            let hp = heads.bind(&mut g, true);
            let h = g.constant(gather_cached(&cache, seq, &idx)?);
            let ma = masks.bind(&mut g, Aspect::A, true);
            let mb = masks.bind(&mut g, Aspect::B, true);
            let za = enc.forward_from(&mut g, &p, h, seq, from, Some(&ma))?;
            let zb = enc.forward_from(&mut g, &p, h, seq, from, Some(&mb))?;
            let (loss, trp, cls) = objective(&mut g, &hp, za, zb, batch.len(), &ya, &yb, weights)?;
            g.backward(loss)?;
            sums.triplet += trp;
            sums.classification += cls;
            sums.overlap += losses::overlap_loss(masks)?;

            let ga = ma.grads(&g);
            let gb = mb.grads(&g);
            let bin_a = masks.binarized(Aspect::A);
            let bin_b = masks.binarized(Aspect::B);
            for (k, slot) in masks.slots.iter_mut().enumerate() {
                let ovl = masking::overlap_surrogate_grad(&bin_a[k], &bin_b[k]);
                let step_a: Vec<f64> = ga[k]
                    .iter()
                    .zip(&ovl)
                    .map(|(g, o)| g + ovl_scale * o)
                    .collect();
                let step_b: Vec<f64> = gb[k]
                    .iter()
                    .zip(&ovl)
                    .map(|(g, o)| g + ovl_scale * o)
                    .collect();
                masking::straight_through_update(&mut slot.a, &step_a, cfg.lr_masks)?;
                masking::straight_through_update(&mut slot.b, &step_b, cfg.lr_masks)?;
            }
            opt.step(heads, &hp.grads(&g))?;
        }
        let n = batches.len().max(1) as f64;
        log.epochs.push(LossParts {
            triplet: sums.triplet / n,
            overlap: sums.overlap / n,
            classification: sums.classification / n,
        });
    }
    enc.verify_frozen()?;
    Ok(log)
}

/// Binary keep masks by weight name; pruned entries are held at zero.
pub type KeepMasks = BTreeMap<String, Tensor>;

/// Minimizes the triplet and classification losses with respect to all
/// encoder weights and both heads. The two aspect representations are the
/// same unmasked `z`. With `keep`, pruned weights stay zero after every step.
/// `max_steps` caps the total number of optimizer steps.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    enc: &mut Encoder,
    heads: &mut Params,
    data: &[LabeledExample],
    weights: &LossWeights,
    cfg: &TrainConfig,
    epochs: usize,
    max_steps: Option<usize>,
    keep: Option<&KeepMasks>,
    seed: u64,
) -> Result<TrainLog> {
    if enc.is_frozen() {
        return Err(Error::State("cannot finetune a frozen encoder".into()));
    }
    let mut rng = seed::rng(seed);
    let mut opt_enc = Adam::new(cfg.lr_weights);
    let mut opt_heads = Adam::new(cfg.lr_heads);
    let mut log = TrainLog::default();
    let mut steps = 0usize;
    'epochs: for _ in 0..epochs {
        let mut sums = LossParts::default();
        let mut n = 0usize;
        let batches = epoch_batches(data, cfg, &mut rng)?;
        for batch in &batches {
            if max_steps.is_some_and(|m| steps >= m) {
                if n > 0 {
                    log.epochs.push(LossParts {
                        triplet: sums.triplet / n as f64,
                        overlap: 0.0,
                        classification: sums.classification / n as f64,
                    });
                }
                break 'epochs;
            }
            let idx = stacked_indices(batch);
            let tokens: Vec<&[usize]> = idx.iter().map(|&i| data[i].tokens.as_slice()).collect();
            let ya: Vec<u8> = idx.iter().map(|&i| data[i].y_a).collect();
            let yb: Vec<u8> = idx.iter().map(|&i| data[i].y_b).collect();
            let mut g = Graph::new();
            let p = enc.params().bind(&mut g, true);
            let hp = heads.bind(&mut g, true);
            let z = enc.forward(&mut g, &p, &tokens, None)?;
            let (loss, trp, cls) = objective(&mut g, &hp, z, z, batch.len(), &ya, &yb, weights)?;
            g.backward(loss)?;
            sums.triplet += trp;
            sums.classification += cls;
            n += 1;
            steps += 1;
            let grads = p.grads(&g);
            let params = enc.params_mut()?;
            opt_enc.step(params, &grads)?;
            if let Some(keep) = keep {
                apply_keep(params, keep)?;
            }
            opt_heads.step(heads, &hp.grads(&g))?;
        }
        log.epochs.push(LossParts {
            triplet: sums.triplet / n.max(1) as f64,
            overlap: 0.0,
            classification: sums.classification / n.max(1) as f64,
        });
    }
    Ok(log)
}

/// Multiplies each kept weight tensor by its binary keep mask.
pub fn apply_keep(params: &mut Params, keep: &KeepMasks) -> Result<()> {
    for (name, mask) in keep {
        let w = params.get_mut(name)?;
        if w.shape() != mask.shape() {
            return Err(Error::Dimension {
                op: "apply_keep",
                left: w.shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        for (x, m) in w.data_mut().iter_mut().zip(mask.data()) {
            *x *= m;
        }
    }
    Ok(())
}

/// Trains both heads with cross-entropy on fixed representations.
/// `reps_a` / `reps_b` hold one row per example.
pub fn train_heads(
    heads: &mut Params,
    reps_a: &[Vec<f64>],
    reps_b: &[Vec<f64>],
    data: &[LabeledExample],
    epochs: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.is_empty() || reps_a.len() != data.len() || reps_b.len() != data.len() {
        return Err(Error::Input(
            "representations and labels must be non-empty and aligned".into(),
        ));
    }
    let mut rng = seed::rng(seed);
    let mut opt = Adam::new(cfg.lr_heads);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses_per_epoch = Vec::with_capacity(epochs);
    let bs = (cfg.batch_size * 3).max(1);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut n = 0usize;
        for idx in order.chunks(bs) {
            let rows = |reps: &[Vec<f64>]| {
                Tensor::from_rows(&idx.iter().map(|&i| reps[i].clone()).collect::<Vec<_>>())
            };
            let ya: Vec<u8> = idx.iter().map(|&i| data[i].y_a).collect();
            let yb: Vec<u8> = idx.iter().map(|&i| data[i].y_b).collect();
            let mut g = Graph::new();
            let hp = heads.bind(&mut g, true);
            let za = g.constant(rows(reps_a)?);
            let zb = g.constant(rows(reps_b)?);
            let (_, _, loss) = losses::classification_loss(&mut g, &hp, za, zb, &ya, &yb)?;
            g.backward(loss)?;
            total += g.value(loss).item();
            n += 1;
            opt.step(heads, &hp.grads(&g))?;
        }
        losses_per_epoch.push(total / n.max(1) as f64);
    }
    Ok(losses_per_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenConfig, JointDistribution};
    use crate::encoder::EncoderConfig;
    use crate::masking::{init_masks, InitPolicy, MaskMode};

    fn tiny() -> (Encoder, Vec<LabeledExample>) {
        let cfg = EncoderConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 8,
            mask_last_layers: 1,
            ..EncoderConfig::default()
        };
        let gen = GenConfig {
            seq_len: 6,
            ..GenConfig::default()
        };
        let data = generate(&gen, &JointDistribution::uncorrelated(), 40, 3).unwrap();
        (Encoder::new(cfg).unwrap(), data)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            mask_epochs: 2,
            batch_size: 4,
            triplets_per_epoch: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mask_training_requires_frozen_encoder_and_keeps_weights() {
        let (mut enc, data) = tiny();
        let mut heads = init_heads(8, 1);
        let mut masks = init_masks(
            &enc.mask_shapes(MaskMode::Weights),
            MaskMode::Weights,
            0.5,
            &InitPolicy::AllOn,
            2,
        )
        .unwrap();
        let w = LossWeights::default();
        assert!(matches!(
            train_masks(&enc, &mut masks, &mut heads, &data, &w, &small_cfg(), 0),
            Err(Error::State(_))
        ));
        enc.freeze();
        let before = enc.checksum();
        let start = masks.clone();
        let log = train_masks(&enc, &mut masks, &mut heads, &data, &w, &small_cfg(), 0).unwrap();
        assert_eq!(log.epochs.len(), 2);
        assert_eq!(enc.checksum(), before);
        assert_ne!(masks, start);
        for slot in &masks.slots {
            assert!(slot
                .a
                .data()
                .iter()
                .chain(slot.b.data())
                .all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn cached_prefix_matches_full_forward() {
        let (mut enc, data) = tiny();
        enc.freeze();
        let masks = init_masks(
            &enc.mask_shapes(MaskMode::Activations),
            MaskMode::Activations,
            0.5,
            &InitPolicy::AllOn,
            2,
        )
        .unwrap();
        let cache = cache_prefix(&enc, &data[..3]).unwrap();
        let mut g = Graph::new();
        let p = enc.params().bind(&mut g, false);
        let bm = masks.bind(&mut g, Aspect::B, false);
        let h = g.constant(cache);
        let z = enc.forward_from(&mut g, &p, h, 6, 1, Some(&bm)).unwrap();
        let tokens: Vec<&[usize]> = data[..3].iter().map(|e| e.tokens.as_slice()).collect();
        let direct = enc
            .encode_batch(&tokens, Some(&masks), crate::masking::MaskSelector::AspectB)
            .unwrap();
        for (r, row) in direct.iter().enumerate() {
            assert_eq!(g.value(z).row(r), row.as_slice());
        }
    }

    #[test]
    fn finetune_changes_weights_and_respects_keep_and_step_cap() {
        let (mut enc, data) = tiny();
        let mut heads = init_heads(8, 1);
        let before = enc.checksum();
        let name = "layers.01.ff.input.weight".to_string();
        let shape = enc.params().get(&name).unwrap().shape().to_vec();
        let mut keep = KeepMasks::new();
        let mut km = Tensor::ones(&shape);
        km.data_mut()[0] = 0.0;
        keep.insert(name.clone(), km);
        let log = finetune(
            &mut enc,
            &mut heads,
            &data,
            &LossWeights::default(),
            &small_cfg(),
            5,
            Some(3),
            Some(&keep),
            0,
        )
        .unwrap();
        assert_ne!(enc.checksum(), before);
        assert_eq!(enc.params().get(&name).unwrap().data()[0], 0.0);
        assert_eq!(log.epochs.len(), 2);
        enc.freeze();
        assert!(matches!(
            finetune(
                &mut enc,
                &mut heads,
                &data,
                &LossWeights::default(),
                &small_cfg(),
                1,
                None,
                None,
                0
            ),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn head_training_reduces_loss_on_separable_reps() {
        let (_, data) = tiny();
        let reps_a: Vec<Vec<f64>> = data
            .iter()
            .map(|e| vec![e.y_a as f64 * 2.0 - 1.0, 0.0])
            .collect();
        let reps_b: Vec<Vec<f64>> = data
            .iter()
            .map(|e| vec![0.0, e.y_b as f64 * 2.0 - 1.0])
            .collect();
        let mut heads = init_heads(2, 0);
        let curve = train_heads(
            &mut heads,
            &reps_a,
            &reps_b,
            &data,
            30,
            &TrainConfig::default(),
            0,
        )
        .unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
    }
}
