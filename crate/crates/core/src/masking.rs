//! Continuous masks, threshold binarization and straight-through updates.
//!
//! Each maskable sublayer owns a pair of continuous masks, one per aspect.
//! The forward pass only ever sees the binarized mask `M* = 1[M >= tau]`;
//! the gradient with respect to `M*` is applied to the continuous `M`
//! unchanged (identity backward through the threshold), followed by a clamp
//! to `[0, 1]`.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::Params;
use crate::seed;
use crate::tensor::Tensor;

/// Where a mask is applied inside a linear sublayer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// `h' = h · (W ∘ M*) + bias`
    #[default]
    Weights,
    /// `h' = (h ∘ M*) · W + bias`
    Activations,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Weights => "weights",
            MaskMode::Activations => "activations",
        }
    }
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weights" => Ok(MaskMode::Weights),
            "activations" => Ok(MaskMode::Activations),
            other => Err(Error::Input(format!("unknown mask mode {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aspect {
    A,
    B,
}

impl Aspect {
    pub const BOTH: [Aspect; 2] = [Aspect::A, Aspect::B];

    pub fn as_str(self) -> &'static str {
        match self {
            Aspect::A => "a",
            Aspect::B => "b",
        }
    }

    pub fn other(self) -> Aspect {
        match self {
            Aspect::A => Aspect::B,
            Aspect::B => Aspect::A,
        }
    }
}

/// Which mask (if any) an encoder pass applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSelector {
    None,
    AspectA,
    AspectB,
}

impl MaskSelector {
    pub fn aspect(self) -> Option<Aspect> {
        match self {
            MaskSelector::None => None,
            MaskSelector::AspectA => Some(Aspect::A),
            MaskSelector::AspectB => Some(Aspect::B),
        }
    }
}

impl From<Aspect> for MaskSelector {
    fn from(a: Aspect) -> Self {
        match a {
            Aspect::A => MaskSelector::AspectA,
            Aspect::B => MaskSelector::AspectB,
        }
    }
}

/// Shape of one maskable sublayer's mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskShape {
    /// Name of the masked weight parameter, e.g. `layers.03.ff.input.weight`.
    pub sublayer: String,
    pub layer: usize,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSlot {
    pub sublayer: String,
    pub layer: usize,
    pub a: Tensor,
    pub b: Tensor,
}

impl MaskSlot {
    pub fn get(&self, aspect: Aspect) -> &Tensor {
        match aspect {
            Aspect::A => &self.a,
            Aspect::B => &self.b,
        }
    }

    pub fn get_mut(&mut self, aspect: Aspect) -> &mut Tensor {
        match aspect {
            Aspect::A => &mut self.a,
            Aspect::B => &mut self.b,
        }
    }
}

/// Continuous per-aspect masks over every maskable sublayer.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub mode: MaskMode,
    pub tau: f64,
    pub slots: Vec<MaskSlot>,
}

impl MaskPair {
    pub fn slot(&self, sublayer: &str) -> Option<&MaskSlot> {
        self.slots.iter().find(|s| s.sublayer == sublayer)
    }

    /// Binarized mask for every slot of one aspect, in slot order.
    pub fn binarized(&self, aspect: Aspect) -> Vec<Tensor> {
        self.slots
            .iter()
            .map(|s| binarize(s.get(aspect), self.tau))
            .collect()
    }

    /// Records the binarized masks of `aspect` as graph leaves.
    pub fn bind(&self, g: &mut Graph, aspect: Aspect, trainable: bool) -> BoundMasks {
        let vars = self
            .slots
            .iter()
            .map(|s| {
                let bin = binarize(s.get(aspect), self.tau).with_requires_grad(trainable);
                (s.sublayer.clone(), g.leaf(bin))
            })
            .collect();
        BoundMasks {
            mode: self.mode,
            vars,
        }
    }

    pub fn total_elements(&self) -> usize {
        self.slots.iter().map(|s| s.a.numel()).sum()
    }

    /// Fraction of all mask elements that are on in both binarized masks.
    pub fn overlap_fraction(&self) -> f64 {
        let stats = mask_stats(self);
        let overlap: usize = stats.iter().map(|s| s.overlap_count).sum();
        overlap as f64 / self.total_elements().max(1) as f64
    }

    /// Fraction of mask elements that are off, averaged over both aspects.
    pub fn sparsity(&self) -> f64 {
        let stats = mask_stats(self);
        let total: usize = stats.iter().map(|s| s.total_elements).sum();
        let on: f64 = stats
            .iter()
            .map(|s| (s.fraction_nonzero_a + s.fraction_nonzero_b) * s.total_elements as f64 / 2.0)
            .sum();
        1.0 - on / total.max(1) as f64
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Params::new();
        let mut layers = Vec::new();
        for s in &self.slots {
            tensors.insert(format!("a.{}", s.sublayer), s.a.clone());
            tensors.insert(format!("b.{}", s.sublayer), s.b.clone());
            layers.push(format!("{}={}", s.sublayer, s.layer));
        }
        Checkpoint::new(tensors)
            .with_meta("kind", "masks")
            .with_meta("mode", self.mode.as_str())
            .with_meta("tau", format!("{}", self.tau))
            .with_meta("slots", layers.join(","))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mode = ck.meta("mode")?.parse()?;
        let tau: f64 = ck
            .meta("tau")?
            .parse()
            .map_err(|e| Error::Input(format!("bad tau in mask checkpoint: {e}")))?;
        let mut slots = Vec::new();
        for entry in ck.meta("slots")?.split(',').filter(|e| !e.is_empty()) {
            let (sublayer, layer) = entry
                .split_once('=')
                .ok_or_else(|| Error::Input(format!("bad slot entry {entry}")))?;
            let layer = layer
                .parse()
                .map_err(|e| Error::Input(format!("bad layer in {entry}: {e}")))?;
            slots.push(MaskSlot {
                sublayer: sublayer.to_string(),
                layer,
                a: ck.tensors.get(&format!("a.{sublayer}"))?.clone(),
                b: ck.tensors.get(&format!("b.{sublayer}"))?.clone(),
            });
        }
        Ok(Self { mode, tau, slots })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Binarized mask leaves recorded on a graph, keyed by sublayer.
#[derive(Clone, Debug)]
pub struct BoundMasks {
    pub mode: MaskMode,
    vars: Vec<(String, Var)>,
}

impl BoundMasks {
    pub fn get(&self, sublayer: &str) -> Option<Var> {
        self.vars
            .iter()
            .find(|(name, _)| name == sublayer)
            .map(|&(_, v)| v)
    }

    /// Gradient with respect to each binarized mask, in slot order.
    pub fn grads(&self, g: &Graph) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&(_, v)| {
                g.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
            })
            .collect()
    }
}

/// `M*_ij = 1` iff `M_ij >= tau`.
pub fn binarize(m: &Tensor, tau: f64) -> Tensor {
    let data = m
        .data()
        .iter()
        .map(|&v| if v >= tau { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(m.shape().to_vec(), data).expect("same shape")
}

/// Expected mask shape for a sublayer with weight shape `[d_in, d_out]`.
pub fn mask_shape_for(weight_shape: &[usize], mode: MaskMode) -> Vec<usize> {
    match mode {
        MaskMode::Weights => weight_shape.to_vec(),
        MaskMode::Activations => vec![weight_shape[0]],
    }
}

/// Linear sublayer with an optional binarized mask. The bias is never masked.
pub fn masked_linear(
    g: &mut Graph,
    h: Var,
    weight: Var,
    bias: Var,
    mask: Option<Var>,
    mode: MaskMode,
) -> Result<Var> {
    let Some(mask) = mask else {
        let out = g.matmul(h, weight)?;
        return g.add(out, bias);
    };
    let expected = mask_shape_for(g.shape(weight), mode);
    if g.shape(mask) != expected.as_slice() {
        return Err(Error::Dimension {
            op: "masked_linear",
            left: g.shape(weight).to_vec(),
            right: g.shape(mask).to_vec(),
        });
    }
    let out = match mode {
        MaskMode::Weights => {
            let w = g.hadamard(weight, mask)?;
            g.matmul(h, w)?
        }
        MaskMode::Activations => {
            let masked = g.hadamard(h, mask)?;
            g.matmul(masked, weight)?
        }
    };
    g.add(out, bias)
}

/// Eager version of [`masked_linear`] for a binarized mask.
pub fn masked_linear_forward(
    h: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    mask: &Tensor,
    mode: MaskMode,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let (h, w, b, m) = (
        g.constant(h.clone()),
        g.constant(weight.clone()),
        g.constant(bias.clone()),
        g.constant(mask.clone()),
    );
    let out = masked_linear(&mut g, h, w, b, Some(m), mode)?;
    Ok(g.value(out).clone())
}

/// `M <- clamp(M - eta * grad, 0, 1)`, with `grad` taken at the binarized mask.
pub fn straight_through_update(m: &mut Tensor, grad: &[f64], eta: f64) -> Result<()> {
    if grad.len() != m.numel() {
        return Err(Error::Dimension {
            op: "straight_through_update",
            left: m.shape().to_vec(),
            right: vec![grad.len()],
        });
    }
    for (v, g) in m.data_mut().iter_mut().zip(grad) {
        *v = (*v - eta * g).clamp(0.0, 1.0);
    }
    Ok(())
}

/// Number of elements on in both binarized masks, averaged over layers:
/// `(1/|L|) Σ_l Σ_ij 1[M*a + M*b > 1]`.
pub fn overlap_count(layers: &[(&Tensor, &Tensor)]) -> Result<f64> {
    if layers.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0usize;
    for (a, b) in layers {
        total += overlap_in(a, b)?;
    }
    Ok(total as f64 / layers.len() as f64)
}

fn overlap_in(a: &Tensor, b: &Tensor) -> Result<usize> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op: "overlap_count",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .filter(|(x, y)| *x + *y > 1.0)
        .count())
}

/// Straight-through gradient of the overlap term for one slot: the
/// derivative of `max(M_a + M_b - 1, 0)` evaluated at the binarized masks,
/// which is the overlap indicator itself. Applies to both aspects.
pub fn overlap_surrogate_grad(a_bin: &Tensor, b_bin: &Tensor) -> Vec<f64> {
    a_bin
        .data()
        .iter()
        .zip(b_bin.data())
        .map(|(x, y)| {
            if (x + y - 1.0).max(0.0) > 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Per-sublayer mask statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub sublayer: String,
    pub layer: usize,
    pub fraction_nonzero_a: f64,
    pub fraction_nonzero_b: f64,
    pub overlap_count: usize,
    pub total_elements: usize,
}

pub fn mask_stats(masks: &MaskPair) -> Vec<MaskStats> {
    masks
        .slots
        .iter()
        .map(|s| {
            let a = binarize(&s.a, masks.tau);
            let b = binarize(&s.b, masks.tau);
            let n = a.numel();
            let on = |t: &Tensor| t.data().iter().filter(|&&v| v > 0.0).count();
            MaskStats {
                sublayer: s.sublayer.clone(),
                layer: s.layer,
                fraction_nonzero_a: on(&a) as f64 / n as f64,
                fraction_nonzero_b: on(&b) as f64 / n as f64,
                overlap_count: overlap_in(&a, &b).expect("paired masks share shapes"),
                total_elements: n,
            }
        })
        .collect()
}

/// How continuous masks start.
#[derive(Clone, Debug)]
pub enum InitPolicy {
    /// Every element starts just above the threshold.
    AllOn,
    /// Kept elements start just above the threshold, pruned ones at 0.
    /// Keyed by sublayer name, values in {0, 1}.
    FromKeepMask(Params),
}

/// Draws continuous masks. Active elements are uniform in
/// `[tau, min(1, tau + 0.1)]`.
pub fn init_masks(
    shapes: &[MaskShape],
    mode: MaskMode,
    tau: f64,
    policy: &InitPolicy,
    seed: u64,
) -> Result<MaskPair> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Input(format!("tau must be in (0, 1), got {tau}")));
    }
    let mut rng = seed::rng(seed);
    let hi = (tau + 0.1).min(1.0);
    let mut slots = Vec::with_capacity(shapes.len());
    for s in shapes {
        let keep = match policy {
            InitPolicy::AllOn => None,
            InitPolicy::FromKeepMask(keep) => {
                let k = keep.get(&s.sublayer)?;
                if k.shape() != s.shape.as_slice() {
                    return Err(Error::Dimension {
                        op: "init_masks",
                        left: s.shape.clone(),
                        right: k.shape().to_vec(),
                    });
                }
                Some(k)
            }
        };
        let mut draw = || -> Result<Tensor> {
            let n: usize = s.shape.iter().product();
            let data = (0..n)
                .map(|i| {
                    let u: f64 = rng.gen_range(tau..=hi);
                    match keep {
                        Some(k) if k.data()[i] < 0.5 => 0.0,
                        _ => u,
                    }
                })
                .collect();
            Tensor::new(s.shape.clone(), data)
        };
        let a = draw()?;
        let b = draw()?;
        slots.push(MaskSlot {
            sublayer: s.sublayer.clone(),
            layer: s.layer,
            a,
            b,
        });
    }
    Ok(MaskPair { mode, tau, slots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn binarize_fixtures() {
        assert_eq!(binarize(&t(&[0.4, 0.6]), 0.5).data(), &[0.0, 1.0]);
        assert_eq!(binarize(&t(&[0.5]), 0.5).data(), &[1.0]);
    }

    proptest! {
        #[test]
        fn binarize_matches_elementwise_oracle(values in prop::collection::vec(0.0f64..=1.0, 1..64), tau in 0.01f64..0.99) {
            let m = t(&values);
            let bin = binarize(&m, tau);
            for (v, b) in values.iter().zip(bin.data()) {
                prop_assert_eq!(*b, if *v >= tau { 1.0 } else { 0.0 });
            }
            // re-thresholding a binary mask is idempotent
            prop_assert_eq!(binarize(&bin, tau), bin);
        }
    }

    #[test]
    fn identity_mask_equals_unmasked_linear() {
        let h = Tensor::matrix(2, 3, vec![0.1, -0.7, 2.0, 1.5, 0.0, -0.3]).unwrap();
        let w = Tensor::matrix(3, 2, vec![0.2, 0.4, -1.1, 0.9, 0.5, 0.05]).unwrap();
        let b = t(&[0.3, -0.2]);
        let mut g = Graph::new();
        let (hv, wv, bv) = (
            g.constant(h.clone()),
            g.constant(w.clone()),
            g.constant(b.clone()),
        );
        let plain = masked_linear(&mut g, hv, wv, bv, None, MaskMode::Weights).unwrap();
        let plain = g.value(plain).clone();
        let ones_w =
            masked_linear_forward(&h, &w, &b, &Tensor::ones(&[3, 2]), MaskMode::Weights).unwrap();
        let ones_a =
            masked_linear_forward(&h, &w, &b, &Tensor::ones(&[3]), MaskMode::Activations).unwrap();
        assert_eq!(ones_w, plain);
        assert_eq!(ones_a, plain);
        let zeros =
            masked_linear_forward(&h, &w, &b, &Tensor::zeros(&[3, 2]), MaskMode::Weights).unwrap();
        assert_eq!(zeros.data(), &[0.3, -0.2, 0.3, -0.2]);
    }

    #[test]
    fn mask_shape_mismatch_is_rejected() {
        let h = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[3, 2]);
        let b = Tensor::zeros(&[2]);
        let err = masked_linear_forward(&h, &w, &b, &Tensor::ones(&[2, 3]), MaskMode::Weights);
        assert!(matches!(err, Err(Error::Dimension { .. })));
        let err = masked_linear_forward(&h, &w, &b, &Tensor::ones(&[2]), MaskMode::Activations);
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn straight_through_update_fixtures() {
        let mut m = t(&[0.3, 0.9]);
        straight_through_update(&mut m, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(m.data(), &[0.3, 0.9]);
        for _ in 0..20 {
            straight_through_update(&mut m, &[1.0, 1.0], 0.1).unwrap();
        }
        assert_eq!(m.data(), &[0.0, 0.0]);
        straight_through_update(&mut m, &[-50.0, 0.0], 0.1).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0]);
        assert!(straight_through_update(&mut m, &[1.0], 0.1).is_err());
    }

    #[test]
    fn overlap_fixtures() {
        let (a, b) = (t(&[1.0, 0.0]), t(&[0.0, 1.0]));
        assert_eq!(overlap_count(&[(&a, &b)]).unwrap(), 0.0);
        let ones = t(&[1.0, 1.0]);
        assert_eq!(overlap_count(&[(&ones, &ones)]).unwrap(), 2.0);
        let four = Tensor::ones(&[4]);
        let zero = Tensor::zeros(&[4]);
        assert_eq!(
            overlap_count(&[(&four, &four), (&four, &zero)]).unwrap(),
            2.0
        );
        assert!(overlap_count(&[(&a, &four)]).is_err());
        assert_eq!(
            overlap_surrogate_grad(&t(&[1.0, 1.0, 0.0]), &t(&[1.0, 0.0, 0.0])),
            vec![1.0, 0.0, 0.0]
        );
    }

    fn shapes() -> Vec<MaskShape> {
        vec![
            MaskShape {
                sublayer: "l.w1".into(),
                layer: 0,
                shape: vec![4, 5],
            },
            MaskShape {
                sublayer: "l.w2".into(),
                layer: 1,
                shape: vec![5, 2],
            },
        ]
    }

    #[test]
    fn all_on_init_binarizes_to_ones_and_is_seeded() {
        let m = init_masks(&shapes(), MaskMode::Weights, 0.5, &InitPolicy::AllOn, 3).unwrap();
        for s in &m.slots {
            assert!(binarize(&s.a, 0.5).data().iter().all(|&v| v == 1.0));
            assert!(s.a.data().iter().all(|&v| (0.5..=0.6).contains(&v)));
        }
        let again = init_masks(&shapes(), MaskMode::Weights, 0.5, &InitPolicy::AllOn, 3).unwrap();
        assert_eq!(m, again);
        let stats = mask_stats(&m);
        assert_eq!(stats[0].fraction_nonzero_a, 1.0);
        assert_eq!(stats[0].overlap_count, stats[0].total_elements);
        assert!(init_masks(&shapes(), MaskMode::Weights, 1.0, &InitPolicy::AllOn, 3).is_err());
    }

    #[test]
    fn keep_mask_init_reproduces_kept_fraction() {
        let shape = vec![10, 10];
        let mut keep = Params::new();
        let data = (0..100)
            .map(|i| if i % 5 == 0 { 1.0 } else { 0.0 })
            .collect();
        keep.insert("w", Tensor::new(shape.clone(), data).unwrap());
        let shapes = vec![MaskShape {
            sublayer: "w".into(),
            layer: 0,
            shape,
        }];
        let m = init_masks(
            &shapes,
            MaskMode::Weights,
            0.5,
            &InitPolicy::FromKeepMask(keep),
            1,
        )
        .unwrap();
        let on = binarize(&m.slots[0].a, 0.5).data().iter().sum::<f64>();
        assert_eq!(on, 20.0);

        let mut bad = Params::new();
        bad.insert("w", Tensor::ones(&[5, 20]));
        let err = init_masks(
            &shapes,
            MaskMode::Weights,
            0.5,
            &InitPolicy::FromKeepMask(bad),
            1,
        );
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_masks_have_zero_stats() {
        let mut m = init_masks(&shapes(), MaskMode::Weights, 0.5, &InitPolicy::AllOn, 3).unwrap();
        for s in &mut m.slots {
            s.a = Tensor::zeros(s.a.shape());
            s.b = Tensor::zeros(s.b.shape());
        }
        for st in mask_stats(&m) {
            assert_eq!(
                (
                    st.fraction_nonzero_a,
                    st.fraction_nonzero_b,
                    st.overlap_count
                ),
                (0.0, 0.0, 0)
            );
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = init_masks(&shapes(), MaskMode::Activations, 0.4, &InitPolicy::AllOn, 9).unwrap();
        let back =
            MaskPair::from_checkpoint(&Checkpoint::parse(&m.to_checkpoint().to_text()).unwrap())
                .unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        #[test]
        fn activation_mask_equals_zeroed_weight_rows(
            h in prop::collection::vec(-2.0f64..2.0, 64),
            w in prop::collection::vec(-2.0f64..2.0, 64),
            b in prop::collection::vec(-1.0f64..1.0, 8),
            keep in prop::collection::vec(any::<bool>(), 8),
        ) {
            let h = Tensor::matrix(8, 8, h).unwrap();
            let w = Tensor::matrix(8, 8, w).unwrap();
            let b = t(&b);
            let act = t(&keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect::<Vec<_>>());
            let rows: Vec<f64> = (0..64).map(|i| act.data()[i / 8]).collect();
            let wmask = Tensor::matrix(8, 8, rows).unwrap();
            let via_act = masked_linear_forward(&h, &w, &b, &act, MaskMode::Activations).unwrap();
            let via_w = masked_linear_forward(&h, &w, &b, &wmask, MaskMode::Weights).unwrap();
            for (x, y) in via_act.data().iter().zip(via_w.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
