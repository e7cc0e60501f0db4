//! A compact post-norm transformer encoder with maskable final layers.
//!
//! Each layer computes
//!
//! ```text
//! a  = Attention(h Wq + bq, h Wk + bk, h Wv + bv)
//! h1 = LayerNorm(h + a Wo + bo)
//! h2 = LayerNorm(h1 + act(h1 W1 + b1) W2 + b2)
//! ```
//!
//! The representation is `z = mean(h) Wp + bp`, a linear pooler over the
//! mean of the final layer's token states. In the last `mask_last_layers`
//! layers, `Wo`, `W1` and `W2` (and optionally `Wq`, `Wk`, `Wv`) are
//! maskable sublayers, and so is the pooler `Wp`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::losses::ClassifierHead;
use crate::masking::{self, BoundMasks, MaskMode, MaskPair, MaskSelector, MaskShape};
use crate::optim::Adam;
use crate::params::{Bound, Params};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Number of final layers that carry masks.
    pub mask_last_layers: usize,
    /// Initialization seed. Experiment runs derive it from the global seed.
    pub seed: u64,
    pub activation: Activation,
    /// Also mask the query/key/value projections.
    pub mask_qkv: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            n_heads: 2,
            n_layers: 4,
            d_ff: 64,
            max_seq_len: 16,
            mask_last_layers: 2,
            seed: 0,
            activation: Activation::Relu,
            mask_qkv: false,
        }
    }
}

impl EncoderConfig {
    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                out.push(format!("encoder.{name} must be positive"));
            }
        }
        if self.d_model < 2 {
            out.push("encoder.d_model must be at least 2".into());
        }
        if self.n_heads > 0 && self.d_model % self.n_heads != 0 {
            out.push(format!(
                "encoder.d_model ({}) must be divisible by encoder.n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.mask_last_layers < 1 || self.mask_last_layers > self.n_layers {
            out.push(format!(
                "encoder.mask_last_layers must be in 1..={}, got {}",
                self.n_layers, self.mask_last_layers
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Index of the first masked layer.
    pub fn first_masked_layer(&self) -> usize {
        self.n_layers - self.mask_last_layers
    }
}

pub(crate) fn layer_prefix(i: usize) -> String {
    format!("layers.{i:02}")
}

const PROJECTIONS: [&str; 6] = [
    "attn.query",
    "attn.key",
    "attn.value",
    "attn.output",
    "ff.input",
    "ff.output",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    params: Params,
    frozen: bool,
    frozen_checksum: Option<String>,
    pretrained: bool,
}

/// Mean loss per pretraining epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.seed);
        let (d, f) = (config.d_model, config.d_ff);
        let mut params = Params::new();
        let mut uniform = |shape: &[usize], bound: f64| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(shape.to_vec(), data).expect("valid shape")
        };
        params.insert("embed.token", uniform(&[config.vocab_size, d], 1.0));
        params.insert("embed.position", uniform(&[config.max_seq_len, d], 1.0));
        params.insert("embed.norm.gain", Tensor::ones(&[d]));
        params.insert("embed.norm.bias", Tensor::zeros(&[d]));
        for i in 0..config.n_layers {
            let p = layer_prefix(i);
            for name in PROJECTIONS {
                let (din, dout) = match name {
                    "ff.input" => (d, f),
                    "ff.output" => (f, d),
                    _ => (d, d),
                };
                let bound = (3.0 / din as f64).sqrt();
                params.insert(format!("{p}.{name}.weight"), uniform(&[din, dout], bound));
                params.insert(format!("{p}.{name}.bias"), Tensor::zeros(&[dout]));
            }
            for norm in ["norm1", "norm2"] {
                params.insert(format!("{p}.{norm}.gain"), Tensor::ones(&[d]));
                params.insert(format!("{p}.{norm}.bias"), Tensor::zeros(&[d]));
            }
        }
        params.insert("pooler.weight", uniform(&[d, d], (3.0 / d as f64).sqrt()));
        params.insert("pooler.bias", Tensor::zeros(&[d]));
        Ok(Self {
            config,
            params,
            frozen: false,
            frozen_checksum: None,
            pretrained: false,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Mutable access to the weights. Fails on a frozen encoder.
    pub fn params_mut(&mut self) -> Result<&mut Params> {
        if self.frozen {
            return Err(Error::State("encoder weights are frozen".into()));
        }
        Ok(&mut self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// SHA-256 of all weights.
    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Marks the weights read-only and records their checksum. Idempotent.
    pub fn freeze(&mut self) {
        if !self.frozen {
            self.frozen = true;
            self.frozen_checksum = Some(self.checksum());
        }
    }

    /// Whether [`Encoder::pretrain`] has run on these weights.
    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    pub fn frozen_checksum(&self) -> Option<&str> {
        self.frozen_checksum.as_deref()
    }

    /// Checks that the weights still match the checksum taken at freeze time.
    pub fn verify_frozen(&self) -> Result<()> {
        match &self.frozen_checksum {
            Some(c) if *c == self.checksum() => Ok(()),
            Some(_) => Err(Error::State("frozen encoder weights changed".into())),
            None => Err(Error::State("encoder is not frozen".into())),
        }
    }

    /// Weight names of the maskable sublayers with their layer index. The
    /// pooler counts as layer `n_layers`.
    pub fn maskable_sublayers(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for i in self.config.first_masked_layer()..self.config.n_layers {
            for name in PROJECTIONS {
                if name.starts_with("attn.") && name != "attn.output" && !self.config.mask_qkv {
                    continue;
                }
                out.push((format!("{}.{name}.weight", layer_prefix(i)), i));
            }
        }
        out.push(("pooler.weight".to_string(), self.config.n_layers));
        out
    }

    pub fn mask_shapes(&self, mode: MaskMode) -> Vec<MaskShape> {
        self.maskable_sublayers()
            .into_iter()
            .map(|(sublayer, layer)| {
                let w = self.params.get(&sublayer).expect("maskable weight exists");
                MaskShape {
                    shape: masking::mask_shape_for(w.shape(), mode),
                    sublayer,
                    layer,
                }
            })
            .collect()
    }

    /// Validates a batch of equal-length token sequences; returns the length.
    pub fn check_batch<T: AsRef<[usize]>>(&self, batch: &[T]) -> Result<usize> {
        let first = batch
            .first()
            .ok_or_else(|| Error::Precondition("empty batch".into()))?
            .as_ref()
            .len();
        if first == 0 {
            return Err(Error::Precondition("empty token sequence".into()));
        }
        for seq in batch {
            let seq = seq.as_ref();
            if seq.len() > self.config.max_seq_len {
                return Err(Error::Input(format!(
                    "sequence length {} exceeds max_seq_len {}",
                    seq.len(),
                    self.config.max_seq_len
                )));
            }
            if seq.len() != first {
                return Err(Error::Input(
                    "sequences in a batch must share a length".into(),
                ));
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::Input(format!(
                    "token id {bad} >= vocab_size {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(first)
    }

    /// Token plus position embeddings, normalized: `[B*seq, d]`.
    pub fn embed<T: AsRef<[usize]>>(&self, g: &mut Graph, p: &Bound, batch: &[T]) -> Result<Var> {
        let seq = self.check_batch(batch)?;
        let ids: Vec<usize> = batch
            .iter()
            .flat_map(|s| s.as_ref().iter().copied())
            .collect();
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq).collect();
        let tok = g.gather_rows(p.var("embed.token")?, &ids)?;
        let pos = g.gather_rows(p.var("embed.position")?, &positions)?;
        let sum = g.add(tok, pos)?;
        g.layer_norm(sum, p.var("embed.norm.gain")?, p.var("embed.norm.bias")?)
    }

    fn linear(
        &self,
        g: &mut Graph,
        p: &Bound,
        prefix: &str,
        name: &str,
        h: Var,
        masks: Option<&BoundMasks>,
    ) -> Result<Var> {
        let wname = format!("{prefix}.{name}.weight");
        let mask = masks.and_then(|m| m.get(&wname));
        let mode = masks.map(|m| m.mode).unwrap_or_default();
        let w = p.var(&wname)?;
        let b = p.var(&format!("{prefix}.{name}.bias"))?;
        masking::masked_linear(g, h, w, b, mask, mode)
    }

    /// One transformer layer over `[B*seq, d]`.
    pub fn layer(
        &self,
        g: &mut Graph,
        p: &Bound,
        index: usize,
        h: Var,
        seq: usize,
        masks: Option<&BoundMasks>,
    ) -> Result<Var> {
        let pre = layer_prefix(index);
        let q = self.linear(g, p, &pre, "attn.query", h, masks)?;
        let k = self.linear(g, p, &pre, "attn.key", h, masks)?;
        let v = self.linear(g, p, &pre, "attn.value", h, masks)?;
        let a = g.attention(q, k, v, seq, self.config.n_heads)?;
        let o = self.linear(g, p, &pre, "attn.output", a, masks)?;
        let r1 = g.add(h, o)?;
        let h1 = g.layer_norm(
            r1,
            p.var(&format!("{pre}.norm1.gain"))?,
            p.var(&format!("{pre}.norm1.bias"))?,
        )?;
        let f = self.linear(g, p, &pre, "ff.input", h1, masks)?;
        let f = g.activation(self.config.activation, f)?;
        let f = self.linear(g, p, &pre, "ff.output", f, masks)?;
        let r2 = g.add(h1, f)?;
        g.layer_norm(
            r2,
            p.var(&format!("{pre}.norm2.gain"))?,
            p.var(&format!("{pre}.norm2.bias"))?,
        )
    }

    /// Runs layers `from..n_layers` on hidden states, mean-pools and applies
    /// the pooler: `[B, d]`.
    pub fn forward_from(
        &self,
        g: &mut Graph,
        p: &Bound,
        mut h: Var,
        seq: usize,
        from: usize,
        masks: Option<&BoundMasks>,
    ) -> Result<Var> {
        for i in from..self.config.n_layers {
            h = self.layer(g, p, i, h, seq, masks)?;
        }
        let pooled = g.mean_pool_blocks(h, seq)?;
        let mask = masks.and_then(|m| m.get("pooler.weight"));
        let mode = masks.map(|m| m.mode).unwrap_or_default();
        masking::masked_linear(
            g,
            pooled,
            p.var("pooler.weight")?,
            p.var("pooler.bias")?,
            mask,
            mode,
        )
    }

    /// Full forward pass to pooled representations `[B, d]`.
    pub fn forward<T: AsRef<[usize]>>(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &[T],
        masks: Option<&BoundMasks>,
    ) -> Result<Var> {
        let seq = self.check_batch(batch)?;
        let h = self.embed(g, p, batch)?;
        self.forward_from(g, p, h, seq, 0, masks)
    }

    fn bind_selected(
        &self,
        g: &mut Graph,
        masks: Option<&MaskPair>,
        selector: MaskSelector,
    ) -> Result<Option<BoundMasks>> {
        match (selector.aspect(), masks) {
            (None, _) => Ok(None),
            (Some(aspect), Some(m)) => Ok(Some(m.bind(g, aspect, false))),
            (Some(_), None) => Err(Error::Precondition("a mask selector needs masks".into())),
        }
    }

    /// Pooled representation of one sequence, `[d_model]`.
    pub fn encode(
        &self,
        tokens: &[usize],
        masks: Option<&MaskPair>,
        selector: MaskSelector,
    ) -> Result<Tensor> {
        let mut reps = self.encode_batch(&[tokens], masks, selector)?;
        Tensor::vector(reps.remove(0))
    }

    /// Pooled representations for many sequences, evaluated in chunks.
    pub fn encode_batch<T: AsRef<[usize]>>(
        &self,
        batch: &[T],
        masks: Option<&MaskPair>,
        selector: MaskSelector,
    ) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(CHUNK) {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let bm = self.bind_selected(&mut g, masks, selector)?;
            let z = self.forward(&mut g, &p, chunk, bm.as_ref())?;
            let zt = g.value(z);
            out.extend((0..chunk.len()).map(|r| zt.row(r).to_vec()));
        }
        Ok(out)
    }

    /// Hidden states entering layer `upto`, `[B*seq, d]`, without masks.
    pub fn hidden_states<T: AsRef<[usize]>>(&self, batch: &[T], upto: usize) -> Result<Tensor> {
        let seq = self.check_batch(batch)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let mut h = self.embed(&mut g, &p, batch)?;
        for i in 0..upto.min(self.config.n_layers) {
            h = self.layer(&mut g, &p, i, h, seq, None)?;
        }
        Ok(g.value(h).clone())
    }

    /// Output of every layer for one sequence (embedding output first).
    pub fn capture_activations(
        &self,
        tokens: &[usize],
        masks: Option<&MaskPair>,
        selector: MaskSelector,
    ) -> Result<Vec<Tensor>> {
        let seq = self.check_batch(&[tokens])?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let bm = self.bind_selected(&mut g, masks, selector)?;
        let mut h = self.embed(&mut g, &p, &[tokens])?;
        let mut out = vec![g.value(h).clone()];
        for i in 0..self.config.n_layers {
            h = self.layer(&mut g, &p, i, h, seq, bm.as_ref())?;
            out.push(g.value(h).clone());
        }
        Ok(out)
    }

    /// Supervised pretraining on both aspect labels through two temporary
    /// linear heads (discarded afterwards), minimizing the mean of the two
    /// cross-entropies with Adam.
    pub fn pretrain(
        &mut self,
        data: &[LabeledExample],
        epochs: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
    ) -> Result<PretrainReport> {
        if self.frozen {
            return Err(Error::State("cannot pretrain a frozen encoder".into()));
        }
        if data.is_empty() {
            return Err(Error::Input("pretraining dataset is empty".into()));
        }
        let batch_size = batch_size.max(1);
        let mut rng = seed::rng(seed);
        let d = self.config.d_model;
        let mut heads = Params::new();
        ClassifierHead::init(d, &mut rng).insert_into(&mut heads, "head_a");
        ClassifierHead::init(d, &mut rng).insert_into(&mut heads, "head_b");
        let mut opt_enc = Adam::new(lr);
        let mut opt_heads = Adam::new(lr);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut report = PretrainReport::default();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0usize;
            for idx in order.chunks(batch_size) {
                let batch: Vec<&[usize]> = idx.iter().map(|&i| data[i].tokens.as_slice()).collect();
                let ya: Vec<usize> = idx.iter().map(|&i| data[i].y_a as usize).collect();
                let yb: Vec<usize> = idx.iter().map(|&i| data[i].y_b as usize).collect();
                let mut g = Graph::new();
                let p = self.params.bind(&mut g, true);
                let hp = heads.bind(&mut g, true);
                let z = self.forward(&mut g, &p, &batch, None)?;
                let la = ClassifierHead::loss(&mut g, &hp, "head_a", z, &ya)?;
                let lb = ClassifierHead::loss(&mut g, &hp, "head_b", z, &yb)?;
                let sum = g.add(la, lb)?;
                let loss = g.scale(sum, 0.5)?;
                g.backward(loss)?;
                total += g.value(loss).item();
                batches += 1;
                opt_enc.step(&mut self.params, &p.grads(&g))?;
                opt_heads.step(&mut heads, &hp.grads(&g))?;
            }
            report.epoch_losses.push(total / batches as f64);
        }
        self.pretrained = true;
        Ok(report)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.params.clone())
            .with_meta("kind", "encoder")
            .with_meta(
                "config",
                serde_json::to_string(&self.config).expect("config serializes"),
            )
            .with_meta("frozen", self.frozen.to_string())
            .with_meta("pretrained", self.pretrained.to_string())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: EncoderConfig = serde_json::from_str(ck.meta("config")?)
            .map_err(|e| Error::Input(format!("bad encoder config in checkpoint: {e}")))?;
        let mut enc = Self::new(config)?;
        let expected: Vec<&str> = enc.params.names().collect();
        let found: Vec<&str> = ck.tensors.names().collect();
        if expected != found {
            return Err(Error::Input(
                "checkpoint tensors do not match the encoder layout".into(),
            ));
        }
        for (name, t) in ck.tensors.iter() {
            if enc.params.get(name)?.shape() != t.shape() {
                return Err(Error::Dimension {
                    op: "load_checkpoint",
                    left: enc.params.get(name)?.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        enc.params = ck.tensors.clone();
        enc.pretrained = ck.meta("pretrained")? == "true";
        if ck.meta("frozen")? == "true" {
            enc.freeze();
        }
        Ok(enc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
