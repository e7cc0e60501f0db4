//! Experiment configuration, the five pipelines, sweeps and reports.
//!
//! A run generates three datasets from the global seed (an uncorrelated
//! pretraining set, a training set with the configured label joint and an
//! uncorrelated test set), pretrains an encoder, trains one arm and writes
//! its metrics. Output files of a run directory:
//!
//! | file | content |
//! |------|---------|
//! | `config.toml` | the validated configuration, re-runnable as is |
//! | `metrics.csv` | `pipeline,level,seed,aspect,metric,value`, deterministic |
//! | `mask_stats.csv` | per-sublayer mask statistics (masked arms only) |
//! | `sparsity_sweep.csv` | one row per level, arm and aspect (`prune_sweep` only) |
//! | `report.json` | the full [`ExperimentReport`], including wall-clock time |
//! | `pretrained.ckpt` | the pretrained encoder |
//! | `finetuned.ckpt` | the finetuned encoder (`finetuned` only) |
//! | `masks.ckpt` | both aspects' continuous masks (masked arms only) |
//! | `PARTIAL` | present while running and after a failed run |

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, GenConfig, JointDistribution, LabeledExample};
use crate::encoder::{Encoder, EncoderConfig, PretrainReport};
use crate::error::{Error, Result};
use crate::evaluation::{self, GroupMetrics, ProbeConfig};
use crate::losses::{ClassifierHead, LossParts, LossWeights};
use crate::masking::{self, InitPolicy, MaskMode, MaskPair, MaskStats};
use crate::params::Params;
use crate::pruning::{self, PruneArm, StageSeeds, DEFAULT_LEVELS};
use crate::seed::sub_seed;
use crate::train::{self, TrainConfig};
use crate::util::{fmt_opt, fmt_sig};

pub const PARTIAL_MARKER: &str = "PARTIAL";
pub const METRICS_COLUMNS: &str = "pipeline,level,seed,aspect,metric,value";
pub const SPARSITY_COLUMNS: &str =
    "level,pipeline,aspect,main_acc,leakage_acc,achieved_sparsity,seed";
pub const MASK_STATS_COLUMNS: &str =
    "pipeline,level,seed,sublayer,layer,fraction_nonzero_a,fraction_nonzero_b,overlap_count,total_elements";
pub const SWEEP_COLUMNS: &str = "axis,axis_value,status,pipeline,level,seed,aspect,metric,value";
pub const SUMMARY_COLUMNS: &str =
    "run,pipeline,level,seed,main_avg_acc,main_worst_acc,leakage_a,leakage_b,mean_leakage,tpr_gap,tnr_gap";
pub const GROUPS_COLUMNS: &str = "run,pipeline,level,seed,aspect,y,group,count,accuracy";
pub const FAIRNESS_COLUMNS: &str = "run,pipeline,level,seed,aspect,group,tpr,tnr";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Untuned,
    Finetuned,
    MaskedWeights,
    MaskedHidden,
    PruneSweep,
}

impl Pipeline {
    pub const ALL: [Pipeline; 5] = [
        Self::Untuned,
        Self::Finetuned,
        Self::MaskedWeights,
        Self::MaskedHidden,
        Self::PruneSweep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Untuned => "untuned",
            Self::Finetuned => "finetuned",
            Self::MaskedWeights => "masked_weights",
            Self::MaskedHidden => "masked_hidden",
            Self::PruneSweep => "prune_sweep",
        }
    }

    pub fn mask_mode(self) -> Option<MaskMode> {
        match self {
            Self::MaskedWeights => Some(MaskMode::Weights),
            Self::MaskedHidden => Some(MaskMode::Activations),
            _ => None,
        }
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown pipeline {s}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `correlated`, `uncorrelated`, `strong`, `moderate` or `none`.
    /// Ignored when `cells` is given.
    pub correlation: String,
    pub n_pretrain: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Explicit training joint.
    pub cells: Option<JointDistribution>,
    pub gen: GenConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            correlation: "correlated".into(),
            n_pretrain: 2000,
            n_train: 1000,
            n_test: 2000,
            cells: None,
            gen: GenConfig::default(),
        }
    }
}

impl DataConfig {
    /// The joint distribution of the training set.
    pub fn train_joint(&self) -> Result<JointDistribution> {
        if let Some(cells) = self.cells {
            return JointDistribution::new(cells.p00, cells.p01, cells.p10, cells.p11);
        }
        match self.correlation.as_str() {
            "correlated" => Ok(JointDistribution::correlated()),
            "uncorrelated" => Ok(JointDistribution::uncorrelated()),
            other => data::correlation_settings(other),
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.train_joint() {
            out.push(format!("data: {e}"));
        }
        for (name, n) in [
            ("n_pretrain", self.n_pretrain),
            ("n_train", self.n_train),
            ("n_test", self.n_test),
        ] {
            if n < 20 {
                out.push(format!("data.{name} must be at least 20, got {n}"));
            }
        }
        out.extend(self.gen.problems());
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub tau: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { tau: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub levels: Vec<f64>,
    /// Finetuning steps before pruning. Defaults to one epoch of steps.
    pub k_iters: Option<usize>,
    /// Finetuning steps after pruning in the pruned+finetuned arm. Defaults
    /// to the mask-training budget in steps.
    pub finetune_steps: Option<usize>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            levels: DEFAULT_LEVELS.to_vec(),
            k_iters: None,
            finetune_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub pipeline: Pipeline,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub prune: PruneConfig,
}

impl ExperimentConfig {
    pub fn new(pipeline: Pipeline, seed: u64) -> Self {
        Self {
            seed,
            pipeline,
            output_dir: None,
            encoder: EncoderConfig::default(),
            loss: LossWeights::default(),
            mask: MaskConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            prune: PruneConfig::default(),
        }
    }

    /// Parses and validates a TOML configuration.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Every violated constraint across all sections.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.encoder.problems();
        if self.encoder.seed != 0 {
            out.push("encoder.seed must be left at 0; it is derived from the global seed".into());
        }
        out.extend(self.loss.problems());
        out.extend(self.data.problems());
        out.extend(self.train.problems());
        out.extend(self.probe.problems());
        if !(self.mask.tau > 0.0 && self.mask.tau < 1.0) {
            out.push(format!("mask.tau must be in (0, 1), got {}", self.mask.tau));
        }
        if self.data.gen.vocab_size != self.encoder.vocab_size {
            out.push(format!(
                "data.gen.vocab_size ({}) must equal encoder.vocab_size ({})",
                self.data.gen.vocab_size, self.encoder.vocab_size
            ));
        }
        if self.data.gen.seq_len > self.encoder.max_seq_len {
            out.push(format!(
                "data.gen.seq_len ({}) exceeds encoder.max_seq_len ({})",
                self.data.gen.seq_len, self.encoder.max_seq_len
            ));
        }
        if self.pipeline == Pipeline::PruneSweep && self.prune.levels.is_empty() {
            out.push("prune.levels must not be empty".into());
        }
        for &l in &self.prune.levels {
            if !(0.0..1.0).contains(&l) {
                out.push(format!("prune.levels entries must be in [0, 1), got {l}"));
            }
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

    fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            seed: sub_seed(self.seed, "init.encoder"),
            ..self.encoder.clone()
        }
    }
}

/// Main-task metrics and leakage of one aspect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AspectReport {
    /// Head predictions against this aspect's label, grouped by the other.
    pub main: GroupMetrics,
    /// Probe accuracy for the other aspect's label from this aspect's
    /// representation.
    pub leakage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub pipeline: String,
    /// Sparsity level of prune-sweep arms.
    pub level: Option<f64>,
    pub aspect_a: AspectReport,
    pub aspect_b: AspectReport,
    pub mask_stats: Vec<MaskStats>,
    pub overlap_fraction: Option<f64>,
    pub mask_sparsity: Option<f64>,
    /// Fraction of prunable weights that are zero, or for the pruned+masked
    /// arm the mask sparsity after refinement.
    pub achieved_sparsity: Option<f64>,
    pub encoder_checksum: String,
    pub final_losses: Option<LossParts>,
}

impl ArmReport {
    pub fn mean_leakage(&self) -> f64 {
        (self.aspect_a.leakage + self.aspect_b.leakage) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub pipeline: Pipeline,
    pub pretrained_checksum: String,
    pub pretrain_losses: Vec<f64>,
    pub arms: Vec<ArmReport>,
    pub wall_clock_seconds: f64,
    pub config: String,
}

impl ExperimentReport {
    /// The first arm with this pipeline label.
    pub fn arm(&self, label: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.pipeline == label)
    }
}

/// Datasets and the pretrained encoder shared by every arm of a run.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub pretrain: Vec<LabeledExample>,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    /// Pretrained, not frozen.
    pub encoder: Encoder,
    pub pretrain_report: PretrainReport,
}

fn pretrain_cache() -> &'static Mutex<HashMap<String, (Encoder, PretrainReport)>> {
    static CACHE: OnceLock<Mutex<HashMap<String, (Encoder, PretrainReport)>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Drops every memoized pretrained encoder.
pub fn clear_pretrain_cache() {
    pretrain_cache().lock().expect("cache lock").clear();
}

/// Generates the datasets and pretrains the encoder. Pretrained encoders are
/// memoized in-process by everything that determines them, so sweeps and
/// repeated runs in one process pretrain once per seed.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let gen = &cfg.data.gen;
    let pretrain = data::generate_exact(
        gen,
        &JointDistribution::uncorrelated(),
        cfg.data.n_pretrain,
        sub_seed(cfg.seed, "data.pretrain"),
    )?;
    let train = data::generate_exact(
        gen,
        &cfg.data.train_joint()?,
        cfg.data.n_train,
        sub_seed(cfg.seed, "data.train"),
    )?;
    let test = data::generate_exact(
        gen,
        &JointDistribution::uncorrelated(),
        cfg.data.n_test,
        sub_seed(cfg.seed, "data.test"),
    )?;
    let enc_cfg = cfg.encoder_config();
    let key = serde_json::to_string(&(
        &enc_cfg,
        gen,
        cfg.data.n_pretrain,
        cfg.train.pretrain_epochs,
        cfg.train.lr_weights,
        cfg.train.batch_size,
        cfg.seed,
    ))
    .expect("cache key serializes");
    let cached = pretrain_cache()
        .lock()
        .expect("cache lock")
        .get(&key)
        .cloned();
    let (encoder, pretrain_report) = match cached {
        Some(hit) => hit,
        None => {
            let mut enc = Encoder::new(enc_cfg)?;
            let report = enc.pretrain(
                &pretrain,
                cfg.train.pretrain_epochs,
                cfg.train.lr_weights,
                cfg.train.batch_size,
                sub_seed(cfg.seed, "shuffle.pretrain"),
            )?;
            pretrain_cache()
                .lock()
                .expect("cache lock")
                .insert(key, (enc.clone(), report.clone()));
            (enc, report)
        }
    };
    Ok(Prepared {
        pretrain,
        train,
        test,
        encoder,
        pretrain_report,
    })
}

/// Evaluates a trained arm on the uncorrelated test set.
pub fn evaluate_arm(
    label: &str,
    level: Option<f64>,
    enc: &Encoder,
    masks: Option<&MaskPair>,
    heads: &Params,
    test: &[LabeledExample],
    probe: &ProbeConfig,
    seed: u64,
) -> Result<ArmReport> {
    let (za, zb) = evaluation::representations(enc, masks, test)?;
    let ya: Vec<u8> = test.iter().map(|e| e.y_a).collect();
    let yb: Vec<u8> = test.iter().map(|e| e.y_b).collect();
    let probe_seed = sub_seed(seed, "probe");
    let pred_a = ClassifierHead::from_params(heads, "head_a")?.predict(&za);
    let pred_b = ClassifierHead::from_params(heads, "head_b")?.predict(&zb);
    let aspect_a = AspectReport {
        main: evaluation::group_metrics(&pred_a, &ya, &yb)?,
        leakage: evaluation::leakage(&za, &ya, &yb, probe, probe_seed)?,
    };
    let aspect_b = AspectReport {
        main: evaluation::group_metrics(&pred_b, &yb, &ya)?,
        leakage: evaluation::leakage(&zb, &yb, &ya, probe, probe_seed)?,
    };
    Ok(ArmReport {
        pipeline: label.to_string(),
        level,
        aspect_a,
        aspect_b,
        mask_stats: masks.map(masking::mask_stats).unwrap_or_default(),
        overlap_fraction: masks.map(MaskPair::overlap_fraction),
        mask_sparsity: masks.map(MaskPair::sparsity),
        achieved_sparsity: None,
        encoder_checksum: enc.checksum(),
        final_losses: None,
    })
}

/// Trained state of one arm, before evaluation.
#[derive(Clone, Debug)]
pub struct Trained {
    pub encoder: Encoder,
    pub masks: Option<MaskPair>,
    pub heads: Params,
    pub final_losses: Option<LossParts>,
}

fn frozen_copy(enc: &Encoder) -> Encoder {
    let mut e = enc.clone();
    e.freeze();
    e
}

fn train_untuned(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Trained> {
    let encoder = frozen_copy(&prep.encoder);
    let (za, zb) = evaluation::representations(&encoder, None, &prep.train)?;
    let mut heads = train::init_heads(cfg.encoder.d_model, sub_seed(cfg.seed, "init.heads"));
    train::train_heads(
        &mut heads,
        &za,
        &zb,
        &prep.train,
        cfg.train.head_epochs,
        &cfg.train,
        sub_seed(cfg.seed, "shuffle.train"),
    )?;
    Ok(Trained {
        encoder,
        masks: None,
        heads,
        final_losses: None,
    })
}

fn train_finetuned(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Trained> {
    let mut encoder = prep.encoder.clone();
    let mut heads = train::init_heads(cfg.encoder.d_model, sub_seed(cfg.seed, "init.heads"));
    let log = train::finetune(
        &mut encoder,
        &mut heads,
        &prep.train,
        &cfg.loss,
        &cfg.train,
        cfg.train.finetune_epochs,
        None,
        None,
        sub_seed(cfg.seed, "shuffle.train"),
    )?;
    encoder.freeze();
    Ok(Trained {
        encoder,
        masks: None,
        heads,
        final_losses: log.epochs.last().cloned(),
    })
}

fn train_masked(cfg: &ExperimentConfig, prep: &Prepared, mode: MaskMode) -> Result<Trained> {
    let encoder = frozen_copy(&prep.encoder);
    let mut masks = masking::init_masks(
        &encoder.mask_shapes(mode),
        mode,
        cfg.mask.tau,
        &InitPolicy::AllOn,
        sub_seed(cfg.seed, "init.masks"),
    )?;
    let mut heads = train::init_heads(cfg.encoder.d_model, sub_seed(cfg.seed, "init.heads"));
    let log = train::train_masks(
        &encoder,
        &mut masks,
        &mut heads,
        &prep.train,
        &cfg.loss,
        &cfg.train,
        sub_seed(cfg.seed, "shuffle.train"),
    )?;
    encoder.verify_frozen()?;
    Ok(Trained {
        encoder,
        masks: Some(masks),
        heads,
        final_losses: log.epochs.last().cloned(),
    })
}

fn stage_seeds(seed: u64) -> StageSeeds {
    StageSeeds {
        finetune: sub_seed(seed, "shuffle.finetune"),
        masks: sub_seed(seed, "init.masks"),
        heads: sub_seed(seed, "init.heads"),
        train: sub_seed(seed, "shuffle.train"),
    }
}

fn k_iters(cfg: &ExperimentConfig) -> usize {
    cfg.prune
        .k_iters
        .unwrap_or_else(|| cfg.train.steps_per_epoch())
}

/// Trains one arm of the sparsity sweep at one level. Returns the trained
/// state and its achieved sparsity.
fn train_pruned(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    arm: PruneArm,
    level: f64,
) -> Result<(Trained, f64)> {
    let seeds = stage_seeds(cfg.seed);
    let d = cfg.encoder.d_model;
    match arm {
        PruneArm::PrunedUntuned => {
            let (mut encoder, prune) = pruning::prune_encoder(&prep.encoder, level)?;
            encoder.freeze();
            let (za, zb) = evaluation::representations(&encoder, None, &prep.train)?;
            let mut heads = train::init_heads(d, seeds.heads);
            train::train_heads(
                &mut heads,
                &za,
                &zb,
                &prep.train,
                cfg.train.head_epochs,
                &cfg.train,
                seeds.train,
            )?;
            Ok((
                Trained {
                    encoder,
                    masks: None,
                    heads,
                    final_losses: None,
                },
                prune.achieved_sparsity,
            ))
        }
        PruneArm::PrunedFinetuned => {
            let k = k_iters(cfg);
            let mut tuned = prep.encoder.clone();
            if k > 0 {
                let mut scratch = train::init_heads(d, seeds.heads);
                let epochs = k.div_ceil(cfg.train.steps_per_epoch());
                train::finetune(
                    &mut tuned,
                    &mut scratch,
                    &prep.train,
                    &cfg.loss,
                    &cfg.train,
                    epochs,
                    Some(k),
                    None,
                    seeds.finetune,
                )?;
            }
            let (mut encoder, prune) = pruning::prune_encoder(&tuned, level)?;
            let steps = cfg
                .prune
                .finetune_steps
                .unwrap_or(cfg.train.mask_epochs * cfg.train.steps_per_epoch());
            let mut heads = train::init_heads(d, seeds.heads);
            let log = train::finetune(
                &mut encoder,
                &mut heads,
                &prep.train,
                &cfg.loss,
                &cfg.train,
                steps.div_ceil(cfg.train.steps_per_epoch()),
                Some(steps),
                Some(&prune.keep),
                seeds.train,
            )?;
            encoder.freeze();
            Ok((
                Trained {
                    encoder,
                    masks: None,
                    heads,
                    final_losses: log.epochs.last().cloned(),
                },
                prune.achieved_sparsity,
            ))
        }
        PruneArm::PrunedMasked => {
            let out = pruning::prune_then_mask(
                &prep.encoder,
                &prep.train,
                &cfg.loss,
                &cfg.train,
                k_iters(cfg),
                level,
                cfg.mask.tau,
                seeds,
            )?;
            Ok((
                Trained {
                    encoder: out.encoder,
                    masks: Some(out.masks),
                    heads: out.heads,
                    final_losses: out.mask_log.epochs.last().cloned(),
                },
                out.post_refinement_sparsity,
            ))
        }
    }
}

fn finish_arm(
    label: &str,
    level: Option<f64>,
    t: &Trained,
    cfg: &ExperimentConfig,
    test: &[LabeledExample],
) -> Result<ArmReport> {
    let mut arm = evaluate_arm(
        label,
        level,
        &t.encoder,
        t.masks.as_ref(),
        &t.heads,
        test,
        &cfg.probe,
        cfg.seed,
    )?;
    arm.final_losses = t.final_losses.clone();
    Ok(arm)
}

/// Runs every arm of a configuration in memory, without writing files.
/// Trained state is returned for single-arm pipelines only.
pub fn execute(cfg: &ExperimentConfig) -> Result<(ExperimentReport, Prepared, Vec<Trained>)> {
    let start = Instant::now();
    let prep = prepare(cfg)?;
    let mut arms = Vec::new();
    let mut trained = Vec::new();
    match cfg.pipeline {
        Pipeline::PruneSweep => {
            for &level in &cfg.prune.levels {
                for arm in PruneArm::ALL {
                    let (t, sparsity) = train_pruned(cfg, &prep, arm, level)?;
                    let mut report = finish_arm(arm.as_str(), Some(level), &t, cfg, &prep.test)?;
                    report.achieved_sparsity = Some(sparsity);
                    arms.push(report);
                }
            }
        }
        p => {
            let t = match p {
                Pipeline::Untuned => train_untuned(cfg, &prep)?,
                Pipeline::Finetuned => train_finetuned(cfg, &prep)?,
                _ => train_masked(cfg, &prep, p.mask_mode().expect("masked pipeline"))?,
            };
            arms.push(finish_arm(p.as_str(), None, &t, cfg, &prep.test)?);
            trained.push(t);
        }
    }
    let report = ExperimentReport {
        seed: cfg.seed,
        pipeline: cfg.pipeline,
        pretrained_checksum: prep.encoder.checksum(),
        pretrain_losses: prep.pretrain_report.epoch_losses.clone(),
        arms,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        config: cfg.to_toml(),
    };
    Ok((report, prep, trained))
}

/// Runs one experiment and writes its output directory.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let marker = out_dir.join(PARTIAL_MARKER);
    write(&marker, "running\n")?;
    match run_inner(cfg, out_dir) {
        Ok(report) => {
            fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
            Ok(report)
        }
        Err(e) => {
            write(&marker, &format!("failed: {e}\n"))?;
            Err(e)
        }
    }
}

fn run_inner(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport> {
    let echo = ExperimentConfig {
        output_dir: Some(out_dir.to_path_buf()),
        ..cfg.clone()
    };
    write(&out_dir.join("config.toml"), &echo.to_toml())?;
    let (report, prep, trained) = execute(cfg)?;
    prep.encoder.save(&out_dir.join("pretrained.ckpt"))?;
    if let Some(t) = trained.first() {
        if cfg.pipeline == Pipeline::Finetuned {
            t.encoder.save(&out_dir.join("finetuned.ckpt"))?;
        }
        if let Some(m) = &t.masks {
            m.save(&out_dir.join("masks.ckpt"))?;
        }
    }
    write(&out_dir.join("metrics.csv"), &metrics_csv(&report))?;
    if report.arms.iter().any(|a| !a.mask_stats.is_empty()) {
        write(&out_dir.join("mask_stats.csv"), &mask_stats_csv(&report))?;
    }
    if cfg.pipeline == Pipeline::PruneSweep {
        write(&out_dir.join("sparsity_sweep.csv"), &sparsity_csv(&report))?;
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write(&out_dir.join("report.json"), &(json + "\n"))?;
    Ok(report)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `(aspect, metric, value)` rows of one arm, in a fixed order.
pub fn arm_metrics(arm: &ArmReport) -> Vec<(&'static str, String, Option<f64>)> {
    let mut rows = Vec::new();
    for (aspect, r) in [("a", &arm.aspect_a), ("b", &arm.aspect_b)] {
        let m = &r.main;
        rows.push((aspect, "overall_acc".to_string(), m.overall_acc));
        rows.push((aspect, "avg_acc".to_string(), m.avg_acc));
        rows.push((aspect, "worst_acc".to_string(), m.worst_acc));
        for y in 0..2 {
            for g in 0..2 {
                rows.push((aspect, format!("cell_acc_y{y}_g{g}"), m.cell_acc[y][g]));
                rows.push((
                    aspect,
                    format!("cell_count_y{y}_g{g}"),
                    Some(m.cell_count[y][g] as f64),
                ));
            }
        }
        for g in 0..2 {
            rows.push((aspect, format!("tpr_g{g}"), m.tpr[g]));
            rows.push((aspect, format!("tnr_g{g}"), m.tnr[g]));
        }
        rows.push((aspect, "tpr_gap".to_string(), m.tpr_gap));
        rows.push((aspect, "tnr_gap".to_string(), m.tnr_gap));
        rows.push((aspect, "leakage".to_string(), Some(r.leakage)));
    }
    rows.push(("both", "mean_leakage".to_string(), Some(arm.mean_leakage())));
    rows.push(("both", "overlap_fraction".to_string(), arm.overlap_fraction));
    rows.push(("both", "mask_sparsity".to_string(), arm.mask_sparsity));
    rows.push((
        "both",
        "achieved_sparsity".to_string(),
        arm.achieved_sparsity,
    ));
    rows
}

/// Metric rows without the header, as `pipeline,level,seed,aspect,metric,value`.
fn metric_lines(report: &ExperimentReport) -> Vec<String> {
    let mut out = Vec::new();
    for arm in &report.arms {
        for (aspect, metric, value) in arm_metrics(arm) {
            out.push(format!(
                "{},{},{},{aspect},{metric},{}",
                arm.pipeline,
                fmt_opt(arm.level),
                report.seed,
                fmt_opt(value)
            ));
        }
    }
    out
}

pub fn metrics_csv(report: &ExperimentReport) -> String {
    let mut s = format!("{METRICS_COLUMNS}\n");
    for line in metric_lines(report) {
        s.push_str(&line);
        s.push('\n');
    }
    s
}

fn mask_stats_csv(report: &ExperimentReport) -> String {
    let mut s = format!("{MASK_STATS_COLUMNS}\n");
    for arm in &report.arms {
        for m in &arm.mask_stats {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                arm.pipeline,
                fmt_opt(arm.level),
                report.seed,
                m.sublayer,
                m.layer,
                fmt_sig(m.fraction_nonzero_a),
                fmt_sig(m.fraction_nonzero_b),
                m.overlap_count,
                m.total_elements
            )
            .unwrap();
        }
    }
    s
}

fn sparsity_csv(report: &ExperimentReport) -> String {
    let mut s = format!("{SPARSITY_COLUMNS}\n");
    for arm in &report.arms {
        for (aspect, r) in [("a", &arm.aspect_a), ("b", &arm.aspect_b)] {
            writeln!(
                s,
                "{},{},{aspect},{},{},{},{}",
                fmt_opt(arm.level),
                arm.pipeline,
                fmt_opt(r.main.avg_acc),
                fmt_sig(r.leakage),
                fmt_opt(arm.achieved_sparsity),
                report.seed
            )
            .unwrap();
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Alpha,
    MaskedLayers,
    Correlation,
    Sparsity,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Alpha => "alpha",
            Self::MaskedLayers => "masked_layers",
            Self::Correlation => "correlation",
            Self::Sparsity => "sparsity",
        }
    }

    /// The configuration of one sweep entry.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let bad =
            |what: &str| Error::Input(format!("{} value {value:?} is not {what}", self.as_str()));
        match self {
            Self::Alpha => cfg.loss.alpha = value.parse().map_err(|_| bad("a number"))?,
            Self::MaskedLayers => {
                cfg.encoder.mask_last_layers = value.parse().map_err(|_| bad("a layer count"))?
            }
            Self::Correlation => {
                cfg.data.correlation = value.to_string();
                cfg.data.cells = None;
            }
            Self::Sparsity => {
                cfg.pipeline = Pipeline::PruneSweep;
                cfg.prune.levels = vec![value.parse().map_err(|_| bad("a number"))?];
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Self::Alpha,
            Self::MaskedLayers,
            Self::Correlation,
            Self::Sparsity,
        ]
        .into_iter()
        .find(|a| a.as_str() == s)
        .ok_or_else(|| {
            Error::Input(format!(
                "unknown sweep axis {s} (expected alpha, masked_layers, correlation or sparsity)"
            ))
        })
    }
}

/// Result of one sweep entry.
#[derive(Debug)]
pub struct SweepEntry {
    pub value: String,
    pub outcome: std::result::Result<ExperimentReport, String>,
}

/// Runs one experiment per axis value under `out_dir/<axis>=<value>` and
/// writes the merged `out_dir/sweep.csv`. Every value is checked before the
/// first run; a run that fails is recorded as an error row and the sweep
/// continues.
pub fn sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    out_dir: &Path,
) -> Result<Vec<SweepEntry>> {
    if values.is_empty() {
        return Err(Error::Input("sweep needs at least one value".into()));
    }
    let configs: Vec<ExperimentConfig> = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<_>>()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut merged = format!("{SWEEP_COLUMNS}\n");
    let mut entries = Vec::new();
    for (value, cfg) in values.iter().zip(&configs) {
        let dir = out_dir.join(format!("{}={value}", axis.as_str()));
        let outcome = run(cfg, &dir).map_err(|e| e.to_string());
        match &outcome {
            Ok(report) => {
                for line in metric_lines(report) {
                    writeln!(merged, "{},{value},ok,{line}", axis.as_str()).unwrap();
                }
            }
            Err(msg) => {
                let msg: String = msg
                    .chars()
                    .map(|c| if c == ',' || c == '\n' { ' ' } else { c })
                    .collect();
                writeln!(
                    merged,
                    "{},{value},error: {msg},{},NA,{},NA,NA,NA",
                    axis.as_str(),
                    cfg.pipeline.as_str(),
                    cfg.seed
                )
                .unwrap();
            }
        }
        entries.push(SweepEntry {
            value: value.clone(),
            outcome,
        });
    }
    write(&out_dir.join("sweep.csv"), &merged)?;
    Ok(entries)
}

/// One completed run found by [`report`].
#[derive(Clone, Debug)]
pub struct FoundRun {
    /// Directory relative to the report root, `.` for the root itself.
    pub name: String,
    pub report: ExperimentReport,
}

fn find_reports(root: &Path, dir: &Path, out: &mut Vec<FoundRun>) -> Result<()> {
    let path = dir.join("report.json");
    if path.is_file() && !dir.join(PARTIAL_MARKER).exists() {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let report =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let rel = dir.strip_prefix(root).unwrap_or(dir).display().to_string();
        out.push(FoundRun {
            name: if rel.is_empty() { ".".into() } else { rel },
            report,
        });
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        find_reports(root, &sub, out)?;
    }
    Ok(())
}

/// Collects every completed run below `dir`, prints nothing, writes
/// `report_summary.csv`, `report_groups.csv` and `report_fairness.csv` into
/// `dir` and returns the runs with a formatted summary table.
pub fn report(dir: &Path) -> Result<(Vec<FoundRun>, String)> {
    if !dir.is_dir() {
        return Err(Error::Input(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let mut runs = Vec::new();
    find_reports(dir, dir, &mut runs)?;
    if runs.is_empty() {
        return Err(Error::Input(format!(
            "no completed runs found in {}",
            dir.display()
        )));
    }
    let mut summary = format!("{SUMMARY_COLUMNS}\n");
    let mut groups = format!("{GROUPS_COLUMNS}\n");
    let mut fairness = format!("{FAIRNESS_COLUMNS}\n");
    let mut table = format!(
        "{:<28} {:<18} {:>6} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "run",
        "pipeline",
        "level",
        "seed",
        "main",
        "worst",
        "leak_a",
        "leak_b",
        "tpr_gap",
        "tnr_gap"
    );
    let pct = |x: Option<f64>| x.map_or("NA".to_string(), |v| format!("{:.4}", v));
    for run in &runs {
        let r = &run.report;
        for arm in &r.arms {
            let key = format!(
                "{},{},{},{}",
                run.name,
                arm.pipeline,
                fmt_opt(arm.level),
                r.seed
            );
            let m = &arm.aspect_a.main;
            writeln!(
                summary,
                "{key},{},{},{},{},{},{},{}",
                fmt_opt(m.avg_acc),
                fmt_opt(m.worst_acc),
                fmt_sig(arm.aspect_a.leakage),
                fmt_sig(arm.aspect_b.leakage),
                fmt_sig(arm.mean_leakage()),
                fmt_opt(m.tpr_gap),
                fmt_opt(m.tnr_gap)
            )
            .unwrap();
            writeln!(
                table,
                "{:<28} {:<18} {:>6} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
                run.name,
                arm.pipeline,
                fmt_opt(arm.level),
                r.seed,
                pct(m.avg_acc),
                pct(m.worst_acc),
                pct(Some(arm.aspect_a.leakage)),
                pct(Some(arm.aspect_b.leakage)),
                pct(m.tpr_gap),
                pct(m.tnr_gap)
            )
            .unwrap();
            for (aspect, a) in [("a", &arm.aspect_a), ("b", &arm.aspect_b)] {
                for y in 0..2 {
                    for g in 0..2 {
                        writeln!(
                            groups,
                            "{key},{aspect},{y},{g},{},{}",
                            a.main.cell_count[y][g],
                            fmt_opt(a.main.cell_acc[y][g])
                        )
                        .unwrap();
                    }
                }
                for g in 0..2 {
                    writeln!(
                        fairness,
                        "{key},{aspect},{g},{},{}",
                        fmt_opt(a.main.tpr[g]),
                        fmt_opt(a.main.tnr[g])
                    )
                    .unwrap();
                }
            }
        }
    }
    write(&dir.join("report_summary.csv"), &summary)?;
    write(&dir.join("report_groups.csv"), &groups)?;
    write(&dir.join("report_fairness.csv"), &fairness)?;
    Ok((runs, table))
}

/// Re-creates a run's test set and writes its representations. The encoder
/// is `finetuned.ckpt` when present, `pretrained.ckpt` otherwise; masks come
/// from `masks.ckpt` when present.
pub fn export_run_representations(run_dir: &Path, out: &Path) -> Result<usize> {
    let cfg = ExperimentConfig::load(&run_dir.join("config.toml"))?;
    if cfg.pipeline == Pipeline::PruneSweep {
        return Err(Error::Input(
            "prune_sweep runs do not keep per-level encoders to export".into(),
        ));
    }
    let finetuned = run_dir.join("finetuned.ckpt");
    let enc_path = if finetuned.is_file() {
        finetuned
    } else {
        run_dir.join("pretrained.ckpt")
    };
    let enc = Encoder::load(&enc_path)?;
    let masks_path = run_dir.join("masks.ckpt");
    let masks = if masks_path.is_file() {
        Some(MaskPair::load(&masks_path)?)
    } else {
        None
    };
    let test = data::generate_exact(
        &cfg.data.gen,
        &JointDistribution::uncorrelated(),
        cfg.data.n_test,
        sub_seed(cfg.seed, "data.test"),
    )?;
    evaluation::export_representations(&enc, masks.as_ref(), &test, out)?;
    Ok(test.len())
}
