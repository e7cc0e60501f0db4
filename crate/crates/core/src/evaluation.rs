//! Probing classifiers, leakage, subgroup and equalized-odds metrics, and
//! representation export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::masking::{MaskPair, MaskSelector};
use crate::optim::Adam;
use crate::params::Params;
use crate::seed;
use crate::tensor::Tensor;
use crate::util::fmt_sig;

/// Chi-square critical value for one degree of freedom at p = 0.01.
pub const CHI2_CRITICAL_1DF_P01: f64 = 6.634896601021214;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOptimizer {
    /// Plain full-batch gradient descent.
    #[default]
    Gd,
    /// Full-batch Adam.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: ProbeOptimizer,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 50,
            lr: 0.01,
            optimizer: ProbeOptimizer::Gd,
        }
    }
}

impl ProbeConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.hidden == 0 {
            out.push("probe.hidden must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push(format!("probe.lr must be positive, got {}", self.lr));
        }
        out
    }
}

/// One-hidden-layer ReLU perceptron with two output classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub params: Params,
    /// Accuracy on the held-out 20% split.
    pub accuracy: f64,
}

impl Probe {
    pub fn predict(&self, reps: &[Vec<f64>]) -> Result<Vec<u8>> {
        let x = Tensor::from_rows(reps)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(x);
        let h = g.matmul(x, p.var("w1")?)?;
        let h = g.add(h, p.var("b1")?)?;
        let h = g.relu(h)?;
        let o = g.matmul(h, p.var("w2")?)?;
        let o = g.add(o, p.var("b2")?)?;
        let logits = g.value(o);
        Ok((0..reps.len())
            .map(|r| {
                let row = logits.row(r);
                u8::from(row[1] > row[0])
            })
            .collect())
    }
}

/// Stratified 80/20 split; returns `(train, test)` index lists.
pub fn stratified_split(labels: &[u8], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seed::rng(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in 0..=1u8 {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let cut = (idx.len() * 4).div_ceil(5);
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Trains a probe on 80% of `reps` (stratified by label) and reports its
/// accuracy on the remaining 20%.
pub fn train_probe(
    reps: &[Vec<f64>],
    labels: &[u8],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Probe> {
    if reps.len() != labels.len() || reps.is_empty() {
        return Err(Error::Input(
            "probe needs one label per representation".into(),
        ));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Input("probe labels must be 0 or 1".into()));
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(Error::Data("probe labels contain a single class".into()));
    }
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let (train, test) = stratified_split(labels, seed::sub_seed(seed, "probe.split"));
    let d = reps[0].len();
    let mut rng = seed::sub_rng(seed, "probe.init");
    let mut uniform = |rows: usize, cols: usize| {
        let bound = (3.0 / rows as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Tensor::matrix(rows, cols, data).expect("valid shape")
    };
    let mut params = Params::new();
    params.insert("w1", uniform(d, cfg.hidden));
    params.insert("b1", Tensor::zeros(&[cfg.hidden]));
    params.insert("w2", uniform(cfg.hidden, 2));
    params.insert("b2", Tensor::zeros(&[2]));

    let x = Tensor::from_rows(&train.iter().map(|&i| reps[i].clone()).collect::<Vec<_>>())?;
    let y: Vec<usize> = train.iter().map(|&i| labels[i] as usize).collect();
    let mut adam = Adam::new(cfg.lr);
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let p = params.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let h = g.matmul(xv, p.var("w1")?)?;
        let h = g.add(h, p.var("b1")?)?;
        let h = g.relu(h)?;
        let o = g.matmul(h, p.var("w2")?)?;
        let o = g.add(o, p.var("b2")?)?;
        let loss = g.cross_entropy(o, &y)?;
        g.backward(loss)?;
        let grads = p.grads(&g);
        match cfg.optimizer {
            ProbeOptimizer::Gd => crate::optim::sgd_step(&mut params, &grads, cfg.lr)?,
            ProbeOptimizer::Adam => adam.step(&mut params, &grads)?,
        }
    }
    let mut probe = Probe {
        params,
        accuracy: 0.0,
    };
    let test_reps: Vec<Vec<f64>> = test.iter().map(|&i| reps[i].clone()).collect();
    let pred = probe.predict(&test_reps)?;
    let correct = test
        .iter()
        .zip(&pred)
        .filter(|(&i, &p)| labels[i] == p)
        .count();
    probe.accuracy = correct as f64 / test.len().max(1) as f64;
    Ok(probe)
}

/// Pearson chi-square statistic of independence for two binary label lists.
pub fn chi_square_2x2(x: &[u8], y: &[u8]) -> f64 {
    let mut c = [[0f64; 2]; 2];
    for (&a, &b) in x.iter().zip(y) {
        c[a as usize][b as usize] += 1.0;
    }
    let n = x.len() as f64;
    let rows = [c[0][0] + c[0][1], c[1][0] + c[1][1]];
    let cols = [c[0][0] + c[1][0], c[0][1] + c[1][1]];
    let mut stat = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let e = rows[i] * cols[j] / n;
            if e > 0.0 {
                stat += (c[i][j] - e).powi(2) / e;
            }
        }
    }
    stat
}

/// Accuracy of a probe predicting the non-target label from the target
/// aspect's representations. The labels must be statistically independent
/// (chi-square test at p < 0.01), otherwise the probe could learn the
/// target task through the correlation.
pub fn leakage(
    reps: &[Vec<f64>],
    target_labels: &[u8],
    non_target_labels: &[u8],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    if target_labels.len() != non_target_labels.len() {
        return Err(Error::Input("label lists differ in length".into()));
    }
    let stat = chi_square_2x2(target_labels, non_target_labels);
    if stat > CHI2_CRITICAL_1DF_P01 {
        return Err(Error::Protocol(format!(
            "leakage needs uncorrelated evaluation data; chi-square {stat:.3} rejects independence at p < 0.01"
        )));
    }
    Ok(train_probe(reps, non_target_labels, cfg, seed)?.accuracy)
}

/// Counting metrics over the four `(y, group)` cells.
///
/// Cells are indexed `[y][group]`. Gaps are signed `group 0 - group 1`.
/// A rate whose denominator is zero is `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub cell_acc: [[Option<f64>; 2]; 2],
    pub cell_count: [[usize; 2]; 2],
    pub overall_acc: Option<f64>,
    pub avg_acc: Option<f64>,
    pub worst_acc: Option<f64>,
    pub tpr: [Option<f64>; 2],
    pub tnr: [Option<f64>; 2],
    pub tpr_gap: Option<f64>,
    pub tnr_gap: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn group_metrics(pred: &[u8], y: &[u8], group: &[u8]) -> Result<GroupMetrics> {
    if pred.len() != y.len() || y.len() != group.len() {
        return Err(Error::Input(
            "predictions, labels and groups must share a length".into(),
        ));
    }
    if pred.iter().chain(y).chain(group).any(|&v| v > 1) {
        return Err(Error::Input(
            "predictions, labels and groups must be 0 or 1".into(),
        ));
    }
    let mut correct = [[0usize; 2]; 2];
    let mut count = [[0usize; 2]; 2];
    for i in 0..y.len() {
        let (c, g) = (y[i] as usize, group[i] as usize);
        count[c][g] += 1;
        if pred[i] == y[i] {
            correct[c][g] += 1;
        }
    }
    let cell_acc = [
        [
            ratio(correct[0][0], count[0][0]),
            ratio(correct[0][1], count[0][1]),
        ],
        [
            ratio(correct[1][0], count[1][0]),
            ratio(correct[1][1], count[1][1]),
        ],
    ];
    let defined: Vec<f64> = cell_acc.iter().flatten().flatten().copied().collect();
    let avg_acc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    let worst_acc = defined.iter().copied().reduce(f64::min);
    // TPR_g = TP_g / (TP_g + FN_g) is the accuracy on the positive cell of g.
    let tpr = [cell_acc[1][0], cell_acc[1][1]];
    let tnr = [cell_acc[0][0], cell_acc[0][1]];
    let gap = |r: [Option<f64>; 2]| r[0].zip(r[1]).map(|(a, b)| a - b);
    let total_correct: usize = correct.iter().flatten().sum();
    Ok(GroupMetrics {
        cell_acc,
        cell_count: count,
        overall_acc: ratio(total_correct, y.len()),
        avg_acc,
        worst_acc,
        tpr,
        tnr,
        tpr_gap: gap(tpr),
        tnr_gap: gap(tnr),
    })
}

/// Pooled representations for each aspect. Without masks both aspects share
/// the unmasked representation.
pub fn representations(
    enc: &Encoder,
    masks: Option<&MaskPair>,
    data: &[LabeledExample],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let tokens: Vec<&[usize]> = data.iter().map(|e| e.tokens.as_slice()).collect();
    match masks {
        Some(m) => Ok((
            enc.encode_batch(&tokens, Some(m), MaskSelector::AspectA)?,
            enc.encode_batch(&tokens, Some(m), MaskSelector::AspectB)?,
        )),
        None => {
            let z = enc.encode_batch(&tokens, None, MaskSelector::None)?;
            Ok((z.clone(), z))
        }
    }
}

/// Writes `example_id,aspect,y_a,y_b,z0,...` with one row per example and
/// aspect, values at 12 significant digits.
pub fn export_representations(
    enc: &Encoder,
    masks: Option<&MaskPair>,
    data: &[LabeledExample],
    path: &Path,
) -> Result<()> {
    let (za, zb) = representations(enc, masks, data)?;
    let d = enc.config().d_model;
    let mut out = String::from("example_id,aspect,y_a,y_b");
    for j in 0..d {
        write!(out, ",z{j}").unwrap();
    }
    out.push('\n');
    for (i, ex) in data.iter().enumerate() {
        for (aspect, z) in [("a", &za[i]), ("b", &zb[i])] {
            write!(out, "{i},{aspect},{},{}", ex.y_a, ex.y_b).unwrap();
            for v in z {
                write!(out, ",{}", fmt_sig(*v)).unwrap();
            }
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One parsed row of a representation CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationRow {
    pub example_id: usize,
    pub aspect: String,
    pub y_a: u8,
    pub y_b: u8,
    pub values: Vec<f64>,
}

pub fn read_representations(path: &Path) -> Result<Vec<RepresentationRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let bad = |msg: &str| Error::format(path, format!("line {}: {msg}", n + 1));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 5 {
            return Err(bad("too few fields"));
        }
        let values = fields[4..]
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(&e.to_string()))?;
        rows.push(RepresentationRow {
            example_id: fields[0].parse().map_err(|_| bad("bad example_id"))?,
            aspect: fields[1].to_string(),
            y_a: fields[2].parse().map_err(|_| bad("bad y_a"))?,
            y_b: fields[3].parse().map_err(|_| bad("bad y_b"))?,
            values,
        });
    }
    Ok(rows)
}
