//! Synthetic two-aspect token data with a controllable label joint.
//!
//! The vocabulary is split into four quarters: band A (`[0, V/4)`), band B
//! (`[V/4, V/2)`) and neutral filler (`[V/2, V)`). Every position picks a
//! band independently. A band-A token is drawn from the lower half of the
//! band when its class is 0 and the upper half when it is 1, where the class
//! is `y_a` flipped with probability `noise_a`; band B works the same way
//! with `y_b` and `noise_b`. No token carries information about both labels,
//! so the two aspects are correlated only through the label joint.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub tokens: Vec<usize>,
    pub y_a: u8,
    pub y_b: u8,
}

/// Probability of each `(y_a, y_b)` cell; `p01` is `y_a = 0, y_b = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointDistribution {
    pub p00: f64,
    pub p01: f64,
    pub p10: f64,
    pub p11: f64,
}

impl JointDistribution {
    pub fn new(p00: f64, p01: f64, p10: f64, p11: f64) -> Result<Self> {
        let j = Self { p00, p01, p10, p11 };
        let p = j.problems();
        if p.is_empty() {
            Ok(j)
        } else {
            Err(Error::Input(p.join("; ")))
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let cells = self.cells();
        let mut out = Vec::new();
        if cells.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            out.push(format!("joint cells must be non-negative, got {cells:?}"));
        }
        let sum: f64 = cells.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            out.push(format!("joint cells must sum to 1, got {sum}"));
        }
        out
    }

    pub fn uncorrelated() -> Self {
        Self {
            p00: 0.25,
            p01: 0.25,
            p10: 0.25,
            p11: 0.25,
        }
    }

    /// The correlated training split: 42.5 / 7.5 / 7.5 / 42.5, with
    /// `y_a = 1` (positive) concentrated on `y_b = 1` (drama-like).
    pub fn correlated() -> Self {
        Self {
            p00: 0.425,
            p01: 0.075,
            p10: 0.075,
            p11: 0.425,
        }
    }

    /// Joint with `P(y_b = 1) = 0.5` and `P(y_a = 1 | y_b = 1) = q`, and the
    /// mirror-image conditional `P(y_a = 1 | y_b = 0) = 1 - q`.
    pub fn from_conditional(q: f64) -> Result<Self> {
        Self::new(q / 2.0, (1.0 - q) / 2.0, (1.0 - q) / 2.0, q / 2.0)
    }

    pub fn cells(&self) -> [f64; 4] {
        [self.p00, self.p01, self.p10, self.p11]
    }

    pub fn cell(&self, y_a: u8, y_b: u8) -> f64 {
        self.cells()[(y_a as usize) * 2 + y_b as usize]
    }

    /// `P(y_a = 1 | y_b = 1)`.
    pub fn positive_given_drama(&self) -> f64 {
        self.p11 / (self.p01 + self.p11)
    }
}

/// Named training correlations, expressed as `P(y_a = 1 | y_b = 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationSetting {
    Strong,
    Moderate,
    None,
}

impl CorrelationSetting {
    pub const ALL: [CorrelationSetting; 3] = [Self::Strong, Self::Moderate, Self::None];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Strong => "strong",
            Self::Moderate => "moderate",
            Self::None => "none",
        }
    }

    pub fn positive_given_drama(self) -> f64 {
        match self {
            Self::Strong => 0.15,
            Self::Moderate => 0.25,
            Self::None => 0.5,
        }
    }
}

impl std::str::FromStr for CorrelationSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strong" => Ok(Self::Strong),
            "moderate" => Ok(Self::Moderate),
            "none" => Ok(Self::None),
            other => Err(Error::Input(format!(
                "unknown correlation setting {other} (expected strong, moderate or none)"
            ))),
        }
    }
}

pub fn correlation_settings(name: &str) -> Result<JointDistribution> {
    let setting: CorrelationSetting = name.parse()?;
    JointDistribution::from_conditional(setting.positive_given_drama())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub p_band_a: f64,
    pub p_band_b: f64,
    pub noise_a: f64,
    pub noise_b: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            seq_len: 16,
            p_band_a: 0.3,
            p_band_b: 0.3,
            noise_a: 0.25,
            noise_b: 0.15,
        }
    }
}

impl GenConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.vocab_size < 8 || self.vocab_size % 4 != 0 {
            out.push(format!(
                "data.gen.vocab_size must be a multiple of 4 and at least 8, got {}",
                self.vocab_size
            ));
        }
        if self.seq_len == 0 {
            out.push("data.gen.seq_len must be positive".into());
        }
        for (name, p) in [
            ("p_band_a", self.p_band_a),
            ("p_band_b", self.p_band_b),
            ("noise_a", self.noise_a),
            ("noise_b", self.noise_b),
        ] {
            if !(0.0..=1.0).contains(&p) {
                out.push(format!("data.gen.{name} must be in [0, 1], got {p}"));
            }
        }
        if self.p_band_a + self.p_band_b > 1.0 {
            out.push("data.gen.p_band_a + p_band_b must not exceed 1".into());
        }
        out
    }

    fn quarter(&self) -> usize {
        self.vocab_size / 4
    }

    fn band_token(&self, rng: &mut seed::Rng, offset: usize, class: u8) -> usize {
        let half = self.quarter() / 2;
        let start = offset + if class == 1 { half } else { 0 };
        let width = if class == 1 {
            self.quarter() - half
        } else {
            half
        };
        start + rng.gen_range(0..width)
    }
}

/// Draws `n` examples whose label pairs follow `joint`.
pub fn generate(
    cfg: &GenConfig,
    joint: &JointDistribution,
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    let mut problems = cfg.problems();
    problems.extend(joint.problems());
    if n == 0 {
        problems.push("n must be at least 1".into());
    }
    if !problems.is_empty() {
        return Err(Error::Input(problems.join("; ")));
    }
    let mut rng = seed::rng(seed);
    let cells = joint.cells();
    let q = cfg.quarter();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut cell = 3;
        for (i, p) in cells.iter().enumerate() {
            acc += p;
            if u < acc {
                cell = i;
                break;
            }
        }
        let (y_a, y_b) = ((cell / 2) as u8, (cell % 2) as u8);
        let tokens = (0..cfg.seq_len)
            .map(|_| {
                let band: f64 = rng.gen();
                if band < cfg.p_band_a {
                    let class = if rng.gen::<f64>() < cfg.noise_a {
                        1 - y_a
                    } else {
                        y_a
                    };
                    cfg.band_token(&mut rng, 0, class)
                } else if band < cfg.p_band_a + cfg.p_band_b {
                    let class = if rng.gen::<f64>() < cfg.noise_b {
                        1 - y_b
                    } else {
                        y_b
                    };
                    cfg.band_token(&mut rng, q, class)
                } else {
                    2 * q + rng.gen_range(0..cfg.vocab_size - 2 * q)
                }
            })
            .collect();
        out.push(LabeledExample { tokens, y_a, y_b });
    }
    Ok(out)
}

/// Like [`generate`], but the number of examples in each label cell is
/// fixed to `n * p` (largest-remainder rounding) instead of sampled, and the
/// examples are shuffled. With the uncorrelated joint the labels are exactly
/// independent in the sample.
pub fn generate_exact(
    cfg: &GenConfig,
    joint: &JointDistribution,
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    let cells = joint.cells();
    let mut counts: Vec<usize> = cells
        .iter()
        .map(|p| (p * n as f64).floor() as usize)
        .collect();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| {
        let frac = |k: usize| cells[k] * n as f64 - counts[k] as f64;
        frac(j).total_cmp(&frac(i)).then(i.cmp(&j))
    });
    let short = n.saturating_sub(counts.iter().sum());
    for &k in order.iter().take(short) {
        counts[k] += 1;
    }
    let mut out = Vec::with_capacity(n);
    for (k, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let mut one_hot = [0.0; 4];
        one_hot[k] = 1.0;
        let j = JointDistribution::new(one_hot[0], one_hot[1], one_hot[2], one_hot[3])?;
        out.extend(generate(
            cfg,
            &j,
            count,
            seed::sub_seed(seed, &format!("cell{k}")),
        )?);
    }
    if out.is_empty() {
        return Err(Error::Input("n must be at least 1".into()));
    }
    out.shuffle(&mut seed::sub_rng(seed, "order"));
    Ok(out)
}

/// Counts per `(y_a, y_b)` cell, indexed `[y_a][y_b]`.
pub fn cell_counts(data: &[LabeledExample]) -> [[usize; 2]; 2] {
    let mut c = [[0usize; 2]; 2];
    for ex in data {
        c[ex.y_a as usize][ex.y_b as usize] += 1;
    }
    c
}

/// Empirical mutual information between `y_a` and `y_b`, in nats.
pub fn mutual_information(data: &[LabeledExample]) -> f64 {
    let c = cell_counts(data);
    let n = data.len() as f64;
    let pa = [
        (c[0][0] + c[0][1]) as f64 / n,
        (c[1][0] + c[1][1]) as f64 / n,
    ];
    let pb = [
        (c[0][0] + c[1][0]) as f64 / n,
        (c[0][1] + c[1][1]) as f64 / n,
    ];
    let mut mi = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            let p = c[a][b] as f64 / n;
            if p > 0.0 {
                mi += p * (p / (pa[a] * pb[b])).ln();
            }
        }
    }
    mi
}

/// Indices `(i0, i1, i2)` with `y_a(i0) = y_a(i1) != y_a(i2)` and
/// `y_b(i0) = y_b(i2) != y_b(i1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub i0: usize,
    pub i1: usize,
    pub i2: usize,
}

impl Triplet {
    pub fn is_valid(&self, data: &[LabeledExample]) -> bool {
        let (x0, x1, x2) = (&data[self.i0], &data[self.i1], &data[self.i2]);
        x0.y_a == x1.y_a && x1.y_a != x2.y_a && x0.y_b == x2.y_b && x2.y_b != x1.y_b
    }
}

/// Samples `m` triplets uniformly over all valid index combinations.
pub fn build_triplets(data: &[LabeledExample], m: usize, seed: u64) -> Result<Vec<Triplet>> {
    let mut by_cell: [[Vec<usize>; 2]; 2] = Default::default();
    for (i, ex) in data.iter().enumerate() {
        if ex.y_a > 1 || ex.y_b > 1 {
            return Err(Error::Data(format!(
                "example {i} has a label outside {{0, 1}}"
            )));
        }
        by_cell[ex.y_a as usize][ex.y_b as usize].push(i);
    }
    for a in 0..2 {
        for b in 0..2 {
            if by_cell[a][b].is_empty() {
                return Err(Error::Data(format!(
                    "label cell (y_a={a}, y_b={b}) is empty"
                )));
            }
        }
    }
    // The number of triplets anchored in cell (a, b) is |a,b| * |a,1-b| * |1-a,b|.
    let size = |a: usize, b: usize| by_cell[a][b].len() as f64;
    let anchors: Vec<((usize, usize), f64)> = [(0, 0), (0, 1), (1, 0), (1, 1)]
        .into_iter()
        .map(|(a, b)| ((a, b), size(a, b) * size(a, 1 - b) * size(1 - a, b)))
        .collect();
    let total: f64 = anchors.iter().map(|(_, w)| w).sum();
    let mut rng = seed::rng(seed);
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let u = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = anchors[3].0;
        for &(cell, w) in &anchors {
            acc += w;
            if u < acc {
                chosen = cell;
                break;
            }
        }
        let (a, b) = chosen;
        let pick = |rng: &mut seed::Rng, cell: &Vec<usize>| cell[rng.gen_range(0..cell.len())];
        let i0 = pick(&mut rng, &by_cell[a][b]);
        let i1 = pick(&mut rng, &by_cell[a][1 - b]);
        let i2 = pick(&mut rng, &by_cell[1 - a][b]);
        out.push(Triplet { i0, i1, i2 });
    }
    Ok(out)
}

/// Writes one example per line: token ids, then `y_a`, then `y_b`, after a
/// header line `vocab_size=<V> seq_len=<S>`.
pub fn write_dataset(path: &Path, vocab_size: usize, data: &[LabeledExample]) -> Result<()> {
    let seq_len = data.first().map(|e| e.tokens.len()).unwrap_or(0);
    let mut out = format!("vocab_size={vocab_size} seq_len={seq_len}\n");
    for ex in data {
        for t in &ex.tokens {
            write!(out, "{t} ").unwrap();
        }
        writeln!(out, "{} {}", ex.y_a, ex.y_b).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_dataset`]; returns `(vocab_size, data)`.
pub fn read_dataset(path: &Path) -> Result<(usize, Vec<LabeledExample>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty file"))?;
    let mut vocab = None;
    let mut seq_len = None;
    for field in header.split_whitespace() {
        match field.split_once('=') {
            Some(("vocab_size", v)) => vocab = v.parse::<usize>().ok(),
            Some(("seq_len", v)) => seq_len = v.parse::<usize>().ok(),
            _ => return Err(Error::format(path, format!("bad header field {field}"))),
        }
    }
    let (vocab, seq_len) = vocab
        .zip(seq_len)
        .ok_or_else(|| Error::format(path, "header needs vocab_size and seq_len"))?;
    let mut data = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let nums = line
            .split_whitespace()
            .map(str::parse::<usize>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 2)))?;
        if nums.len() != seq_len + 2 {
            return Err(Error::format(
                path,
                format!("line {}: expected {} fields", lineno + 2, seq_len + 2),
            ));
        }
        let (y_a, y_b) = (nums[seq_len], nums[seq_len + 1]);
        if y_a > 1 || y_b > 1 || nums[..seq_len].iter().any(|&t| t >= vocab) {
            return Err(Error::format(
                path,
                format!("line {}: value out of range", lineno + 2),
            ));
        }
        data.push(LabeledExample {
            tokens: nums[..seq_len].to_vec(),
            y_a: y_a as u8,
            y_b: y_b as u8,
        });
    }
    Ok((vocab, data))
}
