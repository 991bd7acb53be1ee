//! Corpus statistics and scheduling: taxonomy rebalancing weights, Gini
//! diagnostics, curriculum difficulty buckets with the sigmoid schedule,
//! cross-product minimum-representation pools, and the coarse-to-fine
//! cascade orchestration skeleton with pluggable scorers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{kahan_sum, sigmoid_scalar, SeededRng};

#[derive(Debug, Error)]
pub enum DatapipeError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("corpus record error: {0}")]
    Record(String),
}

/// Quality stratum of a clip after curation.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    B,
    A,
    S,
    Rejected,
}

/// One value per taxonomy axis; the clip's production coordinate.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AxisLabel {
    pub style: String,
    pub motion: String,
    pub camera: String,
    pub vfx: String,
}

/// Continuous difficulty scores. The style score may be absent, in which
/// case the clip's style-cluster metadata drives the style bucket.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DifficultyScores {
    #[serde(default)]
    pub style: Option<f64>,
    pub motion: f64,
    pub deformation: f64,
}

/// A corpus entry in the newline-delimited manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: String,
    pub label: AxisLabel,
    pub scores: DifficultyScores,
    #[serde(default = "default_tier")]
    pub tier: Tier,
    #[serde(default)]
    pub style_cluster: Option<String>,
    #[serde(default)]
    pub era: Option<String>,
}

fn default_tier() -> Tier {
    Tier::B
}

impl ClipRecord {
    pub fn validate(&self) -> Result<(), DatapipeError> {
        let finite = self.scores.motion.is_finite()
            && self.scores.deformation.is_finite()
            && self.scores.style.map(|s| s.is_finite()).unwrap_or(true);
        if !finite {
            return Err(DatapipeError::Record(format!(
                "clip {} has non-finite difficulty scores",
                self.id
            )));
        }
        Ok(())
    }
}

/// Parse a newline-delimited JSON corpus manifest.
pub fn parse_manifest(text: &str) -> Result<Vec<ClipRecord>, DatapipeError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let record: ClipRecord = serde_json::from_str(line)
            .map_err(|e| DatapipeError::Record(format!("line {}: {e}", lineno + 1)))?;
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}

pub fn serialize_manifest(corpus: &[ClipRecord]) -> String {
    corpus
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serialization cannot fail"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Marginal value counts per axis over a corpus.
#[derive(Clone, Debug, Default)]
pub struct MarginalCounts {
    pub style: BTreeMap<String, u64>,
    pub motion: BTreeMap<String, u64>,
    pub camera: BTreeMap<String, u64>,
    pub vfx: BTreeMap<String, u64>,
}

impl MarginalCounts {
    pub fn from_corpus(corpus: &[ClipRecord]) -> Self {
        let mut counts = MarginalCounts::default();
        for clip in corpus {
            *counts.style.entry(clip.label.style.clone()).or_default() += 1;
            *counts.motion.entry(clip.label.motion.clone()).or_default() += 1;
            *counts.camera.entry(clip.label.camera.clone()).or_default() += 1;
            *counts.vfx.entry(clip.label.vfx.clone()).or_default() += 1;
        }
        counts
    }

    /// (n_s, n_m, n_c, n_v) for one clip's label.
    pub fn for_label(&self, label: &AxisLabel) -> (u64, u64, u64, u64) {
        (
            self.style.get(&label.style).copied().unwrap_or(0),
            self.motion.get(&label.motion).copied().unwrap_or(0),
            self.camera.get(&label.camera).copied().unwrap_or(0),
            self.vfx.get(&label.vfx).copied().unwrap_or(0),
        )
    }
}

/// Default flattening exponent for rebalancing.
pub const DEFAULT_ALPHA: f64 = 0.7;

/// Rebalancing weight w = (1 / (n_s n_m n_c n_v))^alpha. At alpha = 0 every
/// clip weighs 1; at alpha = 1 the marginal product is fully flattened.
pub fn resample_weight(counts: (u64, u64, u64, u64), alpha: f64) -> Result<f64, DatapipeError> {
    let (s, m, c, v) = counts;
    if s == 0 || m == 0 || c == 0 || v == 0 {
        return Err(DatapipeError::Invalid(
            "marginal counts must be at least 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DatapipeError::Invalid(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let product = (s as f64) * (m as f64) * (c as f64) * (v as f64);
    Ok((1.0 / product).powf(alpha))
}

/// Mean-absolute-difference Gini coefficient over a non-negative frequency
/// vector: G = sum_ij |f_i - f_j| / (2 n sum_i f_i). Uniform vectors score 0;
/// a one-hot vector of length n scores (n-1)/n.
pub fn gini(frequencies: &[f64]) -> Result<f64, DatapipeError> {
    if frequencies.iter().any(|f| *f < 0.0 || !f.is_finite()) {
        return Err(DatapipeError::Invalid(
            "frequencies must be finite and non-negative".into(),
        ));
    }
    let total: f64 = kahan_sum(frequencies.iter().copied());
    if total <= 0.0 {
        return Err(DatapipeError::Invalid(
            "at least one frequency must be positive".into(),
        ));
    }
    let n = frequencies.len() as f64;
    // O(n log n) via the sorted-rank identity for the pairwise sum.
    let mut sorted = frequencies.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let weighted: f64 = kahan_sum(
        sorted
            .iter()
            .enumerate()
            .map(|(i, &f)| (2.0 * (i as f64 + 1.0) - n - 1.0) * f),
    );
    Ok(weighted / (n * total))
}

/// Quantile bucket count and sigmoid schedule shape.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub q: usize,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            q: 5,
            gamma: 8.0,
            beta: 0.05,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<(), DatapipeError> {
        if self.q < 2 {
            return Err(DatapipeError::Invalid(format!(
                "bucket count must be at least 2, got {}",
                self.q
            )));
        }
        Ok(())
    }
}

/// Per-clip quantile bucket triple with its mean normalized difficulty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DifficultyBucket {
    pub q_style: usize,
    pub q_motion: usize,
    pub q_deformation: usize,
    pub q: usize,
}

impl DifficultyBucket {
    pub fn normalized(&self) -> (f64, f64, f64) {
        let norm = |b: usize| (b as f64 - 1.0) / (self.q as f64 - 1.0);
        (
            norm(self.q_style),
            norm(self.q_motion),
            norm(self.q_deformation),
        )
    }

    /// Mean normalized difficulty in [0, 1].
    pub fn mean_difficulty(&self) -> f64 {
        let (a, b, c) = self.normalized();
        (a + b + c) / 3.0
    }
}

/// Quantile edges at j/Q for j in 1..Q, by linear interpolation over the
/// sorted sample.
fn quantile_edges(scores: &[f64], q: usize) -> Vec<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = sorted.len();
    (1..q)
        .map(|j| {
            let pos = (j as f64 / q as f64) * (n as f64 - 1.0);
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            sorted[lo] + (sorted[hi] - sorted[lo]) * frac
        })
        .collect()
}

/// Right-closed bucket assignment: a score equal to an edge stays in the
/// lower bucket, so ties land together.
fn bucket_of(score: f64, edges: &[f64]) -> usize {
    1 + edges.iter().filter(|&&e| score > e).count()
}

/// Style difficulty scores: the explicit style score when present, else the
/// negated corpus frequency of the clip's style cluster (rarer is harder).
fn style_scores(corpus: &[ClipRecord]) -> Result<Vec<f64>, DatapipeError> {
    let mut cluster_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for clip in corpus {
        if clip.scores.style.is_none() {
            let cluster = clip.style_cluster.as_deref().ok_or_else(|| {
                DatapipeError::Record(format!(
                    "clip {} has neither a style score nor a style cluster",
                    clip.id
                ))
            })?;
            *cluster_counts.entry(cluster).or_default() += 1;
        }
    }
    Ok(corpus
        .iter()
        .map(|clip| match clip.scores.style {
            Some(s) => s,
            None => {
                let cluster = clip.style_cluster.as_deref().expect("checked above");
                -(cluster_counts[cluster] as f64)
            }
        })
        .collect())
}

/// Discretize the three difficulty axes into Q quantile buckets per clip.
pub fn bucketize(corpus: &[ClipRecord], q: usize) -> Result<Vec<DifficultyBucket>, DatapipeError> {
    if corpus.is_empty() {
        return Err(DatapipeError::Invalid("corpus is empty".into()));
    }
    if q < 2 {
        return Err(DatapipeError::Invalid(format!(
            "bucket count must be at least 2, got {q}"
        )));
    }
    let style = style_scores(corpus)?;
    let motion: Vec<f64> = corpus.iter().map(|c| c.scores.motion).collect();
    let deformation: Vec<f64> = corpus.iter().map(|c| c.scores.deformation).collect();
    let style_edges = quantile_edges(&style, q);
    let motion_edges = quantile_edges(&motion, q);
    let deformation_edges = quantile_edges(&deformation, q);
    Ok((0..corpus.len())
        .map(|i| DifficultyBucket {
            q_style: bucket_of(style[i], &style_edges),
            q_motion: bucket_of(motion[i], &motion_edges),
            q_deformation: bucket_of(deformation[i], &deformation_edges),
            q,
        })
        .collect())
}

/// Sigmoid curriculum gate: w = sigma(gamma (tau - D + beta)). Monotone
/// increasing in training progress tau, decreasing in difficulty D.
pub fn curriculum_weight(tau: f64, mean_difficulty: f64, gamma: f64, beta: f64) -> f64 {
    sigmoid_scalar(gamma * (tau - mean_difficulty + beta))
}

/// Per-clip sampling probabilities combining the curriculum gate with the
/// static rebalancing weight, normalized to sum 1.
pub fn sampling_distribution(
    corpus: &[ClipRecord],
    tau: f64,
    alpha: f64,
    config: &CurriculumConfig,
) -> Result<Vec<f64>, DatapipeError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(DatapipeError::Invalid(format!(
            "tau must lie in [0, 1], got {tau}"
        )));
    }
    config.validate()?;
    let buckets = bucketize(corpus, config.q)?;
    let counts = MarginalCounts::from_corpus(corpus);
    let mut weights = Vec::with_capacity(corpus.len());
    for (clip, bucket) in corpus.iter().zip(&buckets) {
        let w_cur = curriculum_weight(tau, bucket.mean_difficulty(), config.gamma, config.beta);
        let w_bal = resample_weight(counts.for_label(&clip.label), alpha)?;
        weights.push(w_cur * w_bal);
    }
    let total = kahan_sum(weights.iter().copied());
    if total <= 0.0 {
        return Err(DatapipeError::Invalid(
            "all sampling weights vanished".into(),
        ));
    }
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

/// Weight multipliers raising each under-represented (style, content) pair
/// to the floor; pairs absent from the corpus are reported uncoverable.
#[derive(Clone, Debug, Default, Serialize)]
pub struct PoolAdjustment {
    pub multipliers: BTreeMap<(String, String), f64>,
    pub uncoverable: Vec<(String, String)>,
}

/// Compute pool adjustments from observed pair counts. The pair universe is
/// the cross product of observed style values and observed content values;
/// weights are scaled, never physically duplicated.
pub fn min_representation_pool(
    pair_counts: &BTreeMap<(String, String), u64>,
    floor: f64,
) -> Result<PoolAdjustment, DatapipeError> {
    if floor < 0.0 {
        return Err(DatapipeError::Invalid(format!(
            "floor must be non-negative, got {floor}"
        )));
    }
    let mut styles: Vec<&String> = pair_counts.keys().map(|(s, _)| s).collect();
    styles.sort();
    styles.dedup();
    let mut contents: Vec<&String> = pair_counts.keys().map(|(_, c)| c).collect();
    contents.sort();
    contents.dedup();

    let mut out = PoolAdjustment::default();
    for s in &styles {
        for c in &contents {
            let key = ((*s).clone(), (*c).clone());
            match pair_counts.get(&key).copied().unwrap_or(0) {
                0 => out.uncoverable.push(key),
                n => {
                    let multiplier = if (n as f64) < floor {
                        floor / n as f64
                    } else {
                        1.0
                    };
                    out.multipliers.insert(key, multiplier);
                }
            }
        }
    }
    Ok(out)
}

/// One filtering operator with a pluggable scorer. Clips pass when the
/// score reaches the threshold.
pub struct CascadeOperator {
    pub name: String,
    pub cost_rank: u32,
    pub threshold: f64,
    pub scorer: Box<dyn Fn(&ClipRecord) -> f64 + Send + Sync>,
}

/// Stricter per-operator thresholds for A-tier and S-tier promotion,
/// applied to the scores recorded during the base pass.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TierThresholds {
    pub a: BTreeMap<String, f64>,
    pub s: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct OperatorStats {
    pub name: String,
    pub evaluated: usize,
    pub passed: usize,
}

impl OperatorStats {
    pub fn pass_rate(&self) -> f64 {
        if self.evaluated == 0 {
            0.0
        } else {
            self.passed as f64 / self.evaluated as f64
        }
    }
}

#[derive(Serialize)]
pub struct CascadeOutcome {
    /// Tier per input clip, in input order.
    pub tiers: Vec<Tier>,
    /// Name of the operator that rejected the clip, when rejected.
    pub rejected_at: Vec<Option<String>>,
    /// Recorded operator scores per surviving stage.
    pub scores: Vec<BTreeMap<String, f64>>,
    pub stats: Vec<OperatorStats>,
}

/// Run the operator cascade in ascending cost order. A clip stops at its
/// first failing operator; survivors enter B-tier and are promoted through
/// A and S by the stricter threshold sets.
pub fn run_cascade(
    corpus: &[ClipRecord],
    operators: &[CascadeOperator],
    thresholds: &TierThresholds,
) -> Result<CascadeOutcome, DatapipeError> {
    for pair in operators.windows(2) {
        if pair[1].cost_rank < pair[0].cost_rank {
            return Err(DatapipeError::Invalid(format!(
                "operators must be sorted by ascending cost rank: {} before {}",
                pair[0].name, pair[1].name
            )));
        }
    }
    let mut tiers = vec![Tier::B; corpus.len()];
    let mut rejected_at = vec![None; corpus.len()];
    let mut scores: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); corpus.len()];
    let mut stats: Vec<OperatorStats> = operators
        .iter()
        .map(|op| OperatorStats {
            name: op.name.clone(),
            evaluated: 0,
            passed: 0,
        })
        .collect();

    for (i, clip) in corpus.iter().enumerate() {
        for (j, op) in operators.iter().enumerate() {
            stats[j].evaluated += 1;
            let score = (op.scorer)(clip);
            scores[i].insert(op.name.clone(), score);
            if score >= op.threshold {
                stats[j].passed += 1;
            } else {
                tiers[i] = Tier::Rejected;
                rejected_at[i] = Some(op.name.clone());
                break;
            }
        }
        if tiers[i] == Tier::Rejected {
            continue;
        }
        // An empty threshold set defines no promotion criteria.
        let meets = |set: &BTreeMap<String, f64>| {
            !set.is_empty()
                && set
                    .iter()
                    .all(|(name, min)| scores[i].get(name).map(|s| s >= min).unwrap_or(false))
        };
        if meets(&thresholds.a) {
            tiers[i] = Tier::A;
            if meets(&thresholds.s) {
                tiers[i] = Tier::S;
            }
        }
    }
    Ok(CascadeOutcome {
        tiers,
        rejected_at,
        scores,
        stats,
    })
}

/// Synthetic four-axis corpus with Zipf-distributed marginals, used by the
/// rebalancing demonstrations and tests.
pub fn synthetic_zipf_corpus(
    n: usize,
    axis_sizes: (usize, usize, usize, usize),
    exponent: f64,
    rng: &mut SeededRng,
) -> Vec<ClipRecord> {
    (0..n)
        .map(|i| {
            let s = rng.zipf(axis_sizes.0, exponent);
            let m = rng.zipf(axis_sizes.1, exponent);
            let c = rng.zipf(axis_sizes.2, exponent);
            let v = rng.zipf(axis_sizes.3, exponent);
            ClipRecord {
                id: format!("clip{i:05}"),
                label: AxisLabel {
                    style: format!("s{s:02}"),
                    motion: format!("m{m:02}"),
                    camera: format!("c{c:02}"),
                    vfx: format!("v{v:02}"),
                },
                scores: DifficultyScores {
                    style: Some(s as f64),
                    motion: rng.uniform(),
                    deformation: rng.uniform(),
                },
                tier: Tier::B,
                style_cluster: Some(format!("cluster{s:02}")),
                era: None,
            }
        })
        .collect()
}

/// Motion-axis Gini before rebalancing and after, with post-resampling
/// weights treated as soft counts.
pub fn motion_gini_before_after(
    corpus: &[ClipRecord],
    alpha: f64,
) -> Result<(f64, f64), DatapipeError> {
    let counts = MarginalCounts::from_corpus(corpus);
    let before: Vec<f64> = counts.motion.values().map(|&c| c as f64).collect();
    let mut soft: BTreeMap<&str, f64> = BTreeMap::new();
    for clip in corpus {
        let w = resample_weight(counts.for_label(&clip.label), alpha)?;
        *soft.entry(&clip.label.motion).or_default() += w;
    }
    let after: Vec<f64> = soft.values().copied().collect();
    Ok((gini(&before)?, gini(&after)?))
}
