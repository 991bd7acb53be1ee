//! Judge reward aggregation, preference-pair construction, and the
//! deformation-aware DPO objective with its diffusion approximation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dit::{DitError, ToyDenoiser};
use crate::numerics::{softplus_scalar, Graph, NodeId, NumericsError, Tensor};
use crate::taxonomy::ProductionSpec;

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Dit(#[from] DitError),
}

/// Per-dimension Judge scores on the 1..5 scale.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub face: f64,
    pub limb: f64,
    pub line: f64,
    pub motion: f64,
}

impl JudgeScores {
    pub fn validate(&self) -> Result<(), AlignmentError> {
        for (name, v) in self.iter() {
            if !(1.0..=5.0).contains(&v) {
                return Err(AlignmentError::Invalid(format!(
                    "score {name} = {v} outside [1, 5]"
                )));
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> [(&'static str, f64); 4] {
        [
            ("face", self.face),
            ("limb", self.limb),
            ("line", self.line),
            ("motion", self.motion),
        ]
    }

    pub fn min(&self) -> f64 {
        self.face.min(self.limb).min(self.line).min(self.motion)
    }
}

/// Reward head weights; equal by default.
#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct RewardWeights {
    pub face: f64,
    pub limb: f64,
    pub line: f64,
    pub motion: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            face: 0.25,
            limb: 0.25,
            line: 0.25,
            motion: 0.25,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), AlignmentError> {
        if [self.face, self.limb, self.line, self.motion]
            .iter()
            .any(|w| *w < 0.0)
        {
            return Err(AlignmentError::Invalid(
                "reward weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Weighted sum of the four Judge dimensions.
pub fn composite_reward(scores: &JudgeScores, weights: &RewardWeights) -> f64 {
    weights.face * scores.face
        + weights.limb * scores.limb
        + weights.line * scores.line
        + weights.motion * scores.motion
}

/// One generated candidate with its Judge scores.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub prompt_id: String,
    pub scores: JudgeScores,
    pub composite: f64,
}

impl Candidate {
    pub fn new(
        id: impl Into<String>,
        prompt_id: impl Into<String>,
        scores: JudgeScores,
        weights: &RewardWeights,
    ) -> Result<Self, AlignmentError> {
        scores.validate()?;
        weights.validate()?;
        Ok(Self {
            id: id.into(),
            prompt_id: prompt_id.into(),
            composite: composite_reward(&scores, weights),
            scores,
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSource {
    Auto,
    Expert,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt_id: String,
    pub winner: String,
    pub loser: String,
    pub source: PairSource,
    pub gap: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueReason {
    SmallGap,
    Tie,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpertQueueEntry {
    pub prompt_id: String,
    pub reason: QueueReason,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    TooFewSurvivors,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct PairOutcome {
    pub pairs: Vec<PreferencePair>,
    pub expert_queue: Vec<ExpertQueueEntry>,
    pub skipped: Vec<(String, SkipReason)>,
}

/// Pair-construction thresholds.
#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct PairConfig {
    /// Candidates whose minimum per-dimension score falls below this are
    /// rejected before pairing.
    pub min_score_threshold: f64,
    /// Prompts whose top-minus-bottom composite gap is below this go to the
    /// expert queue instead of producing automatic pairs.
    pub small_gap: f64,
    /// When set, small-gap prompts still contribute their automatic pairs
    /// in addition to being queued.
    pub emit_auto_pairs_for_small_gap: bool,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            min_score_threshold: 2.0,
            small_gap: 0.5,
            emit_auto_pairs_for_small_gap: false,
        }
    }
}

/// Build directed preference pairs for one prompt's candidates.
///
/// Survivors are pairs with distinct composites, directed higher to lower.
/// A prompt with fewer than two survivors is skipped; a small top-to-bottom
/// gap routes the prompt to the expert queue; tied composites produce no
/// automatic pair and also queue the prompt.
pub fn build_pairs(candidates: &[Candidate], config: &PairConfig) -> PairOutcome {
    let mut out = PairOutcome::default();
    if candidates.is_empty() {
        return out;
    }
    let prompt_id = candidates[0].prompt_id.clone();
    debug_assert!(
        candidates.iter().all(|c| c.prompt_id == prompt_id),
        "candidates must share a prompt id"
    );

    let survivors: Vec<&Candidate> = candidates
        .iter()
        .filter(|c| c.scores.min() >= config.min_score_threshold)
        .collect();
    if survivors.len() < 2 {
        out.skipped.push((prompt_id, SkipReason::TooFewSurvivors));
        return out;
    }

    let top = survivors
        .iter()
        .map(|c| c.composite)
        .fold(f64::NEG_INFINITY, f64::max);
    let bottom = survivors
        .iter()
        .map(|c| c.composite)
        .fold(f64::INFINITY, f64::min);
    let small_gap = top - bottom < config.small_gap;
    if small_gap {
        out.expert_queue.push(ExpertQueueEntry {
            prompt_id: prompt_id.clone(),
            reason: QueueReason::SmallGap,
        });
        if !config.emit_auto_pairs_for_small_gap {
            return out;
        }
    }

    let mut saw_tie = false;
    for i in 0..survivors.len() {
        for j in (i + 1)..survivors.len() {
            let (a, b) = (survivors[i], survivors[j]);
            if a.composite == b.composite {
                saw_tie = true;
                continue;
            }
            let (winner, loser) = if a.composite > b.composite { (a, b) } else { (b, a) };
            out.pairs.push(PreferencePair {
                prompt_id: prompt_id.clone(),
                winner: winner.id.clone(),
                loser: loser.id.clone(),
                source: PairSource::Auto,
                gap: winner.composite - loser.composite,
            });
        }
    }
    if saw_tie && !small_gap {
        out.expert_queue.push(ExpertQueueEntry {
            prompt_id,
            reason: QueueReason::Tie,
        });
    }
    out
}

/// Group candidates by prompt id (preserving first-seen prompt order) and
/// build pairs per prompt.
pub fn build_pairs_grouped(candidates: &[Candidate], config: &PairConfig) -> PairOutcome {
    let mut order: Vec<&str> = Vec::new();
    for c in candidates {
        if !order.contains(&c.prompt_id.as_str()) {
            order.push(&c.prompt_id);
        }
    }
    let mut out = PairOutcome::default();
    for prompt in order {
        let group: Vec<Candidate> = candidates
            .iter()
            .filter(|c| c.prompt_id == prompt)
            .cloned()
            .collect();
        let mut one = build_pairs(&group, config);
        out.pairs.append(&mut one.pairs);
        out.expert_queue.append(&mut one.expert_queue);
        out.skipped.append(&mut one.skipped);
    }
    out
}

/// DPO deviation-penalty strength.
#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self { beta: 1.0 }
    }
}

/// -log sigma(beta (logratio_w - logratio_l)), evaluated as
/// softplus(-beta margin) for stability. Strictly decreasing in the margin;
/// ln 2 at zero margin.
pub fn dpo_loss(logratio_w: f64, logratio_l: f64, beta: f64) -> f64 {
    softplus_scalar(-beta * (logratio_w - logratio_l))
}

/// Diffusion surrogate for the per-sample log-likelihood ratio: minus half
/// the policy-minus-reference denoising loss difference, both losses taken
/// on identical noised draws.
pub fn diffusion_logratio(denoise_loss_policy: f64, denoise_loss_reference: f64) -> f64 {
    -0.5 * (denoise_loss_policy - denoise_loss_reference)
}

/// Four independent linear scoring heads over a feature vector, clamped to
/// the 1..5 scale.
#[derive(Clone, Debug)]
pub struct ToyJudge {
    /// `[f x 4]`.
    pub weights: Tensor,
    /// `[1 x 4]`.
    pub bias: Tensor,
}

impl ToyJudge {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self, AlignmentError> {
        if weights.shape().len() != 2 || weights.shape()[1] != 4 || bias.shape() != [1, 4] {
            return Err(AlignmentError::Invalid(format!(
                "judge heads must be [f x 4] with [1 x 4] bias, got {:?} / {:?}",
                weights.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn score(&self, features: &Tensor) -> Result<JudgeScores, AlignmentError> {
        let raw = features.matmul(&self.weights)?.add(&self.bias)?;
        let clamp = |v: f64| v.clamp(1.0, 5.0);
        Ok(JudgeScores {
            face: clamp(raw.data()[0]),
            limb: clamp(raw.data()[1]),
            line: clamp(raw.data()[2]),
            motion: clamp(raw.data()[3]),
        })
    }
}

/// One DPO training sample: matched (x0, noise, noise level, conditioning)
/// draws for the preferred and dispreferred clips.
#[derive(Clone, Debug)]
pub struct DpoSample {
    pub x0: Tensor,
    pub noise: Tensor,
    pub noise_level: f64,
    pub text: Option<String>,
    pub spec: Option<ProductionSpec>,
}

impl DpoSample {
    pub fn noised(&self) -> Result<Tensor, NumericsError> {
        self.x0
            .scale(1.0 - self.noise_level)
            .add(&self.noise.scale(self.noise_level))
    }
}

/// Node handles from [`toy_dpo_loss_graph`].
pub struct DpoLossNodes {
    pub loss: NodeId,
    pub policy_leaves: Vec<NodeId>,
}

/// Build the end-to-end toy DPO loss on a graph: the policy denoises the
/// winner and loser draws, per-sample squared-error losses become log-ratio
/// estimates against the frozen reference losses, and the margin feeds the
/// DPO objective. Gradients flow into every policy parameter.
pub fn toy_dpo_loss_graph(
    g: &mut Graph,
    policy: &ToyDenoiser,
    reference: &ToyDenoiser,
    winner: &DpoSample,
    loser: &DpoSample,
    beta: f64,
) -> Result<DpoLossNodes, AlignmentError> {
    let nodes = policy.leaves(g);
    let policy_leaves = nodes.flat();

    let denoise_loss = |g: &mut Graph, sample: &DpoSample| -> Result<NodeId, AlignmentError> {
        let x_t = sample.noised()?;
        let pred = policy.forward_graph(
            g,
            &nodes,
            &x_t,
            sample.text.as_deref(),
            sample.spec.as_ref(),
            sample.noise_level,
        )?;
        let target = g.constant(sample.x0.clone());
        Ok(g.mse(pred, target)?)
    };

    let loss_w = denoise_loss(g, winner)?;
    let loss_l = denoise_loss(g, loser)?;

    let ref_loss = |sample: &DpoSample| -> Result<f64, AlignmentError> {
        let x_t = sample.noised()?;
        let pred = reference.predict_x0(
            &x_t,
            sample.text.as_deref(),
            sample.spec.as_ref(),
            sample.noise_level,
        )?;
        Ok(pred.sub(&sample.x0)?.sum_sq() / sample.x0.len() as f64)
    };
    let ref_w = ref_loss(winner)?;
    let ref_l = ref_loss(loser)?;

    // logratio = -1/2 (loss_policy - loss_ref); margin = lr_w - lr_l.
    let lr_w_shift = g.add_scalar(loss_w, -ref_w);
    let lr_w = g.scale(lr_w_shift, -0.5);
    let lr_l_shift = g.add_scalar(loss_l, -ref_l);
    let lr_l = g.scale(lr_l_shift, -0.5);
    let margin = g.sub(lr_w, lr_l)?;
    let neg_scaled = g.scale(margin, -beta);
    let loss = g.softplus(neg_scaled);
    Ok(DpoLossNodes {
        loss,
        policy_leaves,
    })
}

/// Evaluate the toy DPO loss without keeping the graph.
pub fn toy_dpo_loss_value(
    policy: &ToyDenoiser,
    reference: &ToyDenoiser,
    winner: &DpoSample,
    loser: &DpoSample,
    beta: f64,
) -> Result<f64, AlignmentError> {
    let mut g = Graph::new();
    let nodes = toy_dpo_loss_graph(&mut g, policy, reference, winner, loser, beta)?;
    Ok(g.value(nodes.loss).data()[0])
}
