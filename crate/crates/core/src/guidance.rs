//! Conditioning-mode sampling, tag augmentation, controlled tag/text
//! conflict injection, dual classifier-free guidance, and a flow-matching
//! Euler sampler with expert routing traces.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption::{directive_key_axis, DirectiveText, DIRECTIVE_TAG_KEYS};
use crate::dit::{route_expert, DitError, ExpertKind, ToyDenoiser};
use crate::numerics::{NumericsError, SeededRng, Tensor};
use crate::taxonomy::{normalize_token, ProductionSpec, SubAxis, SynonymDictionary, Tag, Vocabulary};

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Dit(#[from] DitError),
}

/// Which conditioning channels a training example sees.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConditionMode {
    Hybrid,
    TagOnly,
    TextOnly,
    Unconditional,
}

/// Categorical distribution over conditioning modes.
#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct ModeProbs {
    pub hybrid: f64,
    pub tag_only: f64,
    pub text_only: f64,
    pub unconditional: f64,
}

impl Default for ModeProbs {
    fn default() -> Self {
        Self {
            hybrid: 0.7,
            tag_only: 0.1,
            text_only: 0.1,
            unconditional: 0.1,
        }
    }
}

impl ModeProbs {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        let ps = [self.hybrid, self.tag_only, self.text_only, self.unconditional];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(GuidanceError::Invalid(
                "mode probabilities must lie in [0, 1]".into(),
            ));
        }
        let total: f64 = ps.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(GuidanceError::Invalid(format!(
                "mode probabilities sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Draw a conditioning mode from the categorical distribution.
pub fn sample_mode(rng: &mut SeededRng, probs: &ModeProbs) -> ConditionMode {
    let u = rng.uniform();
    if u < probs.hybrid {
        ConditionMode::Hybrid
    } else if u < probs.hybrid + probs.tag_only {
        ConditionMode::TagOnly
    } else if u < probs.hybrid + probs.tag_only + probs.text_only {
        ConditionMode::TextOnly
    } else {
        ConditionMode::Unconditional
    }
}

/// Probabilities for tag dropping, synonym substitution, and conflict
/// injection within the hybrid mode.
#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub p_drop: f64,
    pub p_syn: f64,
    pub p_conflict: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            p_drop: 0.15,
            p_syn: 0.1,
            p_conflict: 0.05,
        }
    }
}

/// Augmented spec plus the surface form chosen for each surviving tag. The
/// spec stays canonical (surface aliases re-canonicalize on consumption);
/// surfaces feed text-side augmentation.
#[derive(Clone, Debug)]
pub struct TagAugmentation {
    pub spec: ProductionSpec,
    pub surfaces: Vec<(Tag, String)>,
}

/// Independently drop each tag with `p_drop`; give each survivor an alias
/// surface form with `p_syn` when its tag has declared aliases.
pub fn augment_tags(
    spec: &ProductionSpec,
    rng: &mut SeededRng,
    dict: &SynonymDictionary,
    config: &AugmentationConfig,
) -> TagAugmentation {
    let mut kept = Vec::new();
    let mut surfaces = Vec::new();
    for tag in spec.tags() {
        if rng.bernoulli(config.p_drop) {
            continue;
        }
        let surface = if rng.bernoulli(config.p_syn) {
            let aliases = dict.aliases_of(tag);
            match rng.choose(&aliases) {
                Some(alias) => alias.to_string(),
                None => tag.value.clone(),
            }
        } else {
            tag.value.clone()
        };
        kept.push(tag.clone());
        surfaces.push((tag.clone(), surface));
    }
    TagAugmentation {
        spec: ProductionSpec::from_tags(kept),
        surfaces,
    }
}

/// A directive whose text was rewritten to contradict one camera/shot tag.
/// The spec is untouched and remains the authoritative training target.
#[derive(Clone, Debug)]
pub struct ConflictSample {
    pub spec: ProductionSpec,
    pub altered_text: DirectiveText,
    pub conflicted: Tag,
    pub replacement: Tag,
}

#[derive(Clone, Debug)]
pub enum ConflictOutcome {
    Passthrough(DirectiveText),
    Conflict(ConflictSample),
}

fn directive_key_for_axis(axis: SubAxis) -> Option<&'static str> {
    DIRECTIVE_TAG_KEYS
        .into_iter()
        .find(|k| directive_key_axis(k) == Some(axis))
}

/// Deterministic replacement: the same-axis vocabulary value farthest from
/// the current one in table order (ties toward the later value), so a
/// close-up becomes a long shot rather than a medium shot.
fn farthest_value(vocab: &Vocabulary, tag: &Tag) -> Option<Tag> {
    let values = vocab.values(tag.axis);
    let current = values
        .iter()
        .position(|e| normalize_token(&e.value) == tag.normalized())?;
    let farthest = (0..values.len())
        .filter(|&i| i != current)
        .max_by_key(|&i| (i.abs_diff(current), i))?;
    Some(Tag {
        axis: tag.axis,
        value: values[farthest].value.clone(),
    })
}

fn replace_ignore_case(haystack: &str, needle: &str, replacement: &str) -> String {
    let lower_h = haystack.to_lowercase();
    let lower_n = needle.to_lowercase();
    let mut out = String::new();
    let mut cursor = 0;
    while let Some(pos) = lower_h[cursor..].find(&lower_n) {
        let at = cursor + pos;
        out.push_str(&haystack[cursor..at]);
        out.push_str(replacement);
        cursor = at + needle.len();
    }
    out.push_str(&haystack[cursor..]);
    out
}

/// With probability `p_conflict`, rewrite the textual mention of one
/// camera/shot tag to a different vocabulary value. Tags are never touched:
/// the ground truth stays tag-authoritative.
pub fn inject_conflict(
    spec: &ProductionSpec,
    directive: &DirectiveText,
    rng: &mut SeededRng,
    config: &AugmentationConfig,
    vocab: &Vocabulary,
) -> ConflictOutcome {
    if !rng.bernoulli(config.p_conflict) {
        return ConflictOutcome::Passthrough(directive.clone());
    }
    let candidates: Vec<&Tag> = spec
        .tags()
        .iter()
        .filter(|t| {
            matches!(
                t.axis,
                SubAxis::ShotScale | SubAxis::ViewingAngle | SubAxis::Movement
            )
        })
        .collect();
    let Some(&target) = rng.choose(&candidates) else {
        return ConflictOutcome::Passthrough(directive.clone());
    };
    let Some(replacement) = farthest_value(vocab, target) else {
        return ConflictOutcome::Passthrough(directive.clone());
    };

    let mut altered = directive.clone();
    if let Some(key) = directive_key_for_axis(target.axis) {
        for (k, v) in altered.tag_section.iter_mut() {
            if k == key {
                *v = replace_ignore_case(v, &target.value, &replacement.value);
            }
        }
    }
    altered.summary = replace_ignore_case(&altered.summary, &target.value, &replacement.value);
    altered.description =
        replace_ignore_case(&altered.description, &target.value, &replacement.value);

    ConflictOutcome::Conflict(ConflictSample {
        spec: spec.clone(),
        altered_text: altered,
        conflicted: target.clone(),
        replacement,
    })
}

/// Independent guidance scales for the text and tag channels.
#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct GuidanceScales {
    pub text: f64,
    pub tag: f64,
}

impl Default for GuidanceScales {
    fn default() -> Self {
        Self { text: 5.0, tag: 2.0 }
    }
}

impl GuidanceScales {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        if self.text < 0.0 || self.tag < 0.0 {
            return Err(GuidanceError::Invalid(
                "guidance scales must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn combine(
    terms: &[(f64, &Tensor)],
    op: &'static str,
) -> Result<Tensor, NumericsError> {
    let shape = terms[0].1.shape().to_vec();
    for (_, t) in terms {
        if t.shape() != shape.as_slice() {
            return Err(NumericsError::Shape {
                op,
                detail: format!("{:?} vs {:?}", shape, t.shape()),
            });
        }
    }
    // Skip zero-coefficient terms entirely so degenerate scales reduce to the
    // surviving prediction bitwise (1.0 * x is exact).
    let live: Vec<&(f64, &Tensor)> = terms.iter().filter(|(c, _)| *c != 0.0).collect();
    let mut data = vec![0.0; shape.iter().product()];
    for (rank, (c, t)) in live.iter().enumerate() {
        if rank == 0 {
            for (d, &x) in data.iter_mut().zip(t.data()) {
                *d = c * x;
            }
        } else {
            for (d, &x) in data.iter_mut().zip(t.data()) {
                *d += c * x;
            }
        }
    }
    Tensor::new(shape, data)
}

/// Dual classifier-free guidance. The tag scale weights the marginal effect
/// of adding tags on top of the text condition:
/// prediction = e0 + w_text (e_text - e0) + w_tag (e_tag_text - e_text),
/// evaluated in the factored form (1-w_text) e0 + (w_text-w_tag) e_text +
/// w_tag e_tag_text so that unit scales telescope to the full conditional
/// prediction exactly.
pub fn dual_cfg(
    eps_null: &Tensor,
    eps_text: &Tensor,
    eps_tag_text: &Tensor,
    scales: GuidanceScales,
) -> Result<Tensor, GuidanceError> {
    scales.validate()?;
    Ok(combine(
        &[
            (1.0 - scales.text, eps_null),
            (scales.text - scales.tag, eps_text),
            (scales.tag, eps_tag_text),
        ],
        "dual_cfg",
    )?)
}

/// Standard single-channel guidance, used when only one channel is present.
pub fn single_cfg(
    eps_null: &Tensor,
    eps_cond: &Tensor,
    scale: f64,
) -> Result<Tensor, GuidanceError> {
    if scale < 0.0 {
        return Err(GuidanceError::Invalid(
            "guidance scale must be non-negative".into(),
        ));
    }
    Ok(combine(
        &[(1.0 - scale, eps_null), (scale, eps_cond)],
        "single_cfg",
    )?)
}

/// Clean-sample predictor driven by the sampler. The toy denoiser works in
/// x0 space; guidance combinations are applied there (the rule is linear, so
/// the combination form is unchanged).
pub trait Denoiser {
    fn predict_x0(
        &self,
        x_t: &Tensor,
        text: Option<&str>,
        spec: Option<&ProductionSpec>,
        noise_level: f64,
    ) -> Result<Tensor, DitError>;
}

impl Denoiser for ToyDenoiser {
    fn predict_x0(
        &self,
        x_t: &Tensor,
        text: Option<&str>,
        spec: Option<&ProductionSpec>,
        noise_level: f64,
    ) -> Result<Tensor, DitError> {
        ToyDenoiser::predict_x0(self, x_t, text, spec, noise_level)
    }
}

/// Conditioning inputs for one sampled clip.
#[derive(Clone, Debug, Default)]
pub struct SampleInputs<'a> {
    pub text: Option<&'a str>,
    pub spec: Option<&'a ProductionSpec>,
}

/// Per-run record of anchors visited and experts used.
#[derive(Clone, Debug, Serialize)]
pub struct SampleTrace {
    pub anchors: Vec<f64>,
    pub experts: Vec<ExpertKind>,
}

impl Serialize for ExpertKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match self {
            ExpertKind::HighNoise => "high_noise",
            ExpertKind::LowNoise => "low_noise",
        })
    }
}

/// One CFG-combined clean-sample prediction: dual guidance when both
/// channels are live, single-channel guidance with one, and the plain
/// conditional prediction with none or without scales.
pub fn cfg_prediction(
    denoiser: &dyn Denoiser,
    x: &Tensor,
    inputs: &SampleInputs,
    lambda: f64,
    scales: Option<GuidanceScales>,
) -> Result<Tensor, GuidanceError> {
    let has_text = inputs.text.is_some();
    let has_tags = inputs.spec.map(|s| !s.is_empty()).unwrap_or(false);
    match scales {
        None => Ok(denoiser.predict_x0(x, inputs.text, inputs.spec, lambda)?),
        Some(w) => {
            if has_text && has_tags {
                let null = denoiser.predict_x0(x, None, None, lambda)?;
                let text = denoiser.predict_x0(x, inputs.text, None, lambda)?;
                let both = denoiser.predict_x0(x, inputs.text, inputs.spec, lambda)?;
                dual_cfg(&null, &text, &both, w)
            } else if has_tags {
                // Tag-only falls back to standard single-channel guidance.
                let null = denoiser.predict_x0(x, None, None, lambda)?;
                let tag = denoiser.predict_x0(x, None, inputs.spec, lambda)?;
                single_cfg(&null, &tag, w.tag)
            } else if has_text {
                let null = denoiser.predict_x0(x, None, None, lambda)?;
                let text = denoiser.predict_x0(x, inputs.text, None, lambda)?;
                single_cfg(&null, &text, w.text)
            } else {
                Ok(denoiser.predict_x0(x, None, None, lambda)?)
            }
        }
    }
}

/// Deterministic Euler sampler over a strictly decreasing anchor list.
/// Each step predicts the clean sample, infers the noise direction from the
/// current state, and re-interpolates to the next anchor; the final output
/// is the last clean-sample prediction.
pub fn euler_flow_sample(
    denoiser: &dyn Denoiser,
    inputs: SampleInputs,
    anchors: &[f64],
    scales: Option<GuidanceScales>,
    latent_shape: &[usize],
    boundary: f64,
    rng: &mut SeededRng,
) -> Result<(Tensor, SampleTrace), GuidanceError> {
    if anchors.is_empty() {
        return Err(GuidanceError::Invalid("empty anchor list".into()));
    }
    for pair in anchors.windows(2) {
        if pair[1] >= pair[0] {
            return Err(GuidanceError::Invalid(format!(
                "anchors must be strictly decreasing, got {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    if anchors.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(GuidanceError::Invalid(
            "anchors must lie in [0, 1]".into(),
        ));
    }

    let mut x = Tensor::randn(latent_shape.to_vec(), 1.0, rng);
    let mut experts = Vec::with_capacity(anchors.len());
    let mut x0_hat = Tensor::zeros(latent_shape.to_vec());
    for (i, &lambda) in anchors.iter().enumerate() {
        x0_hat = cfg_prediction(denoiser, &x, &inputs, lambda, scales)?;
        experts.push(route_expert(lambda, boundary));
        if i + 1 < anchors.len() {
            // eps implied by the current state: x = (1-l) x0 + l eps.
            let eps_hat = x.sub(&x0_hat.scale(1.0 - lambda))?.scale(1.0 / lambda);
            let next = anchors[i + 1];
            x = x0_hat.scale(1.0 - next).add(&eps_hat.scale(next))?;
        }
    }
    Ok((
        x0_hat,
        SampleTrace {
            anchors: anchors.to_vec(),
            experts,
        },
    ))
}
