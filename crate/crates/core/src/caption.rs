//! Structured caption schema and the three-section natural-language
//! directive: parsing, validation, subject cross-reference resolution,
//! production-spec extraction, and template-based directive rendering.
//!
//! Captions are JSON documents with six field groups (subjects, motion,
//! visual effects, style tags, camera tags, environment). Unknown fields are
//! preserved opaquely so round-tripping richer dumps loses nothing.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::taxonomy::{
    normalize_token, ProductionSpec, SubAxis, SynonymDictionary, Tag, TaxonomyError, Vocabulary,
};

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("caption parse error at line {line}, column {column}: {message}")]
    Json {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("caption schema error: {0}")]
    Schema(String),
    #[error("dangling reference in motion segment {segment}: {reference}")]
    DanglingReference { segment: usize, reference: String },
    #[error("directive format error: {0}")]
    Format(String),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

/// Ordinal intensity used by motion segments and the global MotionAmplitude.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Amplitude {
    Low,
    Medium,
    High,
}

impl Amplitude {
    pub fn as_str(self) -> &'static str {
        match self {
            Amplitude::Low => "low",
            Amplitude::Medium => "medium",
            Amplitude::High => "high",
        }
    }

    pub fn parse(raw: &str) -> Result<Self, CaptionError> {
        match normalize_token(raw).as_str() {
            "low" => Ok(Amplitude::Low),
            "medium" => Ok(Amplitude::Medium),
            "high" => Ok(Amplitude::High),
            other => Err(CaptionError::Schema(format!(
                "amplitude must be one of low, medium, high; got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Amplitude {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Two-level semantic type of a subject.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubjectType {
    #[serde(rename = "type", default)]
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_type: Option<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub idx: u32,
    #[serde(rename = "TYPES", default)]
    pub types: SubjectType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appearance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl SubjectEntry {
    /// Short human descriptor: the sub-type when present, else the type.
    pub fn descriptor(&self) -> String {
        self.types
            .sub_type
            .as_deref()
            .unwrap_or(&self.types.kind)
            .to_lowercase()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSegment {
    pub idx: u32,
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<Amplitude>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

/// Three-level VFX type path.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VfxType {
    #[serde(rename = "type", default)]
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_sub_type: Option<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VfxEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx: Option<u32>,
    #[serde(rename = "TYPES", default)]
    pub types: VfxType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl VfxEntry {
    /// Deepest available level of the type path; this is the tag value.
    pub fn leaf_value(&self) -> &str {
        self.types
            .sub_sub_type
            .as_deref()
            .or(self.types.sub_type.as_deref())
            .unwrap_or(&self.types.kind)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VfxGroup {
    #[serde(rename = "HasAnimeVisualEffects", default)]
    pub has_flag: bool,
    #[serde(
        rename = "AnimeVisualEffectsDescription",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub overall_description: Option<String>,
    #[serde(rename = "AnimeVisualEffectsStructure", default)]
    pub entries: Vec<VfxEntry>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

/// The six-field-group structured caption.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StructuredCaption {
    pub subjects: Vec<SubjectEntry>,
    pub motion: Vec<MotionSegment>,
    pub vfx: VfxGroup,
    pub video_style: String,
    pub motion_style: Option<String>,
    pub motion_amplitude: Option<Amplitude>,
    pub shot_type: Option<String>,
    pub shot_angle: Option<String>,
    pub camera_motion: Option<String>,
    pub lighting: Option<String>,
    pub environment: Option<String>,
    /// Unknown top-level fields, preserved verbatim on round-trip.
    pub extra: BTreeMap<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct RawCaption {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subjects: Option<Vec<SubjectEntry>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    motion: Option<Vec<MotionSegment>>,
    #[serde(
        rename = "AnimeVisualEffects",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    vfx: Option<VfxGroup>,
    #[serde(rename = "VideoStyle", default, skip_serializing_if = "Option::is_none")]
    video_style: Option<String>,
    #[serde(rename = "MotionStyle", default, skip_serializing_if = "Option::is_none")]
    motion_style: Option<String>,
    #[serde(
        rename = "MotionAmplitude",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    motion_amplitude: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shot_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shot_angle: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    camera_motion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lighting: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    environment: Option<String>,
    #[serde(flatten)]
    extra: BTreeMap<String, Value>,
}

/// Parse and validate a structured caption document.
///
/// Required groups: `subjects` and the style group's `VideoStyle`. Missing
/// optional groups become empty. Referential integrity is enforced here as
/// well: a motion segment pointing at an undeclared subject is an error.
pub fn parse_structured_caption(document: &str) -> Result<StructuredCaption, CaptionError> {
    let raw: RawCaption = serde_json::from_str(document).map_err(|e| CaptionError::Json {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;

    let subjects = raw
        .subjects
        .ok_or_else(|| CaptionError::Schema("missing required group subjects".into()))?;
    let video_style = raw
        .video_style
        .ok_or_else(|| CaptionError::Schema("missing required group style (VideoStyle)".into()))?;

    let motion_amplitude = raw
        .motion_amplitude
        .as_deref()
        .map(Amplitude::parse)
        .transpose()?;

    let caption = StructuredCaption {
        subjects,
        motion: raw.motion.unwrap_or_default(),
        vfx: raw.vfx.unwrap_or_default(),
        video_style,
        motion_style: raw.motion_style,
        motion_amplitude,
        shot_type: raw.shot_type,
        shot_angle: raw.shot_angle,
        camera_motion: raw.camera_motion,
        lighting: raw.lighting,
        environment: raw.environment,
        extra: raw.extra,
    };

    let mut seen = Vec::new();
    for s in &caption.subjects {
        if seen.contains(&s.idx) {
            return Err(CaptionError::Schema(format!(
                "duplicate subject idx {}",
                s.idx
            )));
        }
        seen.push(s.idx);
    }
    if !caption.vfx.has_flag && !caption.vfx.entries.is_empty() {
        return Err(CaptionError::Schema(
            "HasAnimeVisualEffects is false but the structure list is not empty".into(),
        ));
    }
    let refs = resolve_cross_refs(&caption);
    if let Some(v) = refs.violations.first() {
        return Err(CaptionError::DanglingReference {
            segment: v.segment,
            reference: v.reference.clone(),
        });
    }
    Ok(caption)
}

pub fn serialize_caption(caption: &StructuredCaption) -> String {
    let raw = RawCaption {
        subjects: Some(caption.subjects.clone()),
        motion: if caption.motion.is_empty() {
            None
        } else {
            Some(caption.motion.clone())
        },
        vfx: Some(caption.vfx.clone()),
        video_style: Some(caption.video_style.clone()),
        motion_style: caption.motion_style.clone(),
        motion_amplitude: caption.motion_amplitude.map(|a| a.as_str().to_string()),
        shot_type: caption.shot_type.clone(),
        shot_angle: caption.shot_angle.clone(),
        camera_motion: caption.camera_motion.clone(),
        lighting: caption.lighting.clone(),
        environment: caption.environment.clone(),
        extra: caption.extra.clone(),
    };
    serde_json::to_string_pretty(&raw).expect("caption serialization cannot fail")
}

/// One unresolved `<subject_i>` or segment-level subject reference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CrossRefViolation {
    pub segment: usize,
    pub reference: String,
}

/// Outcome of cross-reference resolution over the motion list.
#[derive(Clone, Debug, Default)]
pub struct CrossRefReport {
    /// (segment index, referenced subject idx) for every resolved reference.
    pub resolutions: Vec<(usize, u32)>,
    pub violations: Vec<CrossRefViolation>,
}

impl CrossRefReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Scan text for `<subject_N>` tokens.
pub fn scan_subject_refs(text: &str) -> Vec<u32> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(pos) = rest.find("<subject_") {
        rest = &rest[pos + "<subject_".len()..];
        if let Some(end) = rest.find('>') {
            if let Ok(idx) = rest[..end].parse::<u32>() {
                out.push(idx);
            }
            rest = &rest[end + 1..];
        } else {
            break;
        }
    }
    out
}

/// Map every subject reference in the motion list onto declared subjects.
pub fn resolve_cross_refs(caption: &StructuredCaption) -> CrossRefReport {
    let declared: Vec<u32> = caption.subjects.iter().map(|s| s.idx).collect();
    let mut report = CrossRefReport::default();
    for (i, seg) in caption.motion.iter().enumerate() {
        let mut check = |idx: u32, reference: String| {
            if declared.contains(&idx) {
                report.resolutions.push((i, idx));
            } else {
                report.violations.push(CrossRefViolation {
                    segment: i,
                    reference,
                });
            }
        };
        check(seg.idx, format!("segment subject idx {}", seg.idx));
        for idx in scan_subject_refs(&seg.action) {
            check(idx, format!("<subject_{idx}>"));
        }
    }
    report
}

/// Canonical tags recovered from the caption's global style/camera groups
/// plus one VFX tag per VFX entry. Lighting is free text and not extracted.
pub fn extract_production_spec(
    caption: &StructuredCaption,
    dict: &SynonymDictionary,
) -> Result<ProductionSpec, TaxonomyError> {
    let mut tags = Vec::new();
    tags.push(dict.canonicalize_in(&caption.video_style, SubAxis::VisualStyle)?);
    if let Some(ms) = &caption.motion_style {
        tags.push(dict.canonicalize_in(ms, SubAxis::MotionStyle)?);
    }
    if let Some(amp) = caption.motion_amplitude {
        tags.push(dict.canonicalize_in(amp.as_str(), SubAxis::Amplitude)?);
    }
    if let Some(st) = &caption.shot_type {
        tags.push(dict.canonicalize_in(st, SubAxis::ShotScale)?);
    }
    if let Some(sa) = &caption.shot_angle {
        tags.push(dict.canonicalize_in(sa, SubAxis::ViewingAngle)?);
    }
    if let Some(cm) = &caption.camera_motion {
        // Camera movement may record a temporal sequence.
        for part in split_movement_sequence(cm) {
            tags.push(dict.canonicalize_in(part, SubAxis::Movement)?);
        }
    }
    for entry in &caption.vfx.entries {
        tags.push(dict.canonicalize_in(entry.leaf_value(), SubAxis::VfxEffect)?);
    }
    Ok(ProductionSpec::from_tags(tags))
}

fn split_movement_sequence(raw: &str) -> impl Iterator<Item = &str> {
    raw.split("->")
        .flat_map(|p| p.split('→'))
        .map(str::trim)
        .filter(|p| !p.is_empty())
}

// ---------------------------------------------------------------------------
// Three-section directive
// ---------------------------------------------------------------------------

/// Keys allowed in a directive's `<tag>` section, in rendering order.
pub const DIRECTIVE_TAG_KEYS: [&str; 6] = [
    "VideoStyle",
    "MotionStyle",
    "MotionAmplitude",
    "shot_type",
    "shot_angle",
    "camera_motion",
];

/// Sub-axis each directive tag key extracts to.
pub fn directive_key_axis(key: &str) -> Option<SubAxis> {
    match key {
        "VideoStyle" => Some(SubAxis::VisualStyle),
        "MotionStyle" => Some(SubAxis::MotionStyle),
        "MotionAmplitude" => Some(SubAxis::Amplitude),
        "shot_type" => Some(SubAxis::ShotScale),
        "shot_angle" => Some(SubAxis::ViewingAngle),
        "camera_motion" => Some(SubAxis::Movement),
        _ => None,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DirectiveText {
    /// Ordered key/value pairs from the `<tag>` section.
    pub tag_section: Vec<(String, String)>,
    pub summary: String,
    pub description: String,
}

impl DirectiveText {
    pub fn tag(&self, key: &str) -> Option<&str> {
        self.tag_section
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Canonical tags recovered from the tag section.
    pub fn production_spec(
        &self,
        dict: &SynonymDictionary,
    ) -> Result<ProductionSpec, TaxonomyError> {
        let mut tags = Vec::new();
        for (key, value) in &self.tag_section {
            let axis = directive_key_axis(key)
                .ok_or_else(|| TaxonomyError::Invalid(format!("unknown tag key {key}")))?;
            if axis == SubAxis::Movement {
                for part in split_movement_sequence(value) {
                    tags.push(dict.canonicalize_in(part, axis)?);
                }
            } else {
                tags.push(dict.canonicalize_in(value, axis)?);
            }
        }
        Ok(ProductionSpec::from_tags(tags))
    }
}

/// Parse the literal `<tag>` / `<summary>` / `<description>` format.
pub fn parse_directive(text: &str) -> Result<DirectiveText, CaptionError> {
    let tag_pos = text
        .find("<tag>")
        .ok_or_else(|| CaptionError::Format("missing <tag> section marker".into()))?;
    let summary_pos = text
        .find("<summary>")
        .ok_or_else(|| CaptionError::Format("missing <summary> section marker".into()))?;
    let desc_pos = text
        .find("<description>")
        .ok_or_else(|| CaptionError::Format("missing <description> section marker".into()))?;
    if !(tag_pos < summary_pos && summary_pos < desc_pos) {
        return Err(CaptionError::Format(
            "sections must appear in order <tag>, <summary>, <description>".into(),
        ));
    }

    let tag_body = &text[tag_pos + "<tag>".len()..summary_pos];
    let summary = text[summary_pos + "<summary>".len()..desc_pos]
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    let description = text[desc_pos + "<description>".len()..]
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");

    if summary.is_empty() {
        return Err(CaptionError::Format("empty <summary> section".into()));
    }
    if description.is_empty() {
        return Err(CaptionError::Format("empty <description> section".into()));
    }

    let mut tag_section = Vec::new();
    for piece in tag_body.split(',') {
        let piece = piece.trim();
        if piece.is_empty() {
            continue;
        }
        let (key, value) = piece.split_once(':').ok_or_else(|| {
            CaptionError::Format(format!("tag entry {piece:?} is not a key: value pair"))
        })?;
        let key = key.trim();
        if !DIRECTIVE_TAG_KEYS.contains(&key) {
            return Err(CaptionError::Format(format!(
                "unknown tag key {key:?}; expected one of {}",
                DIRECTIVE_TAG_KEYS.join(", ")
            )));
        }
        let value: String = value.split_whitespace().collect::<Vec<_>>().join(" ");
        tag_section.push((key.to_string(), value));
    }

    Ok(DirectiveText {
        tag_section,
        summary,
        description,
    })
}

pub fn serialize_directive(d: &DirectiveText) -> String {
    let tags: Vec<String> = d
        .tag_section
        .iter()
        .map(|(k, v)| format!("{k}: {v}"))
        .collect();
    format!(
        "<tag> {}\n\n<summary> {}\n\n<description> {}\n",
        tags.join(", "),
        d.summary,
        d.description
    )
}

fn replace_subject_refs(text: &str, caption: &StructuredCaption) -> String {
    let mut out = text.to_string();
    for s in &caption.subjects {
        let token = format!("<subject_{}>", s.idx);
        let replacement = format!("the {}", s.descriptor());
        out = out.replace(&token, &replacement);
    }
    out
}

fn first_sentence(text: &str) -> String {
    let trimmed = text.trim().trim_end_matches('.');
    match trimmed.find('.') {
        Some(pos) => trimmed[..pos].trim().to_string(),
        None => trimmed.to_string(),
    }
}

/// Render a caption and its extracted production spec into the directive
/// format. The rendering is template-based and deterministic; the description
/// is ordered subject, camera, motion, VFX, environment.
pub fn render_directive(caption: &StructuredCaption, spec: &ProductionSpec) -> DirectiveText {
    let mut tag_section = Vec::new();
    for key in DIRECTIVE_TAG_KEYS {
        let axis = directive_key_axis(key).expect("key table is closed");
        let values: Vec<String> = spec
            .tags_on_axis(axis)
            .map(|t: &Tag| t.value.clone())
            .collect();
        if !values.is_empty() {
            tag_section.push((key.to_string(), values.join(" -> ")));
        }
    }

    let summary = {
        let core = if let Some(seg) = caption.motion.first() {
            first_sentence(&replace_subject_refs(&seg.action, caption))
        } else if let Some(subject) = caption.subjects.first() {
            format!("A {} holds the scene", subject.descriptor())
        } else {
            "A still scene".to_string()
        };
        match &caption.environment {
            Some(env) => format!("{}, set in {env}.", capitalize(&core)),
            None => format!("{}.", capitalize(&core)),
        }
    };

    let mut parts: Vec<String> = Vec::new();
    for s in &caption.subjects {
        let mut sentence = format!("A {}", s.descriptor());
        if let Some(appearance) = &s.appearance {
            sentence.push_str(&format!(" with {}", appearance.trim_end_matches('.')));
        }
        if let Some(position) = &s.position {
            sentence.push_str(&format!(", {}", decap(position.trim_end_matches('.'))));
        }
        sentence.push('.');
        parts.push(sentence);
    }
    {
        let mut camera = Vec::new();
        if let Some(cm) = &caption.camera_motion {
            camera.push(format!("a {cm}"));
        }
        if let Some(st) = &caption.shot_type {
            camera.push(st.clone());
        }
        if let Some(sa) = &caption.shot_angle {
            camera.push(format!("at {sa}"));
        }
        if !camera.is_empty() {
            let mut sentence = format!("The camera holds {}", camera.join(" "));
            if let Some(light) = &caption.lighting {
                sentence.push_str(&format!(" under {light} lighting"));
            }
            sentence.push('.');
            parts.push(sentence);
        }
    }
    for seg in &caption.motion {
        let mut sentence = replace_subject_refs(seg.action.trim_end_matches('.'), caption);
        if let Some(expr) = &seg.expression {
            sentence.push_str(&format!(", with a {expr} expression"));
        }
        if let Some(amp) = seg.amplitude {
            sentence.push_str(&format!(" ({amp} amplitude)"));
        }
        sentence.push('.');
        parts.push(capitalize(&sentence));
    }
    if caption.vfx.has_flag {
        if let Some(overall) = &caption.vfx.overall_description {
            parts.push(format!(
                "Visual effects: {}.",
                overall.trim_end_matches('.')
            ));
        }
        for entry in &caption.vfx.entries {
            let mut sentence = format!("A {} effect", entry.leaf_value());
            if let Some(pos) = &entry.position {
                sentence.push_str(&format!(" in the {pos}"));
            }
            if let Some(desc) = &entry.description {
                sentence.push_str(&format!(": {}", decap(desc.trim_end_matches('.'))));
            }
            sentence.push('.');
            parts.push(sentence);
        }
    }
    if let Some(env) = &caption.environment {
        let mut sentence = format!("The environment is {env}");
        if let Some(light) = &caption.lighting {
            sentence.push_str(&format!(" bathed in {light} lighting"));
        }
        sentence.push('.');
        parts.push(sentence);
    }

    DirectiveText {
        tag_section,
        summary,
        description: parts.join(" "),
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

fn decap(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_lowercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

/// Discrepancies between a directive's tag section and a caption's globals.
#[derive(Clone, Debug, Default)]
pub struct ConsistencyReport {
    pub contradictions: Vec<String>,
    pub warnings: Vec<String>,
}

impl ConsistencyReport {
    pub fn is_consistent(&self) -> bool {
        self.contradictions.is_empty()
    }
}

pub fn validate_directive_consistency(
    directive: &DirectiveText,
    caption: &StructuredCaption,
    dict: &SynonymDictionary,
) -> ConsistencyReport {
    let mut report = ConsistencyReport::default();
    let caption_value = |key: &str| -> Option<String> {
        match key {
            "VideoStyle" => Some(caption.video_style.clone()),
            "MotionStyle" => caption.motion_style.clone(),
            "MotionAmplitude" => caption.motion_amplitude.map(|a| a.as_str().to_string()),
            "shot_type" => caption.shot_type.clone(),
            "shot_angle" => caption.shot_angle.clone(),
            "camera_motion" => caption.camera_motion.clone(),
            _ => None,
        }
    };
    for key in DIRECTIVE_TAG_KEYS {
        let axis = directive_key_axis(key).expect("key table is closed");
        let from_caption = caption_value(key);
        let from_directive = directive.tag(key);
        match (from_caption, from_directive) {
            (Some(c), Some(d)) => {
                // Compare canonically so aliases do not read as conflicts.
                let cc = dict
                    .canonicalize_in(&c, axis)
                    .map(|t| t.value)
                    .unwrap_or_else(|_| normalize_token(&c));
                let dc = dict
                    .canonicalize_in(d, axis)
                    .map(|t| t.value)
                    .unwrap_or_else(|_| normalize_token(d));
                if cc != dc {
                    report
                        .contradictions
                        .push(format!("{key}: directive says {d:?}, caption says {c:?}"));
                }
            }
            (Some(c), None) => report
                .warnings
                .push(format!("directive omits {key} (caption has {c:?})")),
            (None, Some(d)) => report
                .warnings
                .push(format!("directive adds {key}={d:?} absent from caption")),
            (None, None) => {}
        }
    }
    report
}

/// Vocabulary-level caption check: global tags must canonicalize and VFX
/// type paths must exist. Strict mode turns misses into errors; lenient
/// mode downgrades them to warnings.
#[derive(Clone, Debug, Default)]
pub struct VocabReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl VocabReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty() && self.warnings.is_empty()
    }
}

pub fn validate_caption_vocab(
    caption: &StructuredCaption,
    vocab: &Vocabulary,
    dict: &SynonymDictionary,
    strict: bool,
) -> VocabReport {
    let mut report = VocabReport::default();
    let push = |strict_hit: bool, message: String, report: &mut VocabReport| {
        if strict_hit {
            report.errors.push(message);
        } else {
            report.warnings.push(message);
        }
    };
    let checks: [(&str, Option<&str>, SubAxis); 5] = [
        (
            "VideoStyle",
            Some(caption.video_style.as_str()),
            SubAxis::VisualStyle,
        ),
        (
            "MotionStyle",
            caption.motion_style.as_deref(),
            SubAxis::MotionStyle,
        ),
        ("shot_type", caption.shot_type.as_deref(), SubAxis::ShotScale),
        (
            "shot_angle",
            caption.shot_angle.as_deref(),
            SubAxis::ViewingAngle,
        ),
        (
            "camera_motion",
            caption.camera_motion.as_deref(),
            SubAxis::Movement,
        ),
    ];
    for (name, value, axis) in checks {
        if let Some(v) = value {
            if axis == SubAxis::Movement {
                for part in split_movement_sequence(v) {
                    if dict.canonicalize_in(part, axis).is_err() {
                        push(
                            strict,
                            format!("{name}: {part:?} is not in the vocabulary"),
                            &mut report,
                        );
                    }
                }
            } else if dict.canonicalize_in(v, axis).is_err() {
                push(
                    strict,
                    format!("{name}: {v:?} is not in the vocabulary"),
                    &mut report,
                );
            }
        }
    }
    for (i, entry) in caption.vfx.entries.iter().enumerate() {
        let sub = entry.types.sub_type.as_deref().unwrap_or("");
        let leaf = entry.leaf_value();
        if !vocab.vfx_path_exists(&entry.types.kind, sub, leaf) {
            push(
                strict,
                format!(
                    "vfx entry {i}: type path {}/{}/{} not in the vocabulary",
                    entry.types.kind, sub, leaf
                ),
                &mut report,
            );
        }
    }
    report
}

/// Caption fixtures shipped with the crate.
pub mod fixtures {
    /// The harbor-scene caption (still Shinkai-style medium shot).
    pub const HARBOR_SCENE: &str = include_str!("../data/fixtures/harbor_scene.caption.json");
    /// Its three-section directive rendering.
    pub const HARBOR_SCENE_DIRECTIVE: &str =
        include_str!("../data/fixtures/harbor_scene.directive.txt");
    pub const NO_VFX_MINIMAL: &str = include_str!("../data/fixtures/no_vfx_minimal.caption.json");
    pub const COMBAT_MULTI_SUBJECT: &str =
        include_str!("../data/fixtures/combat_multi_subject.caption.json");
    pub const CHIBI_GAG: &str = include_str!("../data/fixtures/chibi_gag.caption.json");

    pub fn all_captions() -> [(&'static str, &'static str); 4] {
        [
            ("harbor_scene", HARBOR_SCENE),
            ("no_vfx_minimal", NO_VFX_MINIMAL),
            ("combat_multi_subject", COMBAT_MULTI_SUBJECT),
            ("chibi_gag", CHIBI_GAG),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dict() -> &'static SynonymDictionary {
        SynonymDictionary::shipped_default()
    }

    fn harbor() -> StructuredCaption {
        parse_structured_caption(fixtures::HARBOR_SCENE).unwrap()
    }

    #[test]
    fn harbor_scene_parses_with_expected_groups() {
        let c = harbor();
        assert_eq!(c.subjects.len(), 2);
        assert_eq!(c.motion.len(), 1);
        assert_eq!(c.vfx.entries.len(), 1);
        assert_eq!(c.video_style, "Shinkai Style");
        assert_eq!(c.motion_amplitude, Some(Amplitude::Low));
    }

    #[test]
    fn round_trip_preserves_every_field() {
        for (name, doc) in fixtures::all_captions() {
            let once = parse_structured_caption(doc).unwrap();
            let again = parse_structured_caption(&serialize_caption(&once)).unwrap();
            assert_eq!(once, again, "fixture {name} must round-trip");
        }
    }

    #[test]
    fn unknown_fields_survive_round_trip() {
        let mut doc: Value = serde_json::from_str(fixtures::HARBOR_SCENE).unwrap();
        doc["x_future_field"] = serde_json::json!({"nested": [1, 2, 3]});
        doc["subjects"][0]["x_entity_score"] = serde_json::json!(0.93);
        let c = parse_structured_caption(&doc.to_string()).unwrap();
        assert!(c.extra.contains_key("x_future_field"));
        let back = parse_structured_caption(&serialize_caption(&c)).unwrap();
        assert_eq!(c, back);
        assert_eq!(
            back.subjects[0].extra["x_entity_score"],
            serde_json::json!(0.93)
        );
    }

    #[test]
    fn missing_subjects_group_is_a_schema_error() {
        let err = parse_structured_caption(r#"{"VideoStyle": "Shinkai Style"}"#).unwrap_err();
        assert!(matches!(err, CaptionError::Schema(_)), "{err}");
    }

    #[test]
    fn false_flag_with_entries_is_a_schema_error() {
        let mut doc: Value = serde_json::from_str(fixtures::HARBOR_SCENE).unwrap();
        doc["AnimeVisualEffects"]["HasAnimeVisualEffects"] = serde_json::json!(false);
        let err = parse_structured_caption(&doc.to_string()).unwrap_err();
        assert!(matches!(err, CaptionError::Schema(_)), "{err}");
    }

    #[test]
    fn false_flag_with_empty_structure_is_valid() {
        let c = parse_structured_caption(fixtures::NO_VFX_MINIMAL).unwrap();
        assert!(!c.vfx.has_flag);
        assert!(c.vfx.entries.is_empty());
    }

    #[test]
    fn dangling_reference_is_rejected_at_parse() {
        let mut doc: Value = serde_json::from_str(fixtures::HARBOR_SCENE).unwrap();
        doc["motion"][0]["action"] = serde_json::json!("<subject_3> waves");
        let err = parse_structured_caption(&doc.to_string()).unwrap_err();
        assert!(matches!(err, CaptionError::DanglingReference { .. }), "{err}");
    }

    #[test]
    fn cross_refs_resolve_on_harbor_scene() {
        let report = resolve_cross_refs(&harbor());
        assert!(report.is_clean());
        assert!(report.resolutions.contains(&(0, 0)));
    }

    #[test]
    fn cross_refs_vacuous_on_empty_caption() {
        let c = StructuredCaption {
            video_style: "Shinkai Style".into(),
            ..Default::default()
        };
        let report = resolve_cross_refs(&c);
        assert!(report.is_clean());
        assert!(report.resolutions.is_empty());
    }

    #[test]
    fn cross_refs_flag_inline_violation_with_segment_index() {
        let mut c = harbor();
        c.motion.push(MotionSegment {
            idx: 0,
            action: "<subject_9> leaps".into(),
            expression: None,
            amplitude: None,
            extra: BTreeMap::new(),
        });
        let report = resolve_cross_refs(&c);
        assert_eq!(
            report.violations,
            vec![CrossRefViolation {
                segment: 1,
                reference: "<subject_9>".into()
            }]
        );
    }

    #[test]
    fn extract_production_spec_matches_expected_tag_set() {
        let spec = extract_production_spec(&harbor(), dict()).unwrap();
        let values: Vec<&str> = spec.tags().iter().map(|t| t.value.as_str()).collect();
        assert_eq!(spec.len(), 7);
        for expected in [
            "Shinkai Style",
            "2D Daily",
            "low",
            "medium shot",
            "eye level",
            "static",
            "Fog",
        ] {
            assert!(values.contains(&expected), "missing {expected} in {values:?}");
        }
    }

    #[test]
    fn extract_skips_vfx_when_absent_and_ignores_case() {
        let c = parse_structured_caption(fixtures::NO_VFX_MINIMAL).unwrap();
        let spec = extract_production_spec(&c, dict()).unwrap();
        assert!(spec.tags_on_axis(SubAxis::VfxEffect).next().is_none());

        let mut lower = harbor();
        lower.video_style = "shinkai style".into();
        let a = extract_production_spec(&lower, dict()).unwrap();
        let b = extract_production_spec(&harbor(), dict()).unwrap();
        assert_eq!(a, b, "canonicalization is case-insensitive");
    }

    #[test]
    fn directive_fixture_parses_with_six_tag_pairs() {
        let d = parse_directive(fixtures::HARBOR_SCENE_DIRECTIVE).unwrap();
        assert_eq!(d.tag_section.len(), 6);
        assert_eq!(d.tag("VideoStyle"), Some("Shinkai Style"));
        assert_eq!(d.tag("camera_motion"), Some("static"));
        assert!(d.summary.starts_with("A blonde woman stands still"));
    }

    #[test]
    fn directive_round_trip_preserves_tags() {
        let d = parse_directive(fixtures::HARBOR_SCENE_DIRECTIVE).unwrap();
        let again = parse_directive(&serialize_directive(&d)).unwrap();
        assert_eq!(d.tag_section, again.tag_section);
        assert_eq!(d.summary, again.summary);
    }

    #[test]
    fn directive_format_errors() {
        assert!(matches!(
            parse_directive("<summary> s <description> d"),
            Err(CaptionError::Format(_))
        ));
        assert!(matches!(
            parse_directive("<tag> VideoStyle: X\n<summary> ok\n<description>  "),
            Err(CaptionError::Format(_))
        ));
        assert!(matches!(
            parse_directive("<tag> UnknownKey: X\n<summary> s\n<description> d"),
            Err(CaptionError::Format(_))
        ));
    }

    #[test]
    fn rendered_directive_tags_match_extracted_spec() {
        let caption = harbor();
        let spec = extract_production_spec(&caption, dict()).unwrap();
        let rendered = render_directive(&caption, &spec);
        let parsed = parse_directive(&serialize_directive(&rendered)).unwrap();
        let recovered = parsed.production_spec(dict()).unwrap();
        // Tag stability over the six global keys: the VFX tag lives outside
        // the tag section, so compare after dropping it.
        let global_only = ProductionSpec::from_tags(
            spec.tags()
                .iter()
                .filter(|t| t.axis != SubAxis::VfxEffect)
                .cloned(),
        );
        assert_eq!(recovered, global_only);
    }

    #[test]
    fn description_orders_subject_camera_motion_vfx_environment() {
        let caption = harbor();
        let spec = extract_production_spec(&caption, dict()).unwrap();
        let d = render_directive(&caption, &spec);
        let woman = d.description.find("woman").expect("subject mentioned");
        let camera = d.description.find("The camera").expect("camera mentioned");
        let motion = d.description.find("remains still").expect("motion mentioned");
        let vfx = d.description.find("Fog effect").expect("vfx mentioned");
        let env = d
            .description
            .find("The environment is")
            .expect("environment mentioned");
        assert!(woman < camera && camera < motion && motion < vfx && vfx < env);
    }

    #[test]
    fn consistency_report_flags_contradiction_and_omission() {
        let caption = harbor();
        let mut d = parse_directive(fixtures::HARBOR_SCENE_DIRECTIVE).unwrap();
        assert!(validate_directive_consistency(&d, &caption, dict()).is_consistent());

        // Contradiction: camera motion flipped to push in.
        for (k, v) in d.tag_section.iter_mut() {
            if k == "camera_motion" {
                *v = "push in".into();
            }
        }
        let report = validate_directive_consistency(&d, &caption, dict());
        assert_eq!(report.contradictions.len(), 1);

        // Omission: dropping MotionAmplitude is a warning, not a contradiction.
        d.tag_section.retain(|(k, _)| k != "MotionAmplitude");
        for (k, v) in d.tag_section.iter_mut() {
            if k == "camera_motion" {
                *v = "static".into();
            }
        }
        let report = validate_directive_consistency(&d, &caption, dict());
        assert!(report.is_consistent());
        assert!(report.warnings.iter().any(|w| w.contains("MotionAmplitude")));
    }

    #[test]
    fn alias_values_do_not_read_as_contradictions() {
        let caption = harbor();
        let mut d = parse_directive(fixtures::HARBOR_SCENE_DIRECTIVE).unwrap();
        for (k, v) in d.tag_section.iter_mut() {
            if k == "shot_type" {
                *v = "MS".into();
            }
        }
        let report = validate_directive_consistency(&d, &caption, dict());
        assert!(report.is_consistent(), "{:?}", report.contradictions);
    }

    #[test]
    fn strict_vocab_mode_rejects_unknown_vfx_path() {
        let vocab = Vocabulary::shipped_default();
        let mut c = harbor();
        c.vfx.entries[0].types.sub_sub_type = Some("Nonexistent Effect".into());
        let strict = validate_caption_vocab(&c, vocab, dict(), true);
        assert!(!strict.errors.is_empty());
        let lenient = validate_caption_vocab(&c, vocab, dict(), false);
        assert!(lenient.errors.is_empty());
        assert!(!lenient.warnings.is_empty());
    }

    #[test]
    fn all_fixture_captions_pass_strict_vocab_validation() {
        let vocab = Vocabulary::shipped_default();
        for (name, doc) in fixtures::all_captions() {
            let c = parse_structured_caption(doc).unwrap();
            let report = validate_caption_vocab(&c, vocab, dict(), true);
            assert!(report.errors.is_empty(), "{name}: {:?}", report.errors);
        }
    }
}
