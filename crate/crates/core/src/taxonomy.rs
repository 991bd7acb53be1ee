//! The four-axis production taxonomy: loadable vocabularies with canonical
//! tags, a synonym dictionary, and production-spec validation.
//!
//! The taxonomy is the Cartesian product of Style, Motion, Camera, and VFX
//! axes, each split into named sub-axes. A production spec is a set of
//! canonical (field, value) tags drawn from those vocabularies.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const DEFAULT_VOCABULARY_JSON: &str = include_str!("../data/default_vocabulary.json");

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("vocabulary parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("missing required field {0}")]
    MissingField(String),
    #[error("duplicate value {value:?} under {axis}")]
    DuplicateValue { axis: SubAxis, value: String },
    #[error("alias {alias:?} maps to both {first} and {second}")]
    AmbiguousAlias {
        alias: String,
        first: String,
        second: String,
    },
    #[error("vfx value {value:?} is missing metadata dimension {dimension}")]
    MissingVfxMetadata { value: String, dimension: &'static str },
    #[error("unknown tag {0:?}")]
    UnknownTag(String),
    #[error("token {token:?} is ambiguous between: {}", candidates.join(", "))]
    AmbiguousToken {
        token: String,
        candidates: Vec<String>,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Top-level taxonomy field.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Field {
    Style,
    Motion,
    Camera,
    Vfx,
}

impl Field {
    pub const ALL: [Field; 4] = [Field::Style, Field::Motion, Field::Camera, Field::Vfx];

    pub fn name(self) -> &'static str {
        match self {
            Field::Style => "Style",
            Field::Motion => "Motion",
            Field::Camera => "Camera",
            Field::Vfx => "VFX",
        }
    }

    /// Stable row index into field embedding tables.
    pub fn index(self) -> usize {
        match self {
            Field::Style => 0,
            Field::Motion => 1,
            Field::Camera => 2,
            Field::Vfx => 3,
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named sub-dimension of a field. The per-field lists are fixed.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubAxis {
    VisualStyle,
    MotionStyle,
    MotionType,
    Emotion,
    Amplitude,
    Speed,
    ShotScale,
    ViewingAngle,
    Movement,
    VfxCategory,
    VfxEffect,
}

impl SubAxis {
    pub const ALL: [SubAxis; 11] = [
        SubAxis::VisualStyle,
        SubAxis::MotionStyle,
        SubAxis::MotionType,
        SubAxis::Emotion,
        SubAxis::Amplitude,
        SubAxis::Speed,
        SubAxis::ShotScale,
        SubAxis::ViewingAngle,
        SubAxis::Movement,
        SubAxis::VfxCategory,
        SubAxis::VfxEffect,
    ];

    pub fn field(self) -> Field {
        match self {
            SubAxis::VisualStyle | SubAxis::MotionStyle => Field::Style,
            SubAxis::MotionType | SubAxis::Emotion | SubAxis::Amplitude | SubAxis::Speed => {
                Field::Motion
            }
            SubAxis::ShotScale | SubAxis::ViewingAngle | SubAxis::Movement => Field::Camera,
            SubAxis::VfxCategory | SubAxis::VfxEffect => Field::Vfx,
        }
    }

    pub fn of_field(field: Field) -> &'static [SubAxis] {
        match field {
            Field::Style => &[SubAxis::VisualStyle, SubAxis::MotionStyle],
            Field::Motion => &[
                SubAxis::MotionType,
                SubAxis::Emotion,
                SubAxis::Amplitude,
                SubAxis::Speed,
            ],
            Field::Camera => &[SubAxis::ShotScale, SubAxis::ViewingAngle, SubAxis::Movement],
            Field::Vfx => &[SubAxis::VfxCategory, SubAxis::VfxEffect],
        }
    }

    /// Sub-axes that admit at most one tag per production spec. Camera
    /// movement is a temporal sequence and VFX stack freely, so both stay
    /// multi-valued; emotions and motion types may also co-occur.
    pub fn is_single_valued(self) -> bool {
        matches!(
            self,
            SubAxis::VisualStyle
                | SubAxis::MotionStyle
                | SubAxis::Amplitude
                | SubAxis::Speed
                | SubAxis::ShotScale
                | SubAxis::ViewingAngle
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            SubAxis::VisualStyle => "visual_style",
            SubAxis::MotionStyle => "motion_style",
            SubAxis::MotionType => "type",
            SubAxis::Emotion => "emotion",
            SubAxis::Amplitude => "amplitude",
            SubAxis::Speed => "speed",
            SubAxis::ShotScale => "shot_scale",
            SubAxis::ViewingAngle => "viewing_angle",
            SubAxis::Movement => "movement",
            SubAxis::VfxCategory => "category",
            SubAxis::VfxEffect => "effect",
        }
    }

    pub fn from_name(name: &str) -> Option<SubAxis> {
        SubAxis::ALL.iter().copied().find(|a| a.name() == name)
    }
}

impl fmt::Display for SubAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.field(), self.name())
    }
}

/// Normalize a token for matching: lowercase, trimmed, internal whitespace
/// collapsed to single spaces. No fuzzy matching beyond this.
pub fn normalize_token(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// A canonical (field, value) pair. Only canonicalization and vocabulary
/// lookups construct these, so `value` always holds the canonical form.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tag {
    pub axis: SubAxis,
    pub value: String,
}

impl Tag {
    pub fn field(&self) -> Field {
        self.axis.field()
    }

    pub fn normalized(&self) -> String {
        normalize_token(&self.value)
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.axis, self.value)
    }
}

/// Metadata shipped with each VFX value, following production-sheet format.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VfxMetadata {
    #[serde(default)]
    pub category: String,
    #[serde(default)]
    pub subcategory: String,
    #[serde(default)]
    pub meaning: String,
    #[serde(default)]
    pub appearance: String,
    #[serde(default)]
    pub placement_dynamics: String,
    #[serde(default)]
    pub scenes: String,
}

/// One canonical value in a sub-axis vocabulary.
#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct VocabEntry {
    pub value: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default)]
    pub metadata: Option<VfxMetadata>,
}

#[derive(Deserialize)]
struct RawVocabulary {
    #[serde(default)]
    version: String,
    style: Option<BTreeMap<String, Vec<VocabEntry>>>,
    motion: Option<BTreeMap<String, Vec<VocabEntry>>>,
    camera: Option<BTreeMap<String, Vec<VocabEntry>>>,
    vfx: Option<BTreeMap<String, Vec<VocabEntry>>>,
}

/// Loaded, validated taxonomy vocabularies. Immutable after load.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    version: String,
    axes: BTreeMap<SubAxis, Vec<VocabEntry>>,
    // normalized value -> (axis, index into that axis)
    index: HashMap<String, Vec<(SubAxis, usize)>>,
}

impl Vocabulary {
    pub fn load_str(document: &str) -> Result<Self, TaxonomyError> {
        let raw: RawVocabulary =
            serde_json::from_str(document).map_err(|e| TaxonomyError::Parse {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;

        let mut axes: BTreeMap<SubAxis, Vec<VocabEntry>> = BTreeMap::new();
        let groups: [(Field, Option<BTreeMap<String, Vec<VocabEntry>>>); 4] = [
            (Field::Style, raw.style),
            (Field::Motion, raw.motion),
            (Field::Camera, raw.camera),
            (Field::Vfx, raw.vfx),
        ];
        for (field, group) in groups {
            let group = group.ok_or_else(|| TaxonomyError::MissingField(field.name().into()))?;
            for sub in SubAxis::of_field(field) {
                let entries = group
                    .get(sub.name())
                    .filter(|v| !v.is_empty())
                    .cloned()
                    .ok_or_else(|| TaxonomyError::MissingField(field.name().into()))?;
                axes.insert(*sub, entries);
            }
            for key in group.keys() {
                if SubAxis::from_name(key).map(|a| a.field()) != Some(field) {
                    return Err(TaxonomyError::Invalid(format!(
                        "unknown sub-axis {key:?} under {field}"
                    )));
                }
            }
        }

        let mut index: HashMap<String, Vec<(SubAxis, usize)>> = HashMap::new();
        for (&axis, entries) in &axes {
            let mut seen: HashMap<String, ()> = HashMap::new();
            for (i, entry) in entries.iter().enumerate() {
                let key = normalize_token(&entry.value);
                if key.is_empty() {
                    return Err(TaxonomyError::Invalid(format!("empty value under {axis}")));
                }
                if seen.insert(key.clone(), ()).is_some() {
                    return Err(TaxonomyError::DuplicateValue {
                        axis,
                        value: entry.value.clone(),
                    });
                }
                if axis == SubAxis::VfxEffect {
                    let meta = entry.metadata.as_ref().ok_or_else(|| {
                        TaxonomyError::MissingVfxMetadata {
                            value: entry.value.clone(),
                            dimension: "metadata",
                        }
                    })?;
                    for (dim, text) in [
                        ("meaning", &meta.meaning),
                        ("appearance", &meta.appearance),
                        ("placement_dynamics", &meta.placement_dynamics),
                        ("scenes", &meta.scenes),
                    ] {
                        if text.trim().is_empty() {
                            return Err(TaxonomyError::MissingVfxMetadata {
                                value: entry.value.clone(),
                                dimension: dim,
                            });
                        }
                    }
                }
                index.entry(key).or_default().push((axis, i));
            }
        }

        let vocab = Vocabulary {
            version: raw.version,
            axes,
            index,
        };
        if vocab.axes.get(&SubAxis::VfxEffect).is_some() {
            vocab.check_vfx_hierarchy()?;
        }
        Ok(vocab)
    }

    /// The vocabulary shipped with the crate, transcribed from the
    /// production-taxonomy tables. Loaded once, then shared.
    pub fn shipped_default() -> &'static Vocabulary {
        static DEFAULT: OnceLock<Vocabulary> = OnceLock::new();
        DEFAULT.get_or_init(|| {
            Vocabulary::load_str(DEFAULT_VOCABULARY_JSON)
                .expect("shipped vocabulary must validate")
        })
    }

    fn check_vfx_hierarchy(&self) -> Result<(), TaxonomyError> {
        let categories = self.values(SubAxis::VfxCategory);
        for entry in self.values(SubAxis::VfxEffect) {
            let meta = entry.metadata.as_ref().expect("validated above");
            let cat_norm = normalize_token(&meta.category);
            if !categories
                .iter()
                .any(|c| normalize_token(&c.value) == cat_norm)
            {
                return Err(TaxonomyError::Invalid(format!(
                    "vfx value {:?} references unknown category {:?}",
                    entry.value, meta.category
                )));
            }
        }
        Ok(())
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn values(&self, axis: SubAxis) -> &[VocabEntry] {
        self.axes.get(&axis).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn value_count(&self, axis: SubAxis) -> usize {
        self.values(axis).len()
    }

    /// Total canonical tag count over all leaf sub-axes. VFX categories are
    /// groupings rather than tags and are not counted.
    pub fn tag_count(&self) -> usize {
        SubAxis::ALL
            .iter()
            .filter(|a| **a != SubAxis::VfxCategory)
            .map(|a| self.value_count(*a))
            .sum()
    }

    pub fn contains(&self, axis: SubAxis, raw: &str) -> bool {
        let key = normalize_token(raw);
        self.index
            .get(&key)
            .map(|hits| hits.iter().any(|(a, _)| *a == axis))
            .unwrap_or(false)
    }

    /// Canonical display form of a value on an axis, resolving through its
    /// declared aliases as well.
    pub fn canonical_value(&self, axis: SubAxis, raw: &str) -> Option<&str> {
        let key = normalize_token(raw);
        if let Some(hits) = self.index.get(&key) {
            for (a, i) in hits {
                if *a == axis {
                    return Some(&self.axes[a][*i].value);
                }
            }
        }
        for entry in self.values(axis) {
            if entry.aliases.iter().any(|al| normalize_token(al) == key) {
                return Some(&entry.value);
            }
        }
        None
    }

    /// Whether a three-level VFX type path (category, subcategory, effect)
    /// exists, matching each level case-insensitively and through aliases.
    pub fn vfx_path_exists(&self, type_: &str, sub_type: &str, sub_sub_type: &str) -> bool {
        let Some(category) = self.canonical_value(SubAxis::VfxCategory, type_) else {
            return false;
        };
        let Some(effect) = self.canonical_value(SubAxis::VfxEffect, sub_sub_type) else {
            return false;
        };
        let effect_norm = normalize_token(effect);
        self.values(SubAxis::VfxEffect).iter().any(|e| {
            normalize_token(&e.value) == effect_norm
                && e.metadata.as_ref().is_some_and(|m| {
                    normalize_token(&m.category) == normalize_token(category)
                        && normalize_token(&m.subcategory) == normalize_token(sub_type)
                })
        })
    }

    pub fn entry(&self, tag: &Tag) -> Option<&VocabEntry> {
        let key = tag.normalized();
        self.values(tag.axis)
            .iter()
            .find(|e| normalize_token(&e.value) == key)
    }
}

/// Alias-to-canonical lookup built from a vocabulary. Declared aliases map
/// to exactly one canonical tag; the same canonical token may legitimately
/// exist on several sub-axes (for example "Other"), in which case an
/// unqualified lookup reports ambiguity and a scoped lookup resolves it.
#[derive(Clone, Debug)]
pub struct SynonymDictionary {
    entries: HashMap<String, Vec<Tag>>,
    // (alias token, canonical tag) pairs for the declared (non-identity) aliases
    declared: Vec<(String, Tag)>,
}

impl SynonymDictionary {
    pub fn from_vocabulary(vocab: &Vocabulary) -> Result<Self, TaxonomyError> {
        let mut entries: HashMap<String, Vec<Tag>> = HashMap::new();
        let mut declared: Vec<(String, Tag)> = Vec::new();

        for axis in SubAxis::ALL {
            for entry in vocab.values(axis) {
                let tag = Tag {
                    axis,
                    value: entry.value.clone(),
                };
                entries
                    .entry(normalize_token(&entry.value))
                    .or_default()
                    .push(tag);
            }
        }
        // Declared aliases must be unambiguous: they may not collide with
        // another alias or with any canonical value token.
        for axis in SubAxis::ALL {
            for entry in vocab.values(axis) {
                let tag = Tag {
                    axis,
                    value: entry.value.clone(),
                };
                for alias in &entry.aliases {
                    let key = normalize_token(alias);
                    if key.is_empty() {
                        continue;
                    }
                    if let Some(existing) = entries.get(&key) {
                        let first = existing[0].clone();
                        if first != tag {
                            return Err(TaxonomyError::AmbiguousAlias {
                                alias: alias.clone(),
                                first: first.to_string(),
                                second: tag.to_string(),
                            });
                        }
                        continue;
                    }
                    entries.insert(key.clone(), vec![tag.clone()]);
                    declared.push((key, tag.clone()));
                }
            }
        }
        Ok(Self { entries, declared })
    }

    pub fn shipped_default() -> &'static SynonymDictionary {
        static DEFAULT: OnceLock<SynonymDictionary> = OnceLock::new();
        DEFAULT.get_or_init(|| {
            SynonymDictionary::from_vocabulary(Vocabulary::shipped_default())
                .expect("shipped dictionary must validate")
        })
    }

    /// Resolve a raw token to its canonical tag. Case-insensitive, internal
    /// whitespace collapsed; idempotent on its own output.
    pub fn canonicalize(&self, raw: &str) -> Result<Tag, TaxonomyError> {
        let key = normalize_token(raw);
        match self.entries.get(&key) {
            None => Err(TaxonomyError::UnknownTag(raw.to_string())),
            Some(hits) if hits.len() == 1 => Ok(hits[0].clone()),
            Some(hits) => Err(TaxonomyError::AmbiguousToken {
                token: raw.to_string(),
                candidates: hits.iter().map(|t| t.to_string()).collect(),
            }),
        }
    }

    /// Resolve a raw token within a known sub-axis.
    pub fn canonicalize_in(&self, raw: &str, axis: SubAxis) -> Result<Tag, TaxonomyError> {
        let key = normalize_token(raw);
        let hits = self
            .entries
            .get(&key)
            .ok_or_else(|| TaxonomyError::UnknownTag(raw.to_string()))?;
        hits.iter()
            .find(|t| t.axis == axis)
            .cloned()
            .ok_or_else(|| TaxonomyError::UnknownTag(format!("{raw} (no match under {axis})")))
    }

    /// Declared (non-identity) aliases as (alias token, canonical tag).
    pub fn declared_aliases(&self) -> &[(String, Tag)] {
        &self.declared
    }

    /// Declared aliases of one canonical tag.
    pub fn aliases_of(&self, tag: &Tag) -> Vec<&str> {
        self.declared
            .iter()
            .filter(|(_, t)| t == tag)
            .map(|(a, _)| a.as_str())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A production coordinate: a duplicate-free set of canonical tags kept in
/// sorted order so downstream encodings are reproducible.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductionSpec {
    tags: Vec<Tag>,
}

impl ProductionSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tags(tags: impl IntoIterator<Item = Tag>) -> Self {
        let mut tags: Vec<Tag> = tags.into_iter().collect();
        tags.sort();
        tags.dedup();
        Self { tags }
    }

    pub fn insert(&mut self, tag: Tag) {
        if !self.tags.contains(&tag) {
            self.tags.push(tag);
            self.tags.sort();
        }
    }

    pub fn remove(&mut self, tag: &Tag) {
        self.tags.retain(|t| t != tag);
    }

    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn contains(&self, tag: &Tag) -> bool {
        self.tags.contains(tag)
    }

    pub fn tags_on_axis(&self, axis: SubAxis) -> impl Iterator<Item = &Tag> {
        self.tags.iter().filter(move |t| t.axis == axis)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum SpecViolation {
    EmptySpec,
    UnknownValue { tag: String },
    DuplicateSingleValued { axis: SubAxis, values: Vec<String> },
}

impl fmt::Display for SpecViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecViolation::EmptySpec => write!(f, "empty spec"),
            SpecViolation::UnknownValue { tag } => write!(f, "unknown value: {tag}"),
            SpecViolation::DuplicateSingleValued { axis, values } => write!(
                f,
                "duplicate single-valued sub-axis {axis}: {}",
                values.join(", ")
            ),
        }
    }
}

/// Outcome of [`validate_spec`]. Valid iff `violations` is empty; warnings
/// do not affect validity.
#[derive(Clone, Debug, Default, Serialize)]
pub struct SpecReport {
    pub violations: Vec<SpecViolation>,
    pub warnings: Vec<String>,
}

impl SpecReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Typical tag counts per clip; outside this range is a warning, not an error.
pub const TYPICAL_TAG_RANGE: (usize, usize) = (4, 8);

pub fn validate_spec(spec: &ProductionSpec, vocab: &Vocabulary) -> SpecReport {
    let mut report = SpecReport::default();
    if spec.is_empty() {
        report.violations.push(SpecViolation::EmptySpec);
        return report;
    }
    for tag in spec.tags() {
        if !vocab.contains(tag.axis, &tag.value) {
            report.violations.push(SpecViolation::UnknownValue {
                tag: tag.to_string(),
            });
        }
    }
    for axis in SubAxis::ALL {
        if !axis.is_single_valued() {
            continue;
        }
        let values: Vec<String> = spec.tags_on_axis(axis).map(|t| t.value.clone()).collect();
        if values.len() > 1 {
            report
                .violations
                .push(SpecViolation::DuplicateSingleValued { axis, values });
        }
    }
    let k = spec.len();
    if k < TYPICAL_TAG_RANGE.0 || k > TYPICAL_TAG_RANGE.1 {
        report.warnings.push(format!(
            "spec has {k} tags; typical range is {}..={}",
            TYPICAL_TAG_RANGE.0, TYPICAL_TAG_RANGE.1
        ));
    }
    report
}
