//! Command implementations. All file outputs are byte-stable for fixed
//! inputs and seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use clap::{Args, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use anicond_core::alignment::{
    build_pairs_grouped, Candidate, JudgeScores, PairConfig, RewardWeights,
};
use anicond_core::caption::{
    extract_production_spec, parse_structured_caption, render_directive, resolve_cross_refs,
    serialize_directive, validate_caption_vocab,
};
use anicond_core::checkpoint;
use anicond_core::config::RunConfig;
use anicond_core::datapipe::{
    bucketize, curriculum_weight, gini, parse_manifest, resample_weight, run_cascade,
    sampling_distribution, CascadeOperator, ClipRecord, CurriculumConfig, MarginalCounts, Tier,
    TierThresholds,
};
use anicond_core::distill::{make_schedule, run_toy_distillation, DistillConfig};
use anicond_core::evalkit::{
    bootstrap_ci, corpus_f1, failure_rates, mean_of_three, AtomMatchRecord, RaterLabel,
    RatingTriple,
};
use anicond_core::guidance::{euler_flow_sample, GuidanceScales, SampleInputs};
use anicond_core::numerics::SeededRng;
use anicond_core::taxonomy::{
    validate_spec, ProductionSpec, SubAxis, SynonymDictionary, Tag, Vocabulary,
};
use anicond_core::train::run_toy_training;

use crate::{dependency, validation, CliError, CliResult};

fn read_to_string(path: &Path) -> CliResult<String> {
    fs::read_to_string(path)
        .map_err(|e| validation(anyhow!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| validation(anyhow!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, contents)
        .map_err(|e| validation(anyhow!("cannot write {}: {e}", path.display())))
}

fn emit(out: Option<&Path>, contents: &str) -> CliResult<()> {
    match out {
        Some(path) => write_file(path, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

fn file_hash(path: &Path) -> CliResult<String> {
    let bytes =
        fs::read(path).map_err(|e| dependency(anyhow!("missing {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

// ---------------------------------------------------------------------------
// taxonomy
// ---------------------------------------------------------------------------

#[derive(Subcommand)]
pub enum TaxonomyAction {
    /// Validate a vocabulary file and print its per-axis counts.
    Validate { file: PathBuf },
    /// Canonicalize a token (optionally scoped to one sub-axis).
    Canon {
        token: String,
        #[arg(long)]
        axis: Option<String>,
    },
}

pub fn taxonomy(action: TaxonomyAction) -> CliResult<()> {
    match action {
        TaxonomyAction::Validate { file } => {
            let vocab = Vocabulary::load_str(&read_to_string(&file)?).map_err(validation)?;
            SynonymDictionary::from_vocabulary(&vocab).map_err(validation)?;
            println!("vocabulary ok (version {:?})", vocab.version());
            for axis in SubAxis::ALL {
                println!("  {axis}: {} values", vocab.value_count(axis));
            }
            println!("  total tags: {}", vocab.tag_count());
            Ok(())
        }
        TaxonomyAction::Canon { token, axis } => {
            let dict = SynonymDictionary::shipped_default();
            let tag = match axis {
                Some(name) => {
                    let axis = SubAxis::from_name(&name)
                        .ok_or_else(|| validation(anyhow!("unknown sub-axis {name:?}")))?;
                    dict.canonicalize_in(&token, axis).map_err(validation)?
                }
                None => dict.canonicalize(&token).map_err(validation)?,
            };
            println!("{} -> {} [{}]", token, tag.value, tag.axis);
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// caption
// ---------------------------------------------------------------------------

#[derive(Subcommand)]
pub enum CaptionAction {
    /// Parse a caption, resolve cross references, and check it against the
    /// vocabulary.
    Validate {
        path: PathBuf,
        /// Treat non-vocabulary VFX paths and tags as errors.
        #[arg(long)]
        strict: bool,
    },
    /// Extract the canonical production spec.
    Extract { path: PathBuf },
    /// Render the three-section directive.
    Render { path: PathBuf },
}

pub fn caption(action: CaptionAction) -> CliResult<()> {
    let dict = SynonymDictionary::shipped_default();
    let vocab = Vocabulary::shipped_default();
    match action {
        CaptionAction::Validate { path, strict } => {
            let caption = parse_structured_caption(&read_to_string(&path)?).map_err(validation)?;
            let refs = resolve_cross_refs(&caption);
            let report = validate_caption_vocab(&caption, vocab, dict, strict);
            for warning in &report.warnings {
                println!("warning: {warning}");
            }
            if !report.errors.is_empty() {
                return Err(validation(anyhow!(
                    "vocabulary violations: {}",
                    report.errors.join("; ")
                )));
            }
            println!(
                "caption ok: {} subjects, {} motion segments, {} vfx entries, {} references",
                caption.subjects.len(),
                caption.motion.len(),
                caption.vfx.entries.len(),
                refs.resolutions.len()
            );
            Ok(())
        }
        CaptionAction::Extract { path } => {
            let caption = parse_structured_caption(&read_to_string(&path)?).map_err(validation)?;
            let spec = extract_production_spec(&caption, dict).map_err(validation)?;
            for tag in spec.tags() {
                println!("{}\t{}", tag.axis, tag.value);
            }
            Ok(())
        }
        CaptionAction::Render { path } => {
            let caption = parse_structured_caption(&read_to_string(&path)?).map_err(validation)?;
            let spec = extract_production_spec(&caption, dict).map_err(validation)?;
            let directive = render_directive(&caption, &spec);
            print!("{}", serialize_directive(&directive));
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// rebalance
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct RebalanceArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Flattening exponent; defaults to the configured value.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Directory for the stats CSV and weights file.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

struct RebalanceArtifacts {
    stats_csv: String,
    weights_ndjson: String,
}

fn rebalance_artifacts(corpus: &[ClipRecord], alpha: f64) -> CliResult<RebalanceArtifacts> {
    let counts = MarginalCounts::from_corpus(corpus);
    let mut weights = Vec::with_capacity(corpus.len());
    for clip in corpus {
        let w = resample_weight(counts.for_label(&clip.label), alpha).map_err(validation)?;
        weights.push(w);
    }

    let mut stats = String::from("axis,value,count,soft_count\n");
    let mut gini_rows = String::new();
    for (axis, marginal, pick) in [
        ("style", &counts.style, 0usize),
        ("motion", &counts.motion, 1),
        ("camera", &counts.camera, 2),
        ("vfx", &counts.vfx, 3),
    ] {
        let mut soft: BTreeMap<&str, f64> = BTreeMap::new();
        for (clip, w) in corpus.iter().zip(&weights) {
            let value = match pick {
                0 => &clip.label.style,
                1 => &clip.label.motion,
                2 => &clip.label.camera,
                _ => &clip.label.vfx,
            };
            *soft.entry(value).or_default() += w;
        }
        for (value, count) in marginal {
            stats.push_str(&format!(
                "{axis},{value},{count},{:.6}\n",
                soft.get(value.as_str()).copied().unwrap_or(0.0)
            ));
        }
        let before: Vec<f64> = marginal.values().map(|&c| c as f64).collect();
        let after: Vec<f64> = soft.values().copied().collect();
        gini_rows.push_str(&format!(
            "{axis},{:.6},{:.6}\n",
            gini(&before).map_err(validation)?,
            gini(&after).map_err(validation)?
        ));
    }
    stats.push_str("axis,gini_before,gini_after\n");
    stats.push_str(&gini_rows);

    let mut weights_ndjson = String::new();
    for (clip, w) in corpus.iter().zip(&weights) {
        weights_ndjson.push_str(&format!(
            "{}\n",
            serde_json::json!({"id": clip.id, "weight": w})
        ));
    }
    Ok(RebalanceArtifacts {
        stats_csv: stats,
        weights_ndjson,
    })
}

pub fn rebalance(args: RebalanceArgs, config: &RunConfig) -> CliResult<()> {
    let corpus = parse_manifest(&read_to_string(&args.manifest)?).map_err(validation)?;
    let alpha = args.alpha.unwrap_or(config.curriculum.alpha);
    let artifacts = rebalance_artifacts(&corpus, alpha)?;
    write_file(&args.out_dir.join("rebalance.stats.csv"), &artifacts.stats_csv)?;
    write_file(
        &args.out_dir.join("rebalance.weights.ndjson"),
        &artifacts.weights_ndjson,
    )?;
    println!(
        "rebalanced {} clips at alpha {alpha}; wrote {}",
        corpus.len(),
        args.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// curriculum-plan
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct CurriculumArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Training progress in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

fn curriculum_csv(
    corpus: &[ClipRecord],
    tau: f64,
    alpha: f64,
    cfg: &CurriculumConfig,
) -> CliResult<String> {
    let buckets = bucketize(corpus, cfg.q).map_err(validation)?;
    let probabilities = sampling_distribution(corpus, tau, alpha, cfg).map_err(validation)?;
    let mut csv = String::from("id,q_style,q_motion,q_deformation,difficulty,curriculum_weight,probability\n");
    for ((clip, bucket), p) in corpus.iter().zip(&buckets).zip(&probabilities) {
        let d = bucket.mean_difficulty();
        csv.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.8}\n",
            clip.id,
            bucket.q_style,
            bucket.q_motion,
            bucket.q_deformation,
            d,
            curriculum_weight(tau, d, cfg.gamma, cfg.beta),
            p
        ));
    }
    Ok(csv)
}

pub fn curriculum_plan(args: CurriculumArgs, config: &RunConfig) -> CliResult<()> {
    if !(0.0..=1.0).contains(&args.tau) {
        return Err(validation(anyhow!("tau must lie in [0, 1]")));
    }
    let corpus = parse_manifest(&read_to_string(&args.manifest)?).map_err(validation)?;
    let cfg = CurriculumConfig {
        q: args.q.unwrap_or(config.curriculum.q),
        gamma: args.gamma.unwrap_or(config.curriculum.gamma),
        beta: args.beta.unwrap_or(config.curriculum.beta),
    };
    let csv = curriculum_csv(&corpus, args.tau, config.curriculum.alpha, &cfg)?;
    write_file(&args.out_dir.join("curriculum.plan.csv"), &csv)?;
    println!(
        "planned {} clips at tau {} (Q={}, gamma={}, beta={})",
        corpus.len(),
        args.tau,
        cfg.q,
        cfg.gamma,
        cfg.beta
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// cascade
// ---------------------------------------------------------------------------

#[derive(Deserialize, Serialize)]
struct OperatorSpec {
    name: String,
    cost_rank: u32,
    threshold: f64,
    /// One of: motion, deformation, style, activity.
    scorer: String,
}

#[derive(Deserialize, Serialize, Default)]
struct CascadeSpec {
    operators: Vec<OperatorSpec>,
    #[serde(default)]
    tiers: TierThresholds,
}

fn default_cascade_spec() -> CascadeSpec {
    CascadeSpec {
        operators: vec![
            OperatorSpec {
                name: "motion_floor".into(),
                cost_rank: 1,
                threshold: 0.1,
                scorer: "motion".into(),
            },
            OperatorSpec {
                name: "deformation_floor".into(),
                cost_rank: 2,
                threshold: 0.05,
                scorer: "deformation".into(),
            },
            OperatorSpec {
                name: "activity".into(),
                cost_rank: 3,
                threshold: 0.4,
                scorer: "activity".into(),
            },
        ],
        tiers: {
            let mut t = TierThresholds::default();
            t.a.insert("activity".into(), 0.8);
            t.s.insert("activity".into(), 1.3);
            t.s.insert("motion_floor".into(), 0.6);
            t
        },
    }
}

fn build_operators(spec: &CascadeSpec) -> CliResult<Vec<CascadeOperator>> {
    spec.operators
        .iter()
        .map(|op| {
            let scorer: Box<dyn Fn(&ClipRecord) -> f64 + Send + Sync> = match op.scorer.as_str() {
                "motion" => Box::new(|c: &ClipRecord| c.scores.motion),
                "deformation" => Box::new(|c: &ClipRecord| c.scores.deformation),
                "style" => Box::new(|c: &ClipRecord| c.scores.style.unwrap_or(0.0)),
                "activity" => Box::new(|c: &ClipRecord| c.scores.motion + c.scores.deformation),
                other => {
                    return Err(validation(anyhow!(
                        "unknown scorer {other:?}; expected motion, deformation, style, or activity"
                    )))
                }
            };
            Ok(CascadeOperator {
                name: op.name.clone(),
                cost_rank: op.cost_rank,
                threshold: op.threshold,
                scorer,
            })
        })
        .collect()
}

#[derive(Args)]
pub struct CascadeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Operator configuration JSON; a built-in toy cascade runs without it.
    #[arg(long)]
    pub ops: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

struct CascadeArtifacts {
    tiers_ndjson: String,
    stats_csv: String,
}

fn cascade_artifacts(corpus: &[ClipRecord], spec: &CascadeSpec) -> CliResult<CascadeArtifacts> {
    let operators = build_operators(spec)?;
    let outcome = run_cascade(corpus, &operators, &spec.tiers).map_err(validation)?;
    let mut tiers_ndjson = String::new();
    for (i, clip) in corpus.iter().enumerate() {
        tiers_ndjson.push_str(&format!(
            "{}\n",
            serde_json::json!({
                "id": clip.id,
                "tier": outcome.tiers[i],
                "rejected_at": outcome.rejected_at[i],
            })
        ));
    }
    let mut stats_csv = String::from("operator,evaluated,passed,pass_rate\n");
    for s in &outcome.stats {
        stats_csv.push_str(&format!(
            "{},{},{},{:.6}\n",
            s.name,
            s.evaluated,
            s.passed,
            s.pass_rate()
        ));
    }
    let count = |t: Tier| outcome.tiers.iter().filter(|x| **x == t).count();
    stats_csv.push_str("tier,count\n");
    for (name, tier) in [
        ("B", Tier::B),
        ("A", Tier::A),
        ("S", Tier::S),
        ("rejected", Tier::Rejected),
    ] {
        stats_csv.push_str(&format!("{name},{}\n", count(tier)));
    }
    Ok(CascadeArtifacts {
        tiers_ndjson,
        stats_csv,
    })
}

pub fn cascade(args: CascadeArgs) -> CliResult<()> {
    let corpus = parse_manifest(&read_to_string(&args.manifest)?).map_err(validation)?;
    let spec = match &args.ops {
        Some(path) => serde_json::from_str(&read_to_string(path)?)
            .map_err(|e| validation(anyhow!("bad operator config: {e}")))?,
        None => default_cascade_spec(),
    };
    let artifacts = cascade_artifacts(&corpus, &spec)?;
    write_file(&args.out_dir.join("cascade.tiers.ndjson"), &artifacts.tiers_ndjson)?;
    write_file(&args.out_dir.join("cascade.stats.csv"), &artifacts.stats_csv)?;
    println!("cascaded {} clips; wrote {}", corpus.len(), args.out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// toy-train
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct ToyTrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value = "out/toy-train")]
    pub out_dir: PathBuf,
}

pub fn toy_train(args: ToyTrainArgs, config: &RunConfig) -> CliResult<()> {
    let mut config = config.clone();
    if let Some(steps) = args.steps {
        config.train.steps = steps;
    }
    let report = run_toy_training(&config).map_err(|e| CliError::Numeric(e.into()))?;
    let mut csv = String::from("step,loss\n");
    for (i, loss) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{loss:.8}\n"));
    }
    write_file(&args.out_dir.join("losses.csv"), &csv)?;
    checkpoint::save_checkpoint(&args.out_dir.join("checkpoint"), &report.model)
        .map_err(|e| validation(anyhow!("checkpoint write failed: {e}")))?;
    println!(
        "trained {} steps (seed {}): eval loss {:.4} -> {:.4}",
        config.train.steps, config.seed, report.initial_loss, report.final_loss
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct SampleArgs {
    /// JSON file: an array of tag tokens or {"axis", "value"} objects.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// UTF-8 file with the free-form directive text.
    #[arg(long)]
    pub text: Option<PathBuf>,
    #[arg(long)]
    pub w_text: Option<f64>,
    #[arg(long)]
    pub w_tag: Option<f64>,
    /// Disable guidance entirely (single conditional pass per step).
    #[arg(long)]
    pub no_cfg: bool,
    /// Anchor count; 8 uses the chained 4+4 expert schedule.
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    /// Checkpoint directory from toy-train; a fresh seeded model otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "out/sample")]
    pub out_dir: PathBuf,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SpecEntry {
    Token(String),
    Scoped { axis: String, value: String },
}

fn load_spec(path: &Path) -> CliResult<ProductionSpec> {
    let dict = SynonymDictionary::shipped_default();
    let entries: Vec<SpecEntry> = serde_json::from_str(&read_to_string(path)?)
        .map_err(|e| validation(anyhow!("bad spec file: {e}")))?;
    let mut tags: Vec<Tag> = Vec::new();
    for entry in entries {
        let tag = match entry {
            SpecEntry::Token(t) => dict.canonicalize(&t).map_err(validation)?,
            SpecEntry::Scoped { axis, value } => {
                let axis = SubAxis::from_name(&axis)
                    .ok_or_else(|| validation(anyhow!("unknown sub-axis {axis:?}")))?;
                dict.canonicalize_in(&value, axis).map_err(validation)?
            }
        };
        tags.push(tag);
    }
    let spec = ProductionSpec::from_tags(tags);
    let report = validate_spec(&spec, Vocabulary::shipped_default());
    if !report.is_valid() {
        return Err(validation(anyhow!(
            "invalid spec: {}",
            report
                .violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    Ok(spec)
}

pub fn sample(args: SampleArgs, config: &RunConfig) -> CliResult<()> {
    let spec = args.spec.as_deref().map(load_spec).transpose()?;
    let text = args.text.as_deref().map(read_to_string).transpose()?;

    let rng = SeededRng::new(config.seed);
    let mut model = anicond_core::dit::ToyDenoiser::new(
        Vocabulary::shipped_default(),
        config.model.d,
        config.model.d_text,
        &mut rng.fork(0),
    );
    if let Some(dir) = &args.checkpoint {
        checkpoint::load_checkpoint(dir, &mut model)
            .map_err(|e| dependency(anyhow!("cannot load checkpoint: {e}")))?;
    }

    let schedule = make_schedule(config.distill.boundary).map_err(validation)?;
    let anchors: Vec<f64> = match args.steps {
        0 => return Err(validation(anyhow!("steps must be at least 1"))),
        1 => vec![1.0],
        8 => schedule.chain.clone(),
        n => (0..n).map(|i| 1.0 - i as f64 / (n - 1) as f64).collect(),
    };

    let scales = if args.no_cfg {
        None
    } else {
        Some(GuidanceScales {
            text: args.w_text.unwrap_or(config.guidance.text),
            tag: args.w_tag.unwrap_or(config.guidance.tag),
        })
    };
    let (tf, hh, ww) = config.model.latent;
    let shape = [tf * hh * ww, config.model.d];
    let (latent, trace) = euler_flow_sample(
        &model,
        SampleInputs {
            text: text.as_deref(),
            spec: spec.as_ref(),
        },
        &anchors,
        scales,
        &shape,
        config.distill.boundary,
        &mut rng.fork(1),
    )
    .map_err(validation)?;

    fs::create_dir_all(&args.out_dir)
        .map_err(|e| validation(anyhow!("cannot create out dir: {e}")))?;
    let mut bin = Vec::new();
    latent
        .write_binary(&mut bin)
        .map_err(|e| validation(anyhow!("tensor dump failed: {e}")))?;
    fs::write(args.out_dir.join("latent.bin"), bin)
        .map_err(|e| validation(anyhow!("cannot write latent: {e}")))?;

    let mode = match (&text, &spec) {
        (Some(_), Some(s)) if !s.is_empty() => "hybrid",
        (None, Some(s)) if !s.is_empty() => "tag_only",
        (Some(_), _) => "text_only",
        _ => "unconditional",
    };
    let manifest = serde_json::json!({
        "seed": config.seed,
        "mode": mode,
        "anchors": trace.anchors,
        "experts": trace.experts,
        "scales": scales.map(|s| serde_json::json!({"text": s.text, "tag": s.tag})),
        "latent_shape": shape,
    });
    write_file(
        &args.out_dir.join("run.manifest.json"),
        &format!("{}\n", serde_json::to_string_pretty(&manifest).expect("json")),
    )?;
    println!("sampled {mode} latent over {} anchors into {}", anchors.len(), args.out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// distill
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct DistillArgs {
    #[arg(long, default_value_t = 40)]
    pub steps: u64,
    #[arg(long)]
    pub boundary: Option<f64>,
    #[arg(long)]
    pub shift: Option<f64>,
    #[arg(long, default_value = "out/distill")]
    pub out_dir: PathBuf,
}

pub fn distill(args: DistillArgs, config: &RunConfig) -> CliResult<()> {
    let dcfg = DistillConfig {
        seed: config.seed,
        steps_per_expert: args.steps,
        boundary: args.boundary.unwrap_or(config.distill.boundary),
        shift: args.shift.unwrap_or(config.distill.shift),
        ema_decay: config.distill.ema_decay,
        scales: config.guidance,
        d: config.model.d,
        d_text: config.model.d_text,
        latent: config.model.latent,
        ..DistillConfig::default()
    };
    let report = run_toy_distillation(&dcfg).map_err(|e| CliError::Numeric(e.into()))?;

    let mut gen_csv = String::from("step,expert,generator_loss,clip_scale\n");
    for (step, expert, loss, scale) in &report.generator_curve {
        gen_csv.push_str(&format!("{step},{expert},{loss:.8},{scale:.6}\n"));
    }
    write_file(&args.out_dir.join("generator.curve.csv"), &gen_csv)?;

    let mut critic_csv = String::from("step,critic_loss\n");
    for (step, loss) in &report.critic_curve {
        critic_csv.push_str(&format!("{step},{loss:.8}\n"));
    }
    write_file(&args.out_dir.join("critic.curve.csv"), &critic_csv)?;

    let trace = serde_json::json!({
        "boundary": report.schedule.boundary,
        "chain": report.schedule.chain,
        "experts": report.deployment_trace.experts,
    });
    write_file(
        &args.out_dir.join("routing.trace.json"),
        &format!("{}\n", serde_json::to_string_pretty(&trace).expect("json")),
    )?;
    if let Some(student) = &report.student {
        checkpoint::save_checkpoint(&args.out_dir.join("ema-checkpoint"), student)
            .map_err(|e| validation(anyhow!("checkpoint write failed: {e}")))?;
    }
    println!(
        "distilled {} steps per expert (seed {}); wrote {}",
        args.steps,
        config.seed,
        args.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// dpo-pairs
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct DpoPairsArgs {
    /// Newline-delimited JSON: {prompt_id, candidate_id, face, limb, line, motion}.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub small_gap: Option<f64>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Deserialize)]
struct ScoreRow {
    prompt_id: String,
    candidate_id: String,
    face: f64,
    limb: f64,
    line: f64,
    motion: f64,
}

fn dpo_pair_artifacts(
    rows: &str,
    threshold: f64,
    small_gap: f64,
) -> CliResult<(String, String, usize, usize)> {
    let weights = RewardWeights::default();
    let mut candidates = Vec::new();
    for (lineno, line) in rows.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ScoreRow = serde_json::from_str(line)
            .map_err(|e| validation(anyhow!("scores line {}: {e}", lineno + 1)))?;
        let candidate = Candidate::new(
            row.candidate_id,
            row.prompt_id,
            JudgeScores {
                face: row.face,
                limb: row.limb,
                line: row.line,
                motion: row.motion,
            },
            &weights,
        )
        .map_err(validation)?;
        candidates.push(candidate);
    }
    let outcome = build_pairs_grouped(
        &candidates,
        &PairConfig {
            min_score_threshold: threshold,
            small_gap,
            emit_auto_pairs_for_small_gap: false,
        },
    );
    let mut pairs_ndjson = String::new();
    for p in &outcome.pairs {
        pairs_ndjson.push_str(&format!("{}\n", serde_json::to_string(p).expect("json")));
    }
    let mut queue_ndjson = String::new();
    for q in &outcome.expert_queue {
        queue_ndjson.push_str(&format!("{}\n", serde_json::to_string(q).expect("json")));
    }
    for s in &outcome.skipped {
        queue_ndjson.push_str(&format!(
            "{}\n",
            serde_json::json!({"prompt_id": s.0, "skipped": s.1})
        ));
    }
    Ok((
        pairs_ndjson,
        queue_ndjson,
        outcome.pairs.len(),
        outcome.expert_queue.len(),
    ))
}

pub fn dpo_pairs(args: DpoPairsArgs, config: &RunConfig) -> CliResult<()> {
    let rows = read_to_string(&args.scores)?;
    let threshold = args.threshold.unwrap_or(config.alignment.min_score_threshold);
    let small_gap = args.small_gap.unwrap_or(config.alignment.small_gap);
    let (pairs, queue, n_pairs, n_queued) = dpo_pair_artifacts(&rows, threshold, small_gap)?;
    write_file(&args.out_dir.join("dpo.pairs.ndjson"), &pairs)?;
    write_file(&args.out_dir.join("dpo.expert_queue.ndjson"), &queue)?;
    println!("built {n_pairs} pairs, queued {n_queued} prompts for expert annotation");
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Subcommand)]
pub enum EvalAction {
    /// Error/hallucination rates per dimension from verdict labels.
    Rates {
        #[arg(long)]
        r#in: PathBuf,
        /// Evaluation set size (denominator).
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corpus-level F1 per dimension from atom-match records.
    F1 {
        #[arg(long)]
        r#in: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Percentile bootstrap CI of corpus F1 per dimension.
    Ci {
        #[arg(long)]
        r#in: PathBuf,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean-of-three rater aggregation per dimension.
    Human {
        #[arg(long)]
        r#in: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_ndjson<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let mut out = Vec::new();
    for (lineno, line) in read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| validation(anyhow!("{} line {}: {e}", path.display(), lineno + 1)))?,
        );
    }
    Ok(out)
}

fn dimensions_of<T>(items: &[T], dim: impl Fn(&T) -> &str) -> Vec<String> {
    let mut dims: Vec<String> = items.iter().map(|i| dim(i).to_string()).collect();
    dims.sort();
    dims.dedup();
    dims
}

pub fn eval(action: EvalAction, config: &RunConfig) -> CliResult<()> {
    match action {
        EvalAction::Rates { r#in, n, out } => {
            let labels: Vec<RaterLabel> = read_ndjson(&r#in)?;
            let mut csv = String::from("dimension,error_rate,hallucination_rate\n");
            for dim in dimensions_of(&labels, |l| &l.dimension) {
                let subset: Vec<RaterLabel> = labels
                    .iter()
                    .filter(|l| l.dimension == dim)
                    .cloned()
                    .collect();
                let (err, hall) = failure_rates(&subset, n).map_err(validation)?;
                csv.push_str(&format!("{dim},{err:.4},{hall:.4}\n"));
            }
            emit(out.as_deref(), &csv)
        }
        EvalAction::F1 { r#in, out } => {
            let records: Vec<AtomMatchRecord> = read_ndjson(&r#in)?;
            let mut csv = String::from("dimension,f1\n");
            for dim in dimensions_of(&records, |r| &r.dimension) {
                let subset: Vec<AtomMatchRecord> = records
                    .iter()
                    .filter(|r| r.dimension == dim)
                    .cloned()
                    .collect();
                csv.push_str(&format!("{dim},{:.6}\n", corpus_f1(&subset).map_err(validation)?));
            }
            emit(out.as_deref(), &csv)
        }
        EvalAction::Ci {
            r#in,
            resamples,
            level,
            out,
        } => {
            let records: Vec<AtomMatchRecord> = read_ndjson(&r#in)?;
            let mut csv = String::from("dimension,point,low,high,degenerate\n");
            for (i, dim) in dimensions_of(&records, |r| &r.dimension).iter().enumerate() {
                let subset: Vec<AtomMatchRecord> = records
                    .iter()
                    .filter(|r| &r.dimension == dim)
                    .cloned()
                    .collect();
                let mut rng = SeededRng::new(config.seed).fork(i as u64);
                let ci = bootstrap_ci(&subset, resamples, level, &mut rng).map_err(validation)?;
                csv.push_str(&format!(
                    "{dim},{:.6},{:.6},{:.6},{}\n",
                    ci.point, ci.low, ci.high, ci.degenerate
                ));
            }
            emit(out.as_deref(), &csv)
        }
        EvalAction::Human { r#in, out } => {
            let triples: Vec<RatingTriple> = read_ndjson(&r#in)?;
            let report = mean_of_three(&triples).map_err(validation)?;
            let mut csv = String::from("dimension,mean_score\n");
            for (dim, mean) in &report.per_dimension {
                csv.push_str(&format!("{dim},{mean:.4}\n"));
            }
            emit(out.as_deref(), &csv)
        }
    }
}

// ---------------------------------------------------------------------------
// pipeline and report
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Optional operator configuration for the cascade stage.
    #[arg(long)]
    pub ops: Option<PathBuf>,
    /// Optional Judge scores; when present the dpo-pairs stage runs.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Resume from a later stage, reusing (and hash-verifying) earlier
    /// artifacts: cascade, rebalance, curriculum, or dpo-pairs.
    #[arg(long)]
    pub from: Option<String>,
    #[arg(long, default_value = "out/pipeline")]
    pub out_dir: PathBuf,
}

fn stage_index(name: &str) -> CliResult<usize> {
    match name {
        "cascade" => Ok(0),
        "rebalance" => Ok(1),
        "curriculum" | "curriculum-plan" => Ok(2),
        "dpo-pairs" | "dpo_pairs" => Ok(3),
        other => Err(validation(anyhow!("unknown pipeline stage {other:?}"))),
    }
}

#[derive(Serialize, Deserialize)]
struct StageManifest {
    stage: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn write_stage_manifest(
    out_dir: &Path,
    stage: &str,
    inputs: &[&Path],
    outputs: &[&Path],
) -> CliResult<StageManifest> {
    let mut manifest = StageManifest {
        stage: stage.to_string(),
        inputs: BTreeMap::new(),
        outputs: BTreeMap::new(),
    };
    for path in inputs {
        manifest
            .inputs
            .insert(path.display().to_string(), file_hash(path)?);
    }
    for path in outputs {
        manifest
            .outputs
            .insert(path.display().to_string(), file_hash(path)?);
    }
    write_file(
        &out_dir.join(format!("stage_{stage}.json")),
        &format!(
            "{}\n",
            serde_json::to_string_pretty(&manifest).expect("json")
        ),
    )?;
    Ok(manifest)
}

/// Verify that an upstream artifact still matches the hash its producing
/// stage recorded.
fn verify_upstream(out_dir: &Path, stage: &str, artifact: &Path) -> CliResult<()> {
    let manifest_path = out_dir.join(format!("stage_{stage}.json"));
    let manifest: StageManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)
        .map_err(|e| dependency(anyhow!("stage {stage}: missing manifest {}: {e}", manifest_path.display())))?)
    .map_err(|e| dependency(anyhow!("stage {stage}: bad manifest: {e}")))?;
    let key = artifact.display().to_string();
    let recorded = manifest
        .outputs
        .get(&key)
        .ok_or_else(|| dependency(anyhow!("stage {stage}: {key} not among recorded outputs")))?;
    let actual = file_hash(artifact)?;
    if &actual != recorded {
        return Err(dependency(anyhow!(
            "stage {stage}: artifact {key} hash mismatch (tampered or stale)"
        )));
    }
    Ok(())
}

pub fn pipeline(args: PipelineArgs, config: &RunConfig) -> CliResult<()> {
    let out_dir = &args.out_dir;
    fs::create_dir_all(out_dir).map_err(|e| validation(anyhow!("cannot create out dir: {e}")))?;
    let corpus = parse_manifest(&read_to_string(&args.manifest)?).map_err(validation)?;
    let start = args.from.as_deref().map(stage_index).transpose()?.unwrap_or(0);
    let mut stages = Vec::new();

    // Stage 1: cascade.
    let tiers_path = out_dir.join("cascade.tiers.ndjson");
    let cascade_stats = out_dir.join("cascade.stats.csv");
    if start <= 0 {
        let spec = match &args.ops {
            Some(path) => serde_json::from_str(&read_to_string(path)?)
                .map_err(|e| validation(anyhow!("bad operator config: {e}")))?,
            None => default_cascade_spec(),
        };
        let artifacts = cascade_artifacts(&corpus, &spec)?;
        write_file(&tiers_path, &artifacts.tiers_ndjson)?;
        write_file(&cascade_stats, &artifacts.stats_csv)?;
        write_stage_manifest(
            out_dir,
            "cascade",
            &[&args.manifest],
            &[&tiers_path, &cascade_stats],
        )?;
        stages.push("cascade");
    }

    // Stage 2: rebalance over cascade survivors.
    verify_upstream(out_dir, "cascade", &tiers_path)?;
    let survivors: Vec<ClipRecord> = {
        let mut keep = Vec::new();
        for (lineno, line) in fs::read_to_string(&tiers_path)
            .map_err(|e| dependency(anyhow!("stage rebalance: missing cascade output: {e}")))?
            .lines()
            .enumerate()
        {
            let row: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| dependency(anyhow!("cascade output line {}: {e}", lineno + 1)))?;
            if row["tier"] != "rejected" {
                keep.push(corpus[lineno].clone());
            }
        }
        keep
    };
    let weights_path = out_dir.join("rebalance.weights.ndjson");
    let rebalance_stats = out_dir.join("rebalance.stats.csv");
    if start <= 1 {
        if survivors.is_empty() {
            // Graceful empty outputs.
            write_file(&rebalance_stats, "axis,value,count,soft_count\n")?;
            write_file(&weights_path, "")?;
        } else {
            let artifacts = rebalance_artifacts(&survivors, config.curriculum.alpha)?;
            write_file(&rebalance_stats, &artifacts.stats_csv)?;
            write_file(&weights_path, &artifacts.weights_ndjson)?;
        }
        write_stage_manifest(
            out_dir,
            "rebalance",
            &[&tiers_path],
            &[&weights_path, &rebalance_stats],
        )?;
        stages.push("rebalance");
    }

    // Stage 3: curriculum plan at mid-progress.
    verify_upstream(out_dir, "rebalance", &weights_path)?;
    let plan_path = out_dir.join("curriculum.plan.csv");
    if start <= 2 {
        if survivors.is_empty() {
            write_file(
                &plan_path,
                "id,q_style,q_motion,q_deformation,difficulty,curriculum_weight,probability\n",
            )?;
        } else {
            let cfg = CurriculumConfig {
                q: config.curriculum.q,
                gamma: config.curriculum.gamma,
                beta: config.curriculum.beta,
            };
            let csv = curriculum_csv(&survivors, 0.5, config.curriculum.alpha, &cfg)?;
            write_file(&plan_path, &csv)?;
        }
        write_stage_manifest(out_dir, "curriculum", &[&weights_path], &[&plan_path])?;
        stages.push("curriculum");
    }

    // Stage 4 (optional): preference pairs.
    if let Some(scores) = &args.scores {
        let rows = read_to_string(scores)?;
        let (pairs, queue, _, _) = dpo_pair_artifacts(
            &rows,
            config.alignment.min_score_threshold,
            config.alignment.small_gap,
        )?;
        let pairs_path = out_dir.join("dpo.pairs.ndjson");
        let queue_path = out_dir.join("dpo.expert_queue.ndjson");
        write_file(&pairs_path, &pairs)?;
        write_file(&queue_path, &queue)?;
        write_stage_manifest(out_dir, "dpo_pairs", &[scores], &[&pairs_path, &queue_path])?;
        stages.push("dpo_pairs");
    }

    let combined = serde_json::json!({
        "stages": stages,
        "corpus_clips": corpus.len(),
        "survivors": survivors.len(),
    });
    write_file(
        &out_dir.join("pipeline.report.json"),
        &format!("{}\n", serde_json::to_string_pretty(&combined).expect("json")),
    )?;
    println!(
        "pipeline ran {} stages over {} clips into {}",
        stages.len(),
        corpus.len(),
        out_dir.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long, default_value = "out/pipeline")]
    pub dir: PathBuf,
}

pub fn report(args: ReportArgs) -> CliResult<()> {
    let dir = &args.dir;
    let mut text = String::from("== pipeline report ==\n");

    let gini_section = fs::read_to_string(dir.join("rebalance.stats.csv")).ok().map(|csv| {
        let mut lines = Vec::new();
        let mut in_gini = false;
        for line in csv.lines() {
            if line.starts_with("axis,gini_before") {
                in_gini = true;
                continue;
            }
            if in_gini {
                lines.push(line.to_string());
            }
        }
        lines
    });
    match gini_section {
        Some(rows) if !rows.is_empty() => {
            text.push_str("\n-- Gini before/after rebalancing --\n");
            for row in rows {
                let parts: Vec<&str> = row.split(',').collect();
                if parts.len() == 3 {
                    text.push_str(&format!(
                        "  {:<8} {} -> {}\n",
                        parts[0], parts[1], parts[2]
                    ));
                }
            }
        }
        _ => text.push_str("\n-- Gini before/after rebalancing: absent --\n"),
    }

    text.push_str("\n-- curriculum weight curve (default schedule) --\n");
    let cfg = CurriculumConfig::default();
    for tau10 in 0..=10 {
        let tau = tau10 as f64 / 10.0;
        let ws: Vec<String> = [0.0, 0.25, 0.5, 0.75, 1.0]
            .iter()
            .map(|&d| format!("{:.3}", curriculum_weight(tau, d, cfg.gamma, cfg.beta)))
            .collect();
        text.push_str(&format!("  tau {tau:.1}: D=0..1 -> [{}]\n", ws.join(", ")));
    }

    match fs::read_to_string(dir.join("dpo.pairs.ndjson")) {
        Ok(pairs) => {
            let n = pairs.lines().filter(|l| !l.trim().is_empty()).count();
            text.push_str(&format!("\n-- preference pairs: {n} --\n"));
        }
        Err(_) => text.push_str("\n-- preference pairs: absent --\n"),
    }

    match fs::read_to_string(dir.join("cascade.stats.csv")) {
        Ok(stats) => {
            text.push_str("\n-- cascade stats --\n");
            for line in stats.lines() {
                text.push_str(&format!("  {line}\n"));
            }
        }
        Err(_) => text.push_str("\n-- cascade stats: absent --\n"),
    }

    let mut any_eval = false;
    for name in ["eval.rates.csv", "eval.f1.csv", "eval.ci.csv", "eval.human.csv"] {
        if let Ok(table) = fs::read_to_string(dir.join(name)) {
            any_eval = true;
            text.push_str(&format!("\n-- {name} --\n"));
            for line in table.lines() {
                text.push_str(&format!("  {line}\n"));
            }
        }
    }
    if !any_eval {
        text.push_str("\n-- eval tables: absent --\n");
    }

    print!("{text}");
    Ok(())
}
