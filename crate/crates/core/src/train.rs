//! Seeded toy training: flow-matching denoising regression of the tag
//! encoder plus DiT block on a synthetic tag-to-pattern dataset, with
//! stochastic conditioning modes, tag dropping, and synonym augmentation.

use thiserror::Error;

use crate::config::RunConfig;
use crate::dit::{DitError, ToyDenoiser};
use crate::guidance::{augment_tags, sample_mode, ConditionMode, GuidanceError};
use crate::numerics::{Adam, Graph, NumericsError, ParamMap, SeededRng, Tensor};
use crate::taxonomy::{ProductionSpec, SynonymDictionary, Vocabulary};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Dit(#[from] DitError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Deterministic per-tag latent pattern; a spec's target is the sum of its
/// tags' patterns broadcast over the latent tokens, so changing one tag
/// changes the target. Token-uniform targets match the block's lack of
/// positional encodings: they are reachable from pure noise.
pub fn spec_target_pattern(spec: &ProductionSpec, shape: &[usize]) -> Tensor {
    let cols = shape.last().copied().unwrap_or(0);
    let mut row = Tensor::zeros(vec![1, cols]);
    for tag in spec.tags() {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in format!("{tag}").bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        let mut rng = SeededRng::new(h);
        let pattern = Tensor::randn(vec![1, cols], 0.7, &mut rng);
        row = row.add(&pattern).expect("same shape");
    }
    let tokens: usize = shape[..shape.len() - 1].iter().product();
    let data: Vec<f64> = (0..tokens).flat_map(|_| row.data().to_vec()).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// A small fixed roster of production specs with matching directive texts.
pub fn demo_specs(dict: &SynonymDictionary) -> Vec<(ProductionSpec, String)> {
    let mk = |tokens: &[&str]| {
        ProductionSpec::from_tags(
            tokens
                .iter()
                .map(|t| dict.canonicalize(t).expect("demo tag")),
        )
    };
    let specs = vec![
        mk(&["Shinkai Style", "2D Daily", "medium shot", "static", "Fog"]),
        mk(&[
            "2D Japanese Anime",
            "2D Combat",
            "full shot",
            "tracking",
            "Radial Speed Lines",
        ]),
        mk(&[
            "Miyazaki Style",
            "2D Fantasy",
            "long shot",
            "pan / tilt",
            "Falling Petals",
        ]),
        mk(&[
            "2D Flat Cartoon",
            "2D Exaggerated",
            "close-up",
            "heavy shake",
            "Vein Pop",
        ]),
    ];
    specs
        .into_iter()
        .map(|s| {
            let text = s
                .tags()
                .iter()
                .map(|t| t.value.to_lowercase())
                .collect::<Vec<_>>()
                .join(", ");
            (s, format!("an animated clip with {text}"))
        })
        .collect()
}

pub struct ToyTrainReport {
    /// Per-step denoising loss on the training draws.
    pub losses: Vec<f64>,
    pub model: ToyDenoiser,
    /// Denoising loss on the fixed evaluation batch before training.
    pub initial_loss: f64,
    /// Denoising loss on the same batch after training.
    pub final_loss: f64,
}

/// Denoising loss over a fixed, seeded evaluation batch spanning the noise
/// range; per-step training losses are too lambda-noisy to compare runs.
pub fn eval_denoising_loss(
    model: &ToyDenoiser,
    dataset: &[(ProductionSpec, String)],
    token_shape: &[usize],
    seed: u64,
) -> Result<f64, TrainError> {
    let mut rng = SeededRng::new(seed);
    let n = 32;
    let mut total = 0.0;
    for i in 0..n {
        let (spec, text) = &dataset[i % dataset.len()];
        let x0 = spec_target_pattern(spec, token_shape);
        let noise = Tensor::randn(token_shape.to_vec(), 1.0, &mut rng);
        let lambda = (i as f64 + 0.5) / n as f64;
        let x_t = x0.scale(1.0 - lambda).add(&noise.scale(lambda))?;
        let pred = model.predict_x0(&x_t, Some(text), Some(spec), lambda)?;
        total += pred.sub(&x0)?.sum_sq() / x0.len() as f64;
    }
    Ok(total / n as f64)
}

/// Run the seeded toy training loop described by the config.
pub fn run_toy_training(config: &RunConfig) -> Result<ToyTrainReport, TrainError> {
    if config.train.steps == 0 {
        return Err(TrainError::Invalid("step count must be positive".into()));
    }
    let vocab = Vocabulary::shipped_default();
    let dict = SynonymDictionary::shipped_default();
    let root = SeededRng::new(config.seed);
    let mut weight_rng = root.fork(0);
    let mut data_rng = root.fork(1);

    let mut model = ToyDenoiser::new(
        vocab,
        config.model.d,
        config.model.d_text,
        &mut weight_rng,
    );
    let (tf, h, w) = config.model.latent;
    let token_shape = vec![tf * h * w, config.model.d];
    let dataset = demo_specs(dict);
    let eval_seed = config.seed ^ 0x5eed;
    let initial_loss = eval_denoising_loss(&model, &dataset, &token_shape, eval_seed)?;
    let mut opt = Adam::new(config.train.lr);
    let mut losses = Vec::with_capacity(config.train.steps);

    let batch = config.train.batch.max(1);
    let base_lr = config.train.lr;
    for step in 0..config.train.steps {
        // Cosine decay to a tenth of the base rate.
        let progress = step as f64 / config.train.steps as f64;
        opt.lr = base_lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let mut grads: Option<Vec<Tensor>> = None;
        let mut step_loss = 0.0;
        for _ in 0..batch {
            let (spec, text) = &dataset[data_rng.usize_below(dataset.len())];
            let x0 = spec_target_pattern(spec, &token_shape);
            let noise = Tensor::randn(token_shape.clone(), 1.0, &mut data_rng);
            let lambda = data_rng.uniform();
            let x_t = x0.scale(1.0 - lambda).add(&noise.scale(lambda))?;

            let mode = sample_mode(&mut data_rng, &config.conditioning.modes);
            // Hybrid examples additionally see tag dropping and synonym
            // augmentation; the target stays tied to the full spec.
            let augmented = augment_tags(spec, &mut data_rng, dict, &config.conditioning.augment);
            let (text_arg, spec_arg): (Option<&str>, Option<&ProductionSpec>) = match mode {
                ConditionMode::Hybrid => (Some(text), Some(&augmented.spec)),
                ConditionMode::TagOnly => (None, Some(spec)),
                ConditionMode::TextOnly => (Some(text), None),
                ConditionMode::Unconditional => (None, None),
            };

            let mut g = Graph::new();
            let nodes = model.leaves(&mut g);
            let pred = model.forward_graph(&mut g, &nodes, &x_t, text_arg, spec_arg, lambda)?;
            let target = g.constant(x0.clone());
            let loss = g.mse(pred, target)?;
            step_loss += g.value(loss).data()[0];
            g.backward(loss);
            match &mut grads {
                None => grads = Some(nodes.flat().iter().map(|&id| g.grad(id)).collect()),
                Some(acc) => {
                    for (a, &id) in acc.iter_mut().zip(&nodes.flat()) {
                        *a = a.add(&g.grad(id))?;
                    }
                }
            }
        }
        let scale = 1.0 / batch as f64;
        let grads: Vec<Tensor> = grads.expect("batch >= 1").iter().map(|t| t.scale(scale)).collect();
        losses.push(step_loss * scale);

        let mut params: Vec<Tensor> = Vec::new();
        model.visit(&mut |_, t| params.push(t.clone()));
        {
            let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
            opt.step(&mut refs, &grads);
        }
        model.set_params_flat(&params);
    }

    let final_loss = eval_denoising_loss(&model, &dataset, &token_shape, eval_seed)?;
    Ok(ToyTrainReport {
        losses,
        model,
        initial_loss,
        final_loss,
    })
}
