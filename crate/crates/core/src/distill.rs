//! Distribution-matching distillation mechanics: flow interpolation and
//! shift, the normalized DMD gradient with its detached-target generator
//! loss, EMA-tracked adaptive gradient clipping, student EMA weights, the
//! asynchronous critic schedule, and the per-expert 4+4 anchor schedule
//! with CFG-distillation teacher targets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dit::{DitError, ToyDenoiser, EXPERT_BOUNDARY};
use crate::guidance::{
    cfg_prediction, euler_flow_sample, Denoiser, GuidanceError, GuidanceScales, SampleInputs,
    SampleTrace,
};
use crate::numerics::{Adam, Graph, NodeId, NumericsError, ParamMap, SeededRng, Tensor};
use crate::taxonomy::{SynonymDictionary, Vocabulary};
use crate::train::{demo_specs, spec_target_pattern};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Dit(#[from] DitError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
}

/// Default numerical floor inside the DMD normalization.
pub const DEFAULT_EPS_NUM: f64 = 1e-8;
/// Default student EMA decay.
pub const DEFAULT_EMA_DECAY: f64 = 0.995;
/// Default flow-shift strength.
pub const DEFAULT_SHIFT: f64 = 10.0;

/// A point on the linear interpolation path between data and noise.
#[derive(Clone, Debug)]
pub struct FlowState {
    pub x0: Tensor,
    pub noise: Tensor,
    pub lambda: f64,
}

impl FlowState {
    pub fn interpolate(&self) -> Result<Tensor, DistillError> {
        interpolate(&self.x0, &self.noise, self.lambda)
    }
}

/// x_t = (1 - lambda) x0 + lambda noise.
pub fn interpolate(x0: &Tensor, noise: &Tensor, lambda: f64) -> Result<Tensor, DistillError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(DistillError::Invalid(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    Ok(x0.scale(1.0 - lambda).add(&noise.scale(lambda))?)
}

/// Flow shift: a Moebius reparameterization of the noise level with fixed
/// endpoints; s > 1 biases toward high noise.
pub fn flow_shift(lambda: f64, s: f64) -> f64 {
    s * lambda / (1.0 + (s - 1.0) * lambda)
}

#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub s: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self { s: DEFAULT_SHIFT }
    }
}

/// Normalized distribution-matching gradient: with p_real = x0_hat - teacher
/// and p_fake = x0_hat - fake, grad = (p_real - p_fake) / (mean|.| + eps).
pub fn dmd_gradient(
    x0_hat: &Tensor,
    x0_teacher: &Tensor,
    x0_fake: &Tensor,
    eps_num: f64,
) -> Result<Tensor, DistillError> {
    let p_real = x0_hat.sub(x0_teacher)?;
    let p_fake = x0_hat.sub(x0_fake)?;
    let diff = p_real.sub(&p_fake)?;
    let denom = diff.mean_abs() + eps_num;
    Ok(diff.scale(1.0 / denom))
}

/// Generator loss value: 0.5 || x0_hat - (x0_hat - grad)_detached ||^2,
/// which collapses to 0.5 ||grad||^2; its gradient in x0_hat is grad itself.
pub fn generator_loss(x0_hat: &Tensor, grad: &Tensor) -> Result<f64, DistillError> {
    if x0_hat.shape() != grad.shape() {
        return Err(DistillError::Invalid(format!(
            "prediction shape {:?} does not match gradient shape {:?}",
            x0_hat.shape(),
            grad.shape()
        )));
    }
    Ok(0.5 * grad.sum_sq())
}

/// Graph form of the generator loss with the detached target, so backward
/// pushes exactly `grad` into the prediction node.
pub fn generator_loss_graph(
    g: &mut Graph,
    x0_pred: NodeId,
    grad: &Tensor,
) -> Result<NodeId, DistillError> {
    let target_value = g.value(x0_pred).sub(grad)?;
    let target = g.constant(target_value);
    let diff = g.sub(x0_pred, target)?;
    let ss = g.sum_sq(diff)?;
    Ok(g.scale(ss, 0.5))
}

/// EMA-tracked gradient-norm statistics backing the adaptive clip.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipState {
    pub mean: f64,
    pub var: f64,
    pub decay: f64,
    initialized: bool,
}

impl ClipState {
    pub fn new(decay: f64) -> Self {
        Self {
            mean: 0.0,
            var: 0.0,
            decay,
            initialized: false,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.mean + 3.0 * self.var.max(0.0).sqrt()
    }
}

impl Default for ClipState {
    fn default() -> Self {
        Self::new(0.99)
    }
}

/// Adaptive gradient clip: scale = min(1, T/g) with T = mean + 3 sqrt(var),
/// a no-op while the norm stays under the tracked threshold. The first
/// observation initializes the tracker without clipping; the state updates
/// after the clip decision.
pub fn adaptive_clip(g_norm: f64, state: &mut ClipState) -> Result<f64, DistillError> {
    if g_norm < 0.0 || !g_norm.is_finite() {
        return Err(DistillError::Invalid(format!(
            "gradient norm must be finite and non-negative, got {g_norm}"
        )));
    }
    let scale = if !state.initialized {
        state.mean = g_norm;
        state.var = 0.0;
        state.initialized = true;
        return Ok(1.0);
    } else {
        let t = state.threshold();
        if g_norm <= t || g_norm == 0.0 {
            1.0
        } else {
            t / g_norm
        }
    };
    // Exponentially weighted mean/variance update (West's recurrence).
    let alpha = 1.0 - state.decay;
    let diff = g_norm - state.mean;
    let incr = alpha * diff;
    state.mean += incr;
    state.var = (1.0 - alpha) * (state.var + diff * incr);
    Ok(scale)
}

/// Shadow copy of a model's parameters, exponentially averaged.
#[derive(Clone, Debug)]
pub struct EmaWeights {
    pub decay: f64,
    shadow: Vec<(String, Tensor)>,
}

impl EmaWeights {
    pub fn from_model(model: &dyn ParamMap, decay: f64) -> Self {
        let mut shadow = Vec::new();
        model.visit(&mut |name, t| shadow.push((name.to_string(), t.clone())));
        Self { decay, shadow }
    }

    /// shadow <- decay * shadow + (1 - decay) * parameter, elementwise.
    pub fn update(&mut self, model: &dyn ParamMap) {
        let decay = self.decay;
        let mut i = 0;
        let shadow = &mut self.shadow;
        model.visit(&mut |name, t| {
            debug_assert_eq!(shadow[i].0, name, "parameter order changed");
            let dst = shadow[i].1.data_mut();
            for (s, &p) in dst.iter_mut().zip(t.data()) {
                *s = decay * *s + (1.0 - decay) * p;
            }
            i += 1;
        });
    }

    /// Write the averaged weights into a model of identical structure.
    pub fn apply_to(&self, model: &mut dyn ParamMap) {
        let mut i = 0;
        let shadow = &self.shadow;
        model.visit_mut(&mut |name, t| {
            debug_assert_eq!(shadow[i].0, name, "parameter order changed");
            *t = shadow[i].1.clone();
            i += 1;
        });
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.shadow
    }
}

/// Asynchronous critic update schedule: every two student steps, doubling
/// the interval (bounded at 16) while the divergence flag holds and
/// resetting once it clears.
#[derive(Clone, Debug)]
pub struct CriticSchedule {
    base_interval: u64,
    max_interval: u64,
    interval: u64,
    next_update: u64,
}

impl Default for CriticSchedule {
    fn default() -> Self {
        Self {
            base_interval: 2,
            max_interval: 16,
            interval: 2,
            next_update: 0,
        }
    }
}

impl CriticSchedule {
    /// Whether the critic updates at this student step. The divergence flag
    /// is consulted at update steps to grow or reset the interval.
    pub fn should_update(&mut self, step: u64, diverged: bool) -> bool {
        if step != self.next_update {
            return false;
        }
        if diverged {
            self.interval = (self.interval * 2).min(self.max_interval);
        } else {
            self.interval = self.base_interval;
        }
        self.next_update = step + self.interval;
        true
    }

    pub fn interval(&self) -> u64 {
        self.interval
    }
}

/// Per-expert anchors plus the deduplicated 8-step deployment chain.
#[derive(Clone, Debug, Serialize)]
pub struct StepSchedule {
    pub boundary: f64,
    /// Four anchors uniform over [boundary, 1].
    pub high_anchors: Vec<f64>,
    /// Four anchors uniform over [0, boundary].
    pub low_anchors: Vec<f64>,
    /// Eight strictly decreasing deployment anchors: the high expert's four,
    /// then the low window re-gridded below the shared boundary so the
    /// handoff anchor runs exactly once (on the high-noise side).
    pub chain: Vec<f64>,
}

fn linspace(from: f64, to: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| from + (to - from) * i as f64 / (n - 1) as f64)
        .collect()
}

pub fn make_schedule(boundary: f64) -> Result<StepSchedule, DistillError> {
    if !(0.0 < boundary && boundary < 1.0) {
        return Err(DistillError::Invalid(format!(
            "boundary must lie in (0, 1), got {boundary}"
        )));
    }
    let high_anchors = linspace(1.0, boundary, 4);
    let low_anchors = linspace(boundary, 0.0, 4);
    let mut chain = high_anchors.clone();
    chain.extend(linspace(boundary, 0.0, 5).into_iter().skip(1));
    Ok(StepSchedule {
        boundary,
        high_anchors,
        low_anchors,
        chain,
    })
}

/// Teacher prediction under dual CFG at the fixed distillation scale pair.
/// The student runs single-pass (CFG = 1); this target is what collapses the
/// guidance behaviour into its weights.
pub fn teacher_target(
    teacher: &dyn Denoiser,
    x_t: &Tensor,
    inputs: &SampleInputs,
    noise_level: f64,
    scales: GuidanceScales,
) -> Result<Tensor, DistillError> {
    Ok(cfg_prediction(teacher, x_t, inputs, noise_level, Some(scales))?)
}

// ---------------------------------------------------------------------------
// Toy distillation loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistillConfig {
    pub seed: u64,
    pub steps_per_expert: u64,
    pub boundary: f64,
    pub shift: f64,
    /// Apply the flow shift to the re-noising level sampled for the DMD
    /// signal (on by default; raw uniform otherwise).
    pub shift_renoise: bool,
    pub lr: f64,
    pub ema_decay: f64,
    pub eps_num: f64,
    pub scales: GuidanceScales,
    /// Latent token grid (t', h, w); channels equal the model width.
    pub latent: (usize, usize, usize),
    pub d: usize,
    pub d_text: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            steps_per_expert: 40,
            boundary: EXPERT_BOUNDARY,
            shift: DEFAULT_SHIFT,
            shift_renoise: true,
            lr: 2e-3,
            ema_decay: DEFAULT_EMA_DECAY,
            eps_num: DEFAULT_EPS_NUM,
            scales: GuidanceScales::default(),
            latent: (1, 2, 2),
            d: 16,
            d_text: 32,
        }
    }
}

#[derive(Serialize)]
pub struct DistillReport {
    pub schedule: StepSchedule,
    /// (student step, expert, generator loss, clip scale) per step.
    pub generator_curve: Vec<(u64, String, f64, f64)>,
    /// (student step, critic loss) at critic-update steps.
    pub critic_curve: Vec<(u64, f64)>,
    /// Expert routing of the deployed 8-step chain.
    pub deployment_trace: SampleTrace,
    #[serde(skip)]
    pub student: Option<ToyDenoiser>,
    #[serde(skip)]
    pub ema: Option<EmaWeights>,
}

/// Run the per-expert toy DMD loops: the frozen teacher provides dual-CFG
/// targets, the critic tracks student outputs on an asynchronous schedule
/// with divergence back-off, gradients pass the adaptive clip, and an EMA
/// copy of the student accumulates throughout.
pub fn run_toy_distillation(config: &DistillConfig) -> Result<DistillReport, DistillError> {
    let schedule = make_schedule(config.boundary)?;
    let vocab = Vocabulary::shipped_default();
    let dict = SynonymDictionary::shipped_default();
    let mut seed_rng = SeededRng::new(config.seed);

    // Teacher with non-degenerate weights; student and critic start from it.
    let mut teacher = ToyDenoiser::new(vocab, config.d, config.d_text, &mut seed_rng);
    let mut wrng = seed_rng.fork(1);
    teacher.visit_mut(&mut |_, t| {
        *t = Tensor::randn(t.shape().to_vec(), 0.2, &mut wrng);
    });
    let mut student = teacher.clone();
    let mut critic = teacher.clone();

    let (tf, h, w) = config.latent;
    let token_shape = vec![tf * h * w, config.d];
    let dataset = demo_specs(dict);

    let mut data_rng = seed_rng.fork(2);
    let mut student_opt = Adam::new(config.lr);
    let mut critic_opt = Adam::new(config.lr);
    let mut clip_state = ClipState::default();
    let mut critic_schedule = CriticSchedule::default();
    let mut critic_loss_ema: Option<f64> = None;
    let mut diverged = false;
    let mut ema = EmaWeights::from_model(&student, config.ema_decay);

    let mut generator_curve = Vec::new();
    let mut critic_curve = Vec::new();

    let expert_windows = [
        ("high_noise", config.boundary, 1.0),
        ("low_noise", 0.0, config.boundary),
    ];
    let mut global_step: u64 = 0;
    for (expert_name, lo, hi) in expert_windows {
        for _ in 0..config.steps_per_expert {
            let (spec, text) = &dataset[data_rng.usize_below(dataset.len())];
            let x0 = spec_target_pattern(spec, &token_shape);
            let noise = Tensor::randn(token_shape.clone(), 1.0, &mut data_rng);
            // Uniform across the window in shifted coordinates: draw in the
            // pre-image and push through the shift.
            let u = flow_shift(lo, 1.0 / config.shift)
                + data_rng.uniform()
                    * (flow_shift(hi, 1.0 / config.shift) - flow_shift(lo, 1.0 / config.shift));
            let lambda = flow_shift(u, config.shift).clamp(lo, hi);
            let x_t = interpolate(&x0, &noise, lambda)?;

            let inputs = SampleInputs {
                text: Some(text),
                spec: Some(spec),
            };

            // Student single-pass prediction on a graph for its gradients.
            let mut g = Graph::new();
            let nodes = student.leaves(&mut g);
            let pred_node =
                student.forward_graph(&mut g, &nodes, &x_t, Some(text), Some(spec), lambda)?;
            let x0_student = g.value(pred_node).clone();

            // Re-noise the student sample for the distribution-matching signal.
            let raw = data_rng.uniform();
            let lambda_r = if config.shift_renoise {
                flow_shift(raw, config.shift)
            } else {
                raw
            };
            let renoise = Tensor::randn(token_shape.clone(), 1.0, &mut data_rng);
            let x_r = interpolate(&x0_student, &renoise, lambda_r)?;

            let x0_teacher = teacher_target(&teacher, &x_r, &inputs, lambda_r, config.scales)?;
            let x0_fake = critic.predict_x0(&x_r, Some(text), Some(spec), lambda_r)?;
            let grad = dmd_gradient(&x0_student, &x0_teacher, &x0_fake, config.eps_num)?;

            let loss_node = generator_loss_graph(&mut g, pred_node, &grad)?;
            let loss_value = g.value(loss_node).data()[0];
            g.backward(loss_node);
            let grads: Vec<Tensor> = nodes.flat().iter().map(|&id| g.grad(id)).collect();
            let norm: f64 = grads.iter().map(|t| t.sum_sq()).sum::<f64>().sqrt();
            let scale = adaptive_clip(norm, &mut clip_state)?;

            let mut params: Vec<Tensor> = Vec::new();
            student.visit(&mut |_, t| params.push(t.clone()));
            {
                let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
                student_opt.step_scaled(&mut refs, &grads, scale);
            }
            student.set_params_flat(&params);
            ema.update(&student);

            generator_curve.push((global_step, expert_name.to_string(), loss_value, scale));

            if critic_schedule.should_update(global_step, diverged) {
                // Same denoising regression, against the student's outputs.
                let mut cg = Graph::new();
                let cnodes = critic.leaves(&mut cg);
                let cpred =
                    critic.forward_graph(&mut cg, &cnodes, &x_r, Some(text), Some(spec), lambda_r)?;
                let target = cg.constant(x0_student.clone());
                let closs = cg.mse(cpred, target)?;
                let closs_value = cg.value(closs).data()[0];
                cg.backward(closs);
                let cgrads: Vec<Tensor> = cnodes.flat().iter().map(|&id| cg.grad(id)).collect();
                let mut cparams: Vec<Tensor> = Vec::new();
                critic.visit(&mut |_, t| cparams.push(t.clone()));
                {
                    let mut refs: Vec<&mut Tensor> = cparams.iter_mut().collect();
                    critic_opt.step(&mut refs, &cgrads);
                }
                critic.set_params_flat(&cparams);

                diverged = match critic_loss_ema {
                    Some(ema_loss) => closs_value > 4.0 * ema_loss,
                    None => false,
                };
                critic_loss_ema = Some(match critic_loss_ema {
                    Some(e) => 0.9 * e + 0.1 * closs_value,
                    None => closs_value,
                });
                critic_curve.push((global_step, closs_value));
            }
            global_step += 1;
        }
    }

    // Deployed 8-step chain with the EMA student.
    let mut deployed = student.clone();
    ema.apply_to(&mut deployed);
    let (spec, text) = &dataset[0];
    let mut sample_rng = seed_rng.fork(3);
    let (_, deployment_trace) = euler_flow_sample(
        &deployed,
        SampleInputs {
            text: Some(text),
            spec: Some(spec),
        },
        &schedule.chain,
        None,
        &token_shape,
        config.boundary,
        &mut sample_rng,
    )?;

    Ok(DistillReport {
        schedule,
        generator_curve,
        critic_curve,
        deployment_trace,
        student: Some(deployed),
        ema: Some(ema),
    })
}
