//! Two-stage training: masked pre-training stages followed by an unmasked
//! fine-tuning stage, with Adam, EMA, warmup, gradient clipping and
//! bit-exact checkpoint/resume.

pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compute::{ParamSet, Tensor};
use crate::data::{hflip, Dataset};
use crate::error::{err_fmt, Result};
use crate::masking::MaskSpec;
use crate::model::{self, ModelPreset, Positional, UViTConfig};
use crate::objective::{loss_and_grads, LossBatch};
use crate::schedule::{NoiseSchedule, ScheduleKind, SigmaKind};
pub use checkpoint::Checkpoint;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One stage of the training schedule. `mask_spec = None` is the fine-tuning
/// (plain DSM) stage.
#[derive(Debug, Clone)]
pub struct TrainStage {
    pub name: String,
    pub mask_spec: Option<MaskSpec>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub grad_clip: Option<f64>,
    pub schedule_kind: ScheduleKind,
    pub ema_decay: f64,
    pub hflip_prob: f64,
}

impl TrainStage {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(err_fmt!(Config, "stage '{}' needs steps >= 1", self.name));
        }
        if self.batch_size < 1 {
            return Err(err_fmt!(Config, "stage '{}' needs batch_size >= 1", self.name));
        }
        if self.lr <= 0.0 {
            return Err(err_fmt!(Config, "stage '{}' needs lr > 0", self.name));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(err_fmt!(Config, "stage '{}' needs ema_decay in [0,1)", self.name));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(err_fmt!(Config, "stage '{}' needs hflip_prob in [0,1]", self.name));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return Err(err_fmt!(Config, "stage '{}' needs grad_clip > 0", self.name));
            }
        }
        Ok(())
    }
}

/// The full schedule plus everything needed to rebuild the model.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub preset: ModelPreset,
    pub patch_override: Option<usize>,
    pub positional: Positional,
    pub timesteps: usize,
    pub sigma_kind: SigmaKind,
    pub seed: u64,
    /// Keep Adam moments across stage boundaries (default false: each stage
    /// brings its own lr and warmup, so moments restart).
    pub carry_optimizer: bool,
    pub stages: Vec<TrainStage>,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(err_fmt!(Config, "plan needs at least one stage"));
        }
        for s in &self.stages {
            s.validate()?;
        }
        let mask_free: Vec<usize> = self
            .stages
            .iter()
            .enumerate()
            .filter(|(_, s)| s.mask_spec.is_none())
            .map(|(i, _)| i)
            .collect();
        if mask_free.len() > 1 {
            return Err(err_fmt!(Config, "at most one mask-free (fine-tune) stage allowed"));
        }
        if let Some(&i) = mask_free.first() {
            if i != self.stages.len() - 1 {
                return Err(err_fmt!(Config, "the mask-free stage must come last"));
            }
        }
        if self.timesteps < 1 {
            return Err(err_fmt!(Config, "timesteps must be >= 1"));
        }
        Ok(())
    }

    /// Bind the architecture preset to a dataset's item geometry.
    pub fn resolve_model(&self, dataset: &Dataset) -> Result<UViTConfig> {
        let dims = dataset.item_shape().to_vec();
        let [c, h, w] = dims.as_slice() else {
            return Err(err_fmt!(Config, "dataset items must be C x H x W, got {dims:?}"));
        };
        let mut cfg = UViTConfig::preset(self.preset)
            .for_image(*c, *h, *w)
            .with_positional(self.positional);
        if let Some(p) = self.patch_override {
            cfg = cfg.with_patch(p);
        }
        cfg.validate()?;
        for st in &self.stages {
            if let Some(spec) = st.mask_spec {
                spec.validate(cfg.grid())?;
            }
        }
        Ok(cfg)
    }

    pub fn schedule_for(&self, stage: &TrainStage) -> Result<NoiseSchedule> {
        NoiseSchedule::new(stage.schedule_kind, self.timesteps, self.sigma_kind)
    }
}

/// Adam with bias-corrected moments (weight decay 0).
pub struct AdamState {
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> =
            params.entries().iter().map(|e| Tensor::zeros(e.tensor.shape().to_vec())).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update in place; frozen parameters are skipped.
pub fn optimizer_step(
    params: &mut ParamSet<f32>,
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(err_fmt!(Contract, "grads/params length mismatch"));
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
    for i in 0..params.len() {
        if !params.entries()[i].trainable {
            continue;
        }
        if grads[i].shape() != params.get(i).shape() {
            return Err(err_fmt!(Contract, "grad {i} shape mismatch"));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grads[i].data();
        let p = params.get_mut(i).data_mut();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] as f64 / bc1;
            let vhat = v[j] as f64 / bc2;
            p[j] -= (lr * mhat / (vhat.sqrt() + ADAM_EPS)) as f32;
        }
    }
    Ok(())
}

/// ema ← decay·ema + (1−decay)·params, element-wise.
pub fn ema_update(ema: &mut ParamSet<f32>, params: &ParamSet<f32>, decay: f64) -> Result<()> {
    if ema.len() != params.len() {
        return Err(err_fmt!(Contract, "ema/params length mismatch"));
    }
    let d = decay as f32;
    for i in 0..params.len() {
        let e = ema.get_mut(i).data_mut();
        let p = params.get(i).data();
        for j in 0..e.len() {
            e[j] = d * e[j] + (1.0 - d) * p[j];
        }
    }
    Ok(())
}

/// Global L2 norm over a gradient list.
pub fn global_grad_norm(grads: &[Tensor<f32>]) -> f64 {
    grads
        .iter()
        .map(|g| g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients by max_norm/norm when the global norm exceeds
/// max_norm. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Tensor<f32>], max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(err_fmt!(Contract, "max_norm must be > 0"));
    }
    let norm = global_grad_norm(grads);
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}

/// lr = base·min(1, step/warmup_steps); warmup_steps = 0 means constant.
pub fn warmup_lr(step: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 {
        base_lr
    } else {
        base_lr * (step as f64 / warmup_steps as f64).min(1.0)
    }
}

/// Everything that evolves during training; checkpoints capture it exactly.
pub struct TrainState {
    pub params: ParamSet<f32>,
    pub ema: ParamSet<f32>,
    pub opt: AdamState,
    pub rng: ChaCha8Rng,
    pub stage_idx: usize,
    pub step_in_stage: usize,
}

impl TrainState {
    pub fn init(plan: &TrainPlan, cfg: &UViTConfig) -> Result<TrainState> {
        plan.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        let params = model::init_params::<f32, _>(cfg, &mut rng)?;
        let ema = params.clone();
        let opt = AdamState::new(&params);
        Ok(TrainState { params, ema, opt, rng, stage_idx: 0, step_in_stage: 0 })
    }

    pub fn finished(&self, plan: &TrainPlan) -> bool {
        self.stage_idx >= plan.stages.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub stage_idx: usize,
    pub step: usize,
    pub loss: f32,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Run (or resume) one stage. The observer fires after every completed step
/// with the post-step state; a non-finite loss aborts with NumericsError and
/// the step index in the message.
pub fn run_stage<F>(
    cfg: &UViTConfig,
    stage: &TrainStage,
    stage_idx: usize,
    sched: &NoiseSchedule,
    dataset: &Dataset,
    state: &mut TrainState,
    on_step: &mut F,
) -> Result<()>
where
    F: FnMut(&TrainState, StepMetrics) -> Result<()>,
{
    stage.validate()?;
    if dataset.is_empty() {
        return Err(err_fmt!(Contract, "dataset is empty"));
    }
    let t_max = sched.steps();
    let shape = dataset.item_shape().to_vec();
    let grid = cfg.grid();

    for step in state.step_in_stage + 1..=stage.steps {
        let lr = warmup_lr(step, stage.lr, stage.warmup_steps);

        let mut images: Vec<Tensor<f32>> = (0..stage.batch_size)
            .map(|_| dataset.get(state.rng.gen_range(0..dataset.len())).clone())
            .collect();
        hflip(&mut images, stage.hflip_prob, &mut state.rng)?;
        let ts: Vec<usize> =
            (0..stage.batch_size).map(|_| state.rng.gen_range(1..=t_max)).collect();
        let eps: Vec<Tensor<f32>> =
            (0..stage.batch_size).map(|_| Tensor::randn(shape.clone(), &mut state.rng)).collect();
        let masks = match &stage.mask_spec {
            Some(spec) => Some(
                (0..stage.batch_size)
                    .map(|_| spec.sample(grid, &mut state.rng))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let batch = LossBatch::new(images, ts, eps, masks)?;

        let (loss, grads) = loss_and_grads(&state.params, cfg, &batch, sched, true)?;
        let mut grads = grads.expect("want_grad");
        if !loss.is_finite() {
            return Err(err_fmt!(
                Numerics,
                "stage '{}' aborted at step {step}: non-finite loss",
                stage.name
            ));
        }
        let grad_norm = match stage.grad_clip {
            Some(c) => clip_gradients(&mut grads, c)?,
            None => global_grad_norm(&grads),
        };
        if !grad_norm.is_finite() {
            return Err(err_fmt!(
                Numerics,
                "stage '{}' aborted at step {step}: non-finite gradients",
                stage.name
            ));
        }
        optimizer_step(&mut state.params, &grads, &mut state.opt, lr)?;
        ema_update(&mut state.ema, &state.params, stage.ema_decay)?;
        state.step_in_stage = step;
        on_step(&*state, StepMetrics { stage_idx, step, loss, lr, grad_norm })?;
    }
    Ok(())
}

/// Run the remaining stages of a plan (all of them for a fresh state).
/// `on_stage_end` fires after each completed stage, before the optimizer
/// reset for the next one.
pub fn run_plan<F, G>(
    plan: &TrainPlan,
    cfg: &UViTConfig,
    dataset: &Dataset,
    state: &mut TrainState,
    on_step: &mut F,
    on_stage_end: &mut G,
) -> Result<()>
where
    F: FnMut(&TrainState, StepMetrics) -> Result<()>,
    G: FnMut(&TrainState) -> Result<()>,
{
    plan.validate()?;
    while state.stage_idx < plan.stages.len() {
        let idx = state.stage_idx;
        let stage = &plan.stages[idx];
        let sched = plan.schedule_for(stage)?;
        run_stage(cfg, stage, idx, &sched, dataset, state, on_step)?;
        on_stage_end(&*state)?;
        state.stage_idx += 1;
        state.step_in_stage = 0;
        if !plan.carry_optimizer {
            state.opt = AdamState::new(&state.params);
        }
    }
    Ok(())
}

// ── Checkpoint glue ──────────────────────────────────────────────────

fn rng_to_header(rng: &ChaCha8Rng) -> Vec<(String, String)> {
    let seed = rng.get_seed();
    let hex: String = seed.iter().map(|b| format!("{b:02x}")).collect();
    vec![
        ("rng_seed".into(), hex),
        ("rng_stream".into(), rng.get_stream().to_string()),
        ("rng_word_pos".into(), rng.get_word_pos().to_string()),
    ]
}

fn rng_from_header(ckpt: &Checkpoint) -> Result<ChaCha8Rng> {
    let hex = ckpt.header_value("rng_seed")?;
    if hex.len() != 64 {
        return Err(err_fmt!(Format, "rng_seed must be 32 hex bytes"));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
            .map_err(|_| err_fmt!(Format, "bad rng_seed hex"))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(ckpt.header_parse("rng_stream")?);
    rng.set_word_pos(ckpt.header_parse("rng_word_pos")?);
    Ok(rng)
}

/// Serialize the full training state; the header also echoes the plan's
/// model-defining fields so `state_from_checkpoint` can validate shapes.
pub fn checkpoint_from_state(
    state: &TrainState,
    plan: &TrainPlan,
    cfg: &UViTConfig,
) -> Checkpoint {
    let mut header = vec![
        ("preset".into(), plan.preset.to_string()),
        ("patch".into(), cfg.patch.to_string()),
        ("positional".into(), match cfg.positional {
            Positional::Learned => "learned".to_string(),
            Positional::SinusoidalFrozen => "sinusoidal-frozen".to_string(),
        }),
        ("channels".into(), cfg.channels.to_string()),
        ("image_h".into(), cfg.image_h.to_string()),
        ("image_w".into(), cfg.image_w.to_string()),
        ("timesteps".into(), plan.timesteps.to_string()),
        ("sigma_kind".into(), match plan.sigma_kind {
            SigmaKind::Beta => "beta".to_string(),
            SigmaKind::TildeBeta => "tilde_beta".to_string(),
        }),
        // the schedule samplers should use: the current (or last) stage's
        ("schedule".into(), {
            let idx = state.stage_idx.min(plan.stages.len() - 1);
            match plan.stages[idx].schedule_kind {
                ScheduleKind::Linear => "linear".to_string(),
                ScheduleKind::Cosine => "cosine".to_string(),
            }
        }),
        ("seed".into(), plan.seed.to_string()),
        ("n_stages".into(), plan.stages.len().to_string()),
        ("stage_index".into(), state.stage_idx.to_string()),
        ("step_in_stage".into(), state.step_in_stage.to_string()),
        ("adam_t".into(), state.opt.t.to_string()),
    ];
    header.extend(rng_to_header(&state.rng));

    let mut tensors = Vec::new();
    for e in state.params.entries() {
        tensors.push((format!("theta.{}", e.name), e.tensor.clone()));
    }
    for e in state.ema.entries() {
        tensors.push((format!("ema.{}", e.name), e.tensor.clone()));
    }
    for (i, e) in state.params.entries().iter().enumerate() {
        tensors.push((format!("opt_m.{}", e.name), state.opt.m[i].clone()));
        tensors.push((format!("opt_v.{}", e.name), state.opt.v[i].clone()));
    }
    Checkpoint { header, tensors }
}

/// Rebuild a [`TrainState`] from a checkpoint, validating every tensor shape
/// against the model the plan defines.
pub fn state_from_checkpoint(
    ckpt: &Checkpoint,
    plan: &TrainPlan,
    cfg: &UViTConfig,
) -> Result<TrainState> {
    for (key, want) in [
        ("preset", plan.preset.to_string()),
        ("patch", cfg.patch.to_string()),
        ("channels", cfg.channels.to_string()),
        ("image_h", cfg.image_h.to_string()),
        ("image_w", cfg.image_w.to_string()),
        ("timesteps", plan.timesteps.to_string()),
    ] {
        let got = ckpt.header_value(key)?;
        if got != want {
            return Err(err_fmt!(Format, "checkpoint {key} = {got}, plan wants {want}"));
        }
    }
    // template gives canonical names, shapes and trainable flags
    let mut template_rng = ChaCha8Rng::seed_from_u64(0);
    let template = model::init_params::<f32, _>(cfg, &mut template_rng)?;

    let fill = |prefix: &str| -> Result<ParamSet<f32>> {
        let mut out = ParamSet::new();
        for e in template.entries() {
            let t = ckpt.tensor(&format!("{prefix}.{}", e.name))?;
            if t.shape() != e.tensor.shape() {
                return Err(err_fmt!(
                    Format,
                    "tensor {prefix}.{} has shape {:?}, config wants {:?}",
                    e.name,
                    t.shape(),
                    e.tensor.shape()
                ));
            }
            out.insert_with(&e.name, t.clone(), e.trainable);
        }
        Ok(out)
    };
    let params = fill("theta")?;
    let ema = fill("ema")?;
    let mut opt = AdamState::new(&params);
    for (i, e) in template.entries().iter().enumerate() {
        let m = ckpt.tensor(&format!("opt_m.{}", e.name))?;
        let v = ckpt.tensor(&format!("opt_v.{}", e.name))?;
        if m.shape() != e.tensor.shape() || v.shape() != e.tensor.shape() {
            return Err(err_fmt!(Format, "optimizer moment shape mismatch for {}", e.name));
        }
        opt.m[i] = m.clone();
        opt.v[i] = v.clone();
    }
    opt.t = ckpt.header_parse("adam_t")?;

    Ok(TrainState {
        params,
        ema,
        opt,
        rng: rng_from_header(ckpt)?,
        stage_idx: ckpt.header_parse("stage_index")?,
        step_in_stage: ckpt.header_parse("step_in_stage")?,
    })
}

/// Everything sampling needs, reconstructed from a checkpoint alone:
/// model config, θ, EMA weights and the noise schedule the weights were
/// (last) trained against.
pub struct LoadedModel {
    pub cfg: UViTConfig,
    pub params: ParamSet<f32>,
    pub ema: ParamSet<f32>,
    pub sched: NoiseSchedule,
}

pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<LoadedModel> {
    let preset: ModelPreset = ckpt.header_parse("preset")?;
    let positional: Positional = ckpt.header_parse("positional")?;
    let cfg = UViTConfig::preset(preset)
        .for_image(
            ckpt.header_parse("channels")?,
            ckpt.header_parse("image_h")?,
            ckpt.header_parse("image_w")?,
        )
        .with_patch(ckpt.header_parse("patch")?)
        .with_positional(positional);
    cfg.validate()?;
    let kind: ScheduleKind = ckpt.header_parse("schedule")?;
    let sigma: SigmaKind = ckpt.header_parse("sigma_kind")?;
    let sched = NoiseSchedule::new(kind, ckpt.header_parse("timesteps")?, sigma)?;

    let mut template_rng = ChaCha8Rng::seed_from_u64(0);
    let template = model::init_params::<f32, _>(&cfg, &mut template_rng)?;
    let fill = |prefix: &str| -> Result<ParamSet<f32>> {
        let mut out = ParamSet::new();
        for e in template.entries() {
            let t = ckpt.tensor(&format!("{prefix}.{}", e.name))?;
            if t.shape() != e.tensor.shape() {
                return Err(err_fmt!(
                    Format,
                    "tensor {prefix}.{} has shape {:?}, config wants {:?}",
                    e.name,
                    t.shape(),
                    e.tensor.shape()
                ));
            }
            out.insert_with(&e.name, t.clone(), e.trainable);
        }
        Ok(out)
    };
    Ok(LoadedModel { cfg, params: fill("theta")?, ema: fill("ema")?, sched })
}
