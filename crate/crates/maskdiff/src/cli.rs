//! Command-line entry points. Exit codes: 0 success, 1 runtime error,
//! 2 usage error.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetKind, RunConfig};
use crate::data::{self, Dataset};
use crate::error::{err_fmt, Error, Result};
use crate::eval;
use crate::masking::MaskSpec;
use crate::sampler::{self, SampleRequest, SamplerKind};
use crate::trainer::{
    self, checkpoint_from_state, state_from_checkpoint, Checkpoint, StepMetrics, TrainState,
};

const USAGE: &str = "usage: maskdiff <command> [options]

commands:
  pretrain   --config <file> [--resume <ckpt>]
             run the masked pre-training stages of the plan
  finetune   --config <file> --init <ckpt>
             run the final denoising stage from pre-trained weights
  sample     --ckpt <file> --sampler <ddpm|ddim|em_sde> [--steps N] --n N
             [--seed S] [--mask SPEC] [--out DIR] [--no-ema] [--threads K]
  eval-fd    --set-a <path> --set-b <path> [--extractor pixel:D|external-features]
             [--seed S]
  make-toy   --dataset <swissroll|textures> --n N [--noise-std X] [--side N]
             [--classes K] [--seed S] --out <file>
";

enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult = std::result::Result<(), CliError>;

fn usage_err(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Run a full argv (without the program name); returns the process exit code.
pub fn dispatch(argv: &[String]) -> i32 {
    let result = match argv.first().map(|s| s.as_str()) {
        Some("pretrain") => cmd_pretrain(&argv[1..]),
        Some("finetune") => cmd_finetune(&argv[1..]),
        Some("sample") => cmd_sample(&argv[1..]),
        Some("eval-fd") => cmd_eval_fd(&argv[1..]),
        Some("make-toy") => cmd_make_toy(&argv[1..]),
        Some(other) => Err(usage_err(format!("unknown subcommand '{other}'"))),
        None => Err(usage_err("no subcommand given")),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{USAGE}");
            2
        }
    }
}

// ── flag parsing ─────────────────────────────────────────────────────

struct Flags {
    values: Vec<(String, String)>,
    switches: Vec<String>,
}

impl Flags {
    fn parse(args: &[String], switch_names: &[&str]) -> std::result::Result<Flags, CliError> {
        let mut values = Vec::new();
        let mut switches = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let a = &args[i];
            let name = a
                .strip_prefix("--")
                .ok_or_else(|| usage_err(format!("expected a --flag, got '{a}'")))?;
            if switch_names.contains(&name) {
                switches.push(name.to_string());
                i += 1;
            } else {
                let v = args
                    .get(i + 1)
                    .ok_or_else(|| usage_err(format!("--{name} needs a value")))?;
                values.push((name.to_string(), v.clone()));
                i += 2;
            }
        }
        Ok(Flags { values, switches })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.values.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    fn require(&self, name: &str) -> std::result::Result<&str, CliError> {
        self.get(name).ok_or_else(|| usage_err(format!("missing required --{name}")))
    }

    fn parse_num<T: std::str::FromStr>(
        &self,
        name: &str,
        default: T,
    ) -> std::result::Result<T, CliError> {
        match self.get(name) {
            None => Ok(default),
            Some(v) => {
                v.parse().map_err(|_| usage_err(format!("bad value '{v}' for --{name}")))
            }
        }
    }

    fn has_switch(&self, name: &str) -> bool {
        self.switches.iter().any(|s| s == name)
    }
}

// ── shared helpers ───────────────────────────────────────────────────

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.dataset_kind {
        DatasetKind::RawTensor => Dataset::from_raw_tensor_file(&cfg.dataset),
        DatasetKind::ImageDir => Dataset::from_image_dir(&cfg.dataset),
    }
}

struct RunDirs {
    metrics: PathBuf,
    out: PathBuf,
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<RunDirs> {
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.echo.cfg"), cfg.echo())?;
    Ok(RunDirs { metrics: cfg.out_dir.join("metrics.csv"), out: cfg.out_dir.clone() })
}

fn append_metrics(path: &Path, rows: &[(usize, StepMetrics)]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "step,loss,lr,grad_norm")?;
    }
    for (global_step, m) in rows {
        writeln!(f, "{},{},{},{}", global_step, m.loss, m.lr, m.grad_norm)?;
    }
    Ok(())
}

/// Run stages [state.stage_idx, end) with metrics and checkpoint handling.
fn run_stages(
    cfg: &RunConfig,
    dataset: &Dataset,
    state: &mut TrainState,
    end: usize,
    dirs: &RunDirs,
) -> Result<()> {
    let model_cfg = cfg.plan.resolve_model(dataset)?;
    let prior_steps: usize =
        cfg.plan.stages[..state.stage_idx].iter().map(|s| s.steps).sum();
    let mut global_base = prior_steps;
    let mut pending: Vec<(usize, StepMetrics)> = Vec::new();

    while state.stage_idx < end {
        let idx = state.stage_idx;
        let stage = &cfg.plan.stages[idx];
        let sched = cfg.plan.schedule_for(stage)?;
        let every = cfg.checkpoint_every;
        let plan = &cfg.plan;
        let mut on_step = |st: &TrainState, m: StepMetrics| -> Result<()> {
            pending.push((global_base + m.step, m));
            if pending.len() >= 200 {
                append_metrics(&dirs.metrics, &pending)?;
                pending.clear();
            }
            if every > 0 && m.step % every == 0 {
                checkpoint_from_state(st, plan, &model_cfg)
                    .save(&dirs.out.join("latest.mdmc"))?;
            }
            Ok(())
        };
        trainer::run_stage(&model_cfg, stage, idx, &sched, dataset, state, &mut on_step)?;
        append_metrics(&dirs.metrics, &pending)?;
        pending.clear();

        global_base += stage.steps;
        state.stage_idx += 1;
        state.step_in_stage = 0;
        if !cfg.plan.carry_optimizer {
            state.opt = trainer::AdamState::new(&state.params);
        }
        // stage-end checkpoint carries the advanced cursor
        checkpoint_from_state(state, &cfg.plan, &model_cfg)
            .save(&dirs.out.join(format!("stage{}.mdmc", idx + 1)))?;
        println!("stage {} ({}) done: {} steps", idx + 1, stage.name, stage.steps);
    }
    Ok(())
}

fn first_finetune_stage(cfg: &RunConfig) -> usize {
    cfg.plan
        .stages
        .iter()
        .position(|s| s.mask_spec.is_none())
        .unwrap_or(cfg.plan.stages.len())
}

// ── subcommands ──────────────────────────────────────────────────────

fn cmd_pretrain(args: &[String]) -> CliResult {
    let flags = Flags::parse(args, &[])?;
    let cfg = RunConfig::parse_file(Path::new(flags.require("config")?))?;
    let dataset = load_dataset(&cfg)?;
    let model_cfg = cfg.plan.resolve_model(&dataset)?;
    let ft = first_finetune_stage(&cfg);
    if ft == 0 {
        return Err(err_fmt!(Config, "plan has no masked stage; nothing to pre-train").into());
    }
    let dirs = prepare_out_dir(&cfg)?;
    let mut state = match flags.get("resume") {
        Some(p) => {
            let ckpt = Checkpoint::load(Path::new(p))?;
            state_from_checkpoint(&ckpt, &cfg.plan, &model_cfg)?
        }
        None => TrainState::init(&cfg.plan, &model_cfg)?,
    };
    if state.stage_idx >= ft {
        return Err(err_fmt!(Contract, "checkpoint is already past the masked stages").into());
    }
    run_stages(&cfg, &dataset, &mut state, ft, &dirs)?;
    Ok(())
}

fn cmd_finetune(args: &[String]) -> CliResult {
    let flags = Flags::parse(args, &[])?;
    let cfg = RunConfig::parse_file(Path::new(flags.require("config")?))?;
    let dataset = load_dataset(&cfg)?;
    let model_cfg = cfg.plan.resolve_model(&dataset)?;
    let ft = first_finetune_stage(&cfg);
    if ft >= cfg.plan.stages.len() {
        return Err(err_fmt!(Config, "plan has no mask-free stage to fine-tune").into());
    }
    let dirs = prepare_out_dir(&cfg)?;
    let ckpt = Checkpoint::load(Path::new(flags.require("init")?))?;

    // exact continuation when the checkpoint cursor lines up with this plan;
    // otherwise load weights only (cross-dataset / cross-plan fine-tuning)
    let mut state = match state_from_checkpoint(&ckpt, &cfg.plan, &model_cfg) {
        Ok(st) if st.stage_idx >= ft && !st.finished(&cfg.plan) => st,
        _ => {
            let loaded = trainer::model_from_checkpoint(&ckpt)?;
            if loaded.cfg != model_cfg {
                return Err(err_fmt!(
                    Format,
                    "checkpoint model does not match this config/dataset"
                )
                .into());
            }
            let mut st = TrainState::init(&cfg.plan, &model_cfg)?;
            st.params = loaded.params;
            st.ema = loaded.ema;
            st.opt = trainer::AdamState::new(&st.params);
            // distinct stream so weights-only fine-tuning never replays the
            // pre-training draw sequence
            st.rng = ChaCha8Rng::seed_from_u64(cfg.plan.seed);
            st.rng.set_stream(0x6674);
            st.stage_idx = ft;
            st.step_in_stage = 0;
            st
        }
    };
    run_stages(&cfg, &dataset, &mut state, cfg.plan.stages.len(), &dirs)?;
    Ok(())
}

fn cmd_sample(args: &[String]) -> CliResult {
    let flags = Flags::parse(args, &["no-ema"])?;
    let ckpt = Checkpoint::load(Path::new(flags.require("ckpt")?))?;
    let loaded = trainer::model_from_checkpoint(&ckpt)?;
    let kind = match flags.require("sampler")? {
        "ddpm" => SamplerKind::Ddpm,
        "ddim" => SamplerKind::Ddim { steps: flags.parse_num("steps", 50usize)? },
        "em_sde" => SamplerKind::EmSde { steps: flags.parse_num("steps", 1000usize)? },
        other => return Err(usage_err(format!("unknown sampler '{other}'"))),
    };
    let mask = match flags.get("mask") {
        Some(spec) => {
            let spec: MaskSpec = spec.parse()?;
            spec.validate(loaded.cfg.grid())?;
            let mut mrng = ChaCha8Rng::seed_from_u64(flags.parse_num("seed", 0u64)?);
            mrng.set_stream(0x6d61736b); // mask stream, disjoint from samples
            Some(spec.sample(loaded.cfg.grid(), &mut mrng)?)
        }
        None => None,
    };
    let request = SampleRequest {
        n: flags.parse_num("n", 16usize)?,
        sampler: kind,
        mask,
        seed: flags.parse_num("seed", 0u64)?,
        use_ema: !flags.has_switch("no-ema"),
        threads: flags.parse_num("threads", 1usize)?,
    };
    let weights = if request.use_ema { &loaded.ema } else { &loaded.params };
    let images = sampler::sample_images(weights, &loaded.cfg, &loaded.sched, &request)?;
    let out = PathBuf::from(flags.get("out").unwrap_or("samples"));
    fs::create_dir_all(&out).map_err(Error::from)?;
    for (i, img) in images.iter().enumerate() {
        data::write_ppm(&out.join(format!("sample_{i:05}.ppm")), img)?;
    }
    println!("wrote {} samples to {}", images.len(), out.display());
    Ok(())
}

fn load_feature_set(path: &Path, extractor: &str, seed: u64) -> Result<crate::compute::Tensor<f64>> {
    if extractor == "external-features" {
        let t = data::load_raw_tensor(path)?;
        let dims = t.shape().to_vec();
        if dims.len() != 2 {
            return Err(err_fmt!(Format, "feature file must be a 2-D n x d tensor"));
        }
        return Ok(t.cast());
    }
    let dim: usize = extractor
        .strip_prefix("pixel:")
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| err_fmt!(Config, "extractor must be pixel:<dim> or external-features"))?;
    let images = if path.is_dir() {
        Dataset::from_image_dir(path)?
    } else {
        Dataset::from_raw_tensor_file(path)?
    };
    eval::pixel_features(images.items(), dim, seed)
}

fn cmd_eval_fd(args: &[String]) -> CliResult {
    let flags = Flags::parse(args, &[])?;
    let extractor = flags.get("extractor").unwrap_or("pixel:64");
    let seed = flags.parse_num("seed", 0u64)?;
    let fa = load_feature_set(Path::new(flags.require("set-a")?), extractor, seed)?;
    let fb = load_feature_set(Path::new(flags.require("set-b")?), extractor, seed)?;
    let fd = eval::frechet_distance(&eval::gaussian_stats(&fa)?, &eval::gaussian_stats(&fb)?)?;
    println!("{fd:.6}");
    Ok(())
}

fn cmd_make_toy(args: &[String]) -> CliResult {
    let flags = Flags::parse(args, &[])?;
    let n: usize = flags.parse_num("n", 0usize)?;
    if n == 0 {
        return Err(usage_err("--n must be >= 1"));
    }
    let out = PathBuf::from(flags.require("out")?);
    let seed: u64 = flags.parse_num("seed", 0u64)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = match flags.require("dataset")? {
        "swissroll" => {
            let noise: f64 = flags.parse_num("noise-std", 0.01f64)?;
            data::swiss_roll(n, noise, &mut rng)
        }
        "textures" => {
            let side: usize = flags.parse_num("side", 16usize)?;
            let classes: usize = flags.parse_num("classes", 4usize)?;
            data::textures(n, side, classes, &mut rng)?
        }
        other => return Err(usage_err(format!("unknown toy dataset '{other}'"))),
    };
    data::write_raw_tensor(&out, &data::stack_items(&items)?)?;
    println!("wrote {} items to {}", n, out.display());
    Ok(())
}
