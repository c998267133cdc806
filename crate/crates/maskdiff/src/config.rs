//! Run-configuration files: line-oriented `key = value` with `#` comments,
//! shared keys at the top and stage sections headed `[stage <n>]`. Unknown
//! keys are hard errors so typos cannot silently fall back to defaults.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{err_fmt, Result};
use crate::masking::MaskSpec;
use crate::model::{ModelPreset, Positional};
use crate::schedule::{ScheduleKind, SigmaKind, DEFAULT_TIMESTEPS};
use crate::trainer::{TrainPlan, TrainStage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    RawTensor,
    ImageDir,
}

impl std::str::FromStr for DatasetKind {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw_tensor" => Ok(DatasetKind::RawTensor),
            "image_dir" => Ok(DatasetKind::ImageDir),
            other => Err(err_fmt!(Config, "unknown dataset kind '{other}'")),
        }
    }
}

/// A fully resolved run configuration; parses to a valid [`TrainPlan`].
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub plan: TrainPlan,
    pub dataset: PathBuf,
    pub dataset_kind: DatasetKind,
    pub out_dir: PathBuf,
    /// Save a rolling checkpoint every this many steps (0 = stage ends only).
    pub checkpoint_every: usize,
    pub threads: usize,
}

struct Cursor<'a> {
    lines: Vec<(usize, &'a str)>, // (line number, trimmed content)
    pos: usize,
}

fn fail(line: usize, msg: &str) -> crate::error::Error {
    err_fmt!(Config, "line {line}: {msg}")
}

const STAGE_DEFAULT_LR: f64 = 2e-4;
const STAGE_DEFAULT_BATCH: usize = 128;
const STAGE_DEFAULT_EMA: f64 = 0.999;

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cur = Cursor {
            lines: text
                .lines()
                .enumerate()
                .map(|(i, l)| (i + 1, strip_comment(l)))
                .filter(|(_, l)| !l.is_empty())
                .collect(),
            pos: 0,
        };

        // shared keys until the first [stage n] header
        let mut model = ModelPreset::Tiny;
        let mut patch_override = None;
        let mut positional = Positional::Learned;
        let mut timesteps = DEFAULT_TIMESTEPS;
        let mut sigma_kind = SigmaKind::Beta;
        let mut seed = 0u64;
        let mut carry_optimizer = false;
        let mut dataset: Option<PathBuf> = None;
        let mut dataset_kind: Option<DatasetKind> = None;
        let mut out_dir = PathBuf::from("out");
        let mut checkpoint_every = 0usize;
        let mut threads = 1usize;

        let mut seen = BTreeSet::new();
        while cur.pos < cur.lines.len() {
            let (ln, line) = cur.lines[cur.pos];
            if line.starts_with('[') {
                break;
            }
            cur.pos += 1;
            let (key, value) = split_kv(ln, line)?;
            if !seen.insert(key.to_string()) {
                return Err(fail(ln, &format!("duplicate key '{key}'")));
            }
            match key {
                "model" => model = value.parse().map_err(|e| fail(ln, &format!("{e}")))?,
                "patch" => patch_override = Some(parse_num(ln, key, value)?),
                "positional" => {
                    positional = value.parse().map_err(|e| fail(ln, &format!("{e}")))?
                }
                "timesteps" => timesteps = parse_num(ln, key, value)?,
                "sigma_kind" => {
                    sigma_kind = value.parse().map_err(|e| fail(ln, &format!("{e}")))?
                }
                "seed" => seed = parse_num(ln, key, value)?,
                "carry_optimizer" => carry_optimizer = parse_bool(ln, key, value)?,
                "dataset" => dataset = Some(PathBuf::from(value)),
                "dataset_kind" => {
                    dataset_kind = Some(value.parse().map_err(|e| fail(ln, &format!("{e}")))?)
                }
                "out_dir" => out_dir = PathBuf::from(value),
                "checkpoint_every" => checkpoint_every = parse_num(ln, key, value)?,
                "threads" => threads = parse_num(ln, key, value)?,
                other => return Err(fail(ln, &format!("unknown key '{other}'"))),
            }
        }
        let dataset =
            dataset.ok_or_else(|| err_fmt!(Config, "missing required key 'dataset'"))?;
        let dataset_kind = dataset_kind.unwrap_or_else(|| infer_dataset_kind(&dataset));
        if threads < 1 {
            return Err(err_fmt!(Config, "threads must be >= 1"));
        }

        // stage sections
        let mut stages = Vec::new();
        while cur.pos < cur.lines.len() {
            let (ln, line) = cur.lines[cur.pos];
            let header = line
                .strip_prefix("[stage ")
                .and_then(|r| r.strip_suffix(']'))
                .ok_or_else(|| fail(ln, &format!("expected [stage <n>], got '{line}'")))?;
            let num: usize =
                header.trim().parse().map_err(|_| fail(ln, "bad stage number"))?;
            if num != stages.len() + 1 {
                return Err(fail(ln, &format!("expected [stage {}]", stages.len() + 1)));
            }
            cur.pos += 1;
            stages.push(parse_stage(&mut cur, num)?);
        }
        if stages.is_empty() {
            return Err(err_fmt!(Config, "config declares no [stage n] sections"));
        }

        let plan = TrainPlan {
            preset: model,
            patch_override,
            positional,
            timesteps,
            sigma_kind,
            seed,
            carry_optimizer,
            stages,
        };
        plan.validate()?;
        Ok(RunConfig {
            plan,
            dataset,
            dataset_kind,
            out_dir,
            checkpoint_every,
            threads,
        })
    }

    pub fn parse_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err_fmt!(Config, "cannot read {}: {e}", path.display()))?;
        RunConfig::parse(&text)
    }

    /// Serialize the fully resolved config; re-parsing the echo reproduces
    /// this config exactly.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let p = &self.plan;
        s.push_str(&format!("model = {}\n", p.preset));
        if let Some(patch) = p.patch_override {
            s.push_str(&format!("patch = {patch}\n"));
        }
        s.push_str(&format!(
            "positional = {}\n",
            match p.positional {
                Positional::Learned => "learned",
                Positional::SinusoidalFrozen => "sinusoidal-frozen",
            }
        ));
        s.push_str(&format!("timesteps = {}\n", p.timesteps));
        s.push_str(&format!(
            "sigma_kind = {}\n",
            match p.sigma_kind {
                SigmaKind::Beta => "beta",
                SigmaKind::TildeBeta => "tilde_beta",
            }
        ));
        s.push_str(&format!("seed = {}\n", p.seed));
        s.push_str(&format!("carry_optimizer = {}\n", p.carry_optimizer));
        s.push_str(&format!("dataset = {}\n", self.dataset.display()));
        s.push_str(&format!(
            "dataset_kind = {}\n",
            match self.dataset_kind {
                DatasetKind::RawTensor => "raw_tensor",
                DatasetKind::ImageDir => "image_dir",
            }
        ));
        s.push_str(&format!("out_dir = {}\n", self.out_dir.display()));
        s.push_str(&format!("checkpoint_every = {}\n", self.checkpoint_every));
        s.push_str(&format!("threads = {}\n", self.threads));
        for (i, st) in p.stages.iter().enumerate() {
            s.push_str(&format!("\n[stage {}]\n", i + 1));
            s.push_str(&format!("name = {}\n", st.name));
            if let Some(m) = st.mask_spec {
                s.push_str(&format!("mask = {m}\n"));
            }
            s.push_str(&format!("steps = {}\n", st.steps));
            s.push_str(&format!("batch_size = {}\n", st.batch_size));
            s.push_str(&format!("lr = {}\n", st.lr));
            s.push_str(&format!("warmup_steps = {}\n", st.warmup_steps));
            if let Some(c) = st.grad_clip {
                s.push_str(&format!("grad_clip = {c}\n"));
            }
            s.push_str(&format!(
                "schedule = {}\n",
                match st.schedule_kind {
                    ScheduleKind::Linear => "linear",
                    ScheduleKind::Cosine => "cosine",
                }
            ));
            s.push_str(&format!("ema_decay = {}\n", st.ema_decay));
            s.push_str(&format!("hflip_prob = {}\n", st.hflip_prob));
        }
        s
    }
}

fn parse_stage(cur: &mut Cursor<'_>, num: usize) -> Result<TrainStage> {
    let mut stage = TrainStage {
        name: format!("stage{num}"),
        mask_spec: None,
        steps: 0,
        batch_size: STAGE_DEFAULT_BATCH,
        lr: STAGE_DEFAULT_LR,
        warmup_steps: 0,
        grad_clip: None,
        schedule_kind: ScheduleKind::Linear,
        ema_decay: STAGE_DEFAULT_EMA,
        hflip_prob: 0.0,
    };
    let mut seen = BTreeSet::new();
    let mut saw_steps = false;
    while cur.pos < cur.lines.len() {
        let (ln, line) = cur.lines[cur.pos];
        if line.starts_with('[') {
            break;
        }
        cur.pos += 1;
        let (key, value) = split_kv(ln, line)?;
        if !seen.insert(key.to_string()) {
            return Err(fail(ln, &format!("duplicate key '{key}' in stage {num}")));
        }
        match key {
            "name" => stage.name = value.to_string(),
            "mask" => {
                stage.mask_spec =
                    Some(value.parse::<MaskSpec>().map_err(|e| fail(ln, &format!("{e}")))?)
            }
            "steps" => {
                stage.steps = parse_num(ln, key, value)?;
                saw_steps = true;
            }
            "batch_size" => stage.batch_size = parse_num(ln, key, value)?,
            "lr" => stage.lr = parse_num(ln, key, value)?,
            "warmup_steps" => stage.warmup_steps = parse_num(ln, key, value)?,
            "grad_clip" => stage.grad_clip = Some(parse_num(ln, key, value)?),
            "schedule" => {
                stage.schedule_kind = value.parse().map_err(|e| fail(ln, &format!("{e}")))?
            }
            "ema_decay" => stage.ema_decay = parse_num(ln, key, value)?,
            "hflip_prob" => stage.hflip_prob = parse_num(ln, key, value)?,
            other => return Err(fail(ln, &format!("unknown key '{other}' in stage {num}"))),
        }
    }
    if !saw_steps {
        return Err(err_fmt!(Config, "stage {num} is missing 'steps'"));
    }
    Ok(stage)
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => line[..i].trim(),
        None => line.trim(),
    }
}

fn split_kv(ln: usize, line: &str) -> Result<(&str, &str)> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| fail(ln, &format!("expected 'key = value', got '{line}'")))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() || v.is_empty() {
        return Err(fail(ln, "empty key or value"));
    }
    Ok((k, v))
}

fn parse_num<T: std::str::FromStr>(ln: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| fail(ln, &format!("bad value '{value}' for '{key}'")))
}

fn parse_bool(ln: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(fail(ln, &format!("'{key}' wants true or false, got '{value}'"))),
    }
}

fn infer_dataset_kind(path: &Path) -> DatasetKind {
    if path.extension().map(|e| e == "mdtn").unwrap_or(false) {
        DatasetKind::RawTensor
    } else {
        DatasetKind::ImageDir
    }
}
