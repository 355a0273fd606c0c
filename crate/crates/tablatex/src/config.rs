//! Run configuration: a flat `key = value` file plus `--set key=value`
//! overrides. Unknown keys are errors.

use std::fmt::Write as _;
use std::str::FromStr;

use tablatex_core::augment::{AugmentPolicy, ResizeMode, TransformSpec};
use tablatex_core::model::ModelConfig;
use tablatex_core::optim::OptimConfig;
use tablatex_core::rng::derive_seed;
use tablatex_core::synth::{ContentMode, SynthConfig};
use tablatex_core::train::TrainConfig;
use tablatex_core::Task;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub max_steps: u64,
    pub target_loss: Option<f64>,
    pub check_every: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { batch_size: 8, max_steps: 3000, target_loss: Some(0.01), check_every: 100, checkpoint_every: 500, log_every: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessSettings {
    pub mode: ResizeMode,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Default for PreprocessSettings {
    fn default() -> Self {
        Self { mode: ResizeMode::PadWhite, mean: vec![0.0], std: vec![1.0] }
    }
}

/// Everything a subcommand needs, from one root seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    pub min_count: u64,
    pub max_seq_len: usize,
    /// `vocab_size` is filled in from the vocabulary at run time.
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub augment_enabled: bool,
    pub augment: AugmentPolicy,
    pub preprocess: PreprocessSettings,
    pub train: TrainSettings,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = Task::Tsr;
        let max_seq_len = task.default_max_seq_len();
        Self {
            seed: 0,
            task,
            min_count: 2,
            max_seq_len,
            model: ModelConfig::desk(0, max_seq_len),
            optim: OptimConfig::default(),
            augment_enabled: false,
            augment: AugmentPolicy::default(),
            preprocess: PreprocessSettings::default(),
            train: TrainSettings::default(),
            synth: SynthConfig { max_seq_len, ..SynthConfig::default() },
        }
    }
}

const AUGMENT_NAMES: [&str; 8] =
    ["shear", "rotate", "translate", "scale", "perspective", "contrast", "brightness", "saturation"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Usage(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Usage(format!("{key}: expected a boolean, got `{value}`"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f32>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_range(key: &str, value: &str) -> Result<(usize, usize)> {
    match value.split_once('-') {
        Some((a, b)) => Ok((parse(key, a.trim())?, parse(key, b.trim())?)),
        None => {
            let n = parse(key, value)?;
            Ok((n, n))
        }
    }
}

fn list_text(v: &[f32]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&parse_pairs(text)?)?;
        Ok(cfg)
    }

    /// Applies pairs in order, except that `model.profile` and `task` go first
    /// so presets never clobber explicit keys.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let first = |k: &str| k == "model.profile" || k == "task";
        for (k, v) in pairs.iter().filter(|(k, _)| first(k)) {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| !first(k)) {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let o = &mut self.optim;
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "task" => {
                self.task = v.parse()?;
                self.max_seq_len = self.task.default_max_seq_len();
                m.max_decode_len = self.max_seq_len;
                s.task = self.task;
                s.max_seq_len = self.max_seq_len;
                if self.task == Task::Tcr {
                    s.content = ContentMode::Digits;
                }
            }
            "min_count" => self.min_count = parse(key, v)?,
            "max_seq_len" => {
                self.max_seq_len = parse(key, v)?;
                s.max_seq_len = self.max_seq_len;
            }
            "model.profile" => {
                let keep = m.max_decode_len;
                *m = match v {
                    "desk" => ModelConfig::desk(0, keep),
                    "paper_like" => ModelConfig::paper_like(0, keep),
                    _ => return Err(Error::Usage(format!("model.profile: expected desk or paper_like, got `{v}`"))),
                };
            }
            "model.d_model" => m.d_model = parse(key, v)?,
            "model.n_heads" => m.n_heads = parse(key, v)?,
            "model.n_decoder_layers" => m.n_decoder_layers = parse(key, v)?,
            "model.ffn_dim" => m.ffn_dim = parse(key, v)?,
            "model.max_decode_len" => m.max_decode_len = parse(key, v)?,
            "model.input_h" => m.input_h = parse(key, v)?,
            "model.input_w" => m.input_w = parse(key, v)?,
            "model.in_channels" => m.in_channels = parse(key, v)?,
            "model.downsample_factor" => m.downsample_factor = parse(key, v)?,
            "model.feac_enabled" => m.feac_enabled = parse_bool(key, v)?,
            "optim.lr" => o.lr = parse(key, v)?,
            "optim.beta1" => o.beta1 = parse(key, v)?,
            "optim.beta2" => o.beta2 = parse(key, v)?,
            "optim.eps" => o.eps = parse(key, v)?,
            "optim.lookahead_k" => {
                let k: usize = parse(key, v)?;
                o.lookahead_k = if k == 0 { usize::MAX } else { k };
            }
            "optim.lookahead_alpha" => o.lookahead_alpha = parse(key, v)?,
            "optim.gc_enabled" => o.gc_enabled = parse_bool(key, v)?,
            "optim.weight_decay" => o.weight_decay = parse(key, v)?,
            "optim.step_decay" => {
                o.step_decay = v
                    .split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(|p| {
                        let (a, b) = p
                            .split_once(':')
                            .ok_or_else(|| Error::Usage(format!("{key}: expected step:multiplier, got `{p}`")))?;
                        Ok((parse(key, a)?, parse(key, b)?))
                    })
                    .collect::<Result<_>>()?;
            }
            "augment.enabled" => self.augment_enabled = parse_bool(key, v)?,
            "preprocess.mode" => {
                self.preprocess.mode = match v {
                    "distort" => ResizeMode::Distort,
                    "pad_white" => ResizeMode::PadWhite,
                    _ => return Err(Error::Usage(format!("{key}: expected distort or pad_white, got `{v}`"))),
                }
            }
            "preprocess.mean" => self.preprocess.mean = parse_list(key, v)?,
            "preprocess.std" => self.preprocess.std = parse_list(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.max_steps" => t.max_steps = parse(key, v)?,
            "train.target_loss" => t.target_loss = if v == "none" { None } else { Some(parse(key, v)?) },
            "train.check_every" => t.check_every = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "train.log_every" => t.log_every = parse(key, v)?,
            "synth.rows" => s.rows = parse_range(key, v)?,
            "synth.cols" => s.cols = parse_range(key, v)?,
            "synth.width" => s.width = parse(key, v)?,
            "synth.height" => s.height = parse(key, v)?,
            "synth.content" => s.content = v.parse()?,
            "synth.fill_prob" => s.fill_prob = parse(key, v)?,
            "synth.vrule_prob" => s.vrule_prob = parse(key, v)?,
            "synth.hline_prob" => s.hline_prob = parse(key, v)?,
            "synth.max_digits" => s.max_digits = parse(key, v)?,
            _ => return self.set_augment(key, v),
        }
        Ok(())
    }

    fn set_augment(&mut self, key: &str, v: &str) -> Result<()> {
        let unknown = || Error::Usage(format!("unknown config key `{key}`"));
        let rest = key.strip_prefix("augment.").ok_or_else(unknown)?;
        let (name, field) = rest.split_once('.').ok_or_else(unknown)?;
        let i = AUGMENT_NAMES.iter().position(|n| *n == name).ok_or_else(unknown)?;
        let spec: &mut TransformSpec = self.augment.specs_mut().into_iter().nth(i).expect("eight transforms");
        match field {
            "enabled" => spec.enabled = parse_bool(key, v)?,
            "prob" => spec.prob = parse(key, v)?,
            "lo" => spec.range.lo = parse(key, v)?,
            "hi" => spec.range.hi = parse(key, v)?,
            _ => return Err(unknown()),
        }
        Ok(())
    }

    /// Canonical listing of every key; parsing it back gives the same config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        let (m, o, t, s) = (&self.model, &self.optim, &self.train, &self.synth);
        kv("seed", self.seed.to_string());
        kv("task", self.task.as_str().into());
        kv("min_count", self.min_count.to_string());
        kv("max_seq_len", self.max_seq_len.to_string());
        kv("model.d_model", m.d_model.to_string());
        kv("model.n_heads", m.n_heads.to_string());
        kv("model.n_decoder_layers", m.n_decoder_layers.to_string());
        kv("model.ffn_dim", m.ffn_dim.to_string());
        kv("model.max_decode_len", m.max_decode_len.to_string());
        kv("model.input_h", m.input_h.to_string());
        kv("model.input_w", m.input_w.to_string());
        kv("model.in_channels", m.in_channels.to_string());
        kv("model.downsample_factor", m.downsample_factor.to_string());
        kv("model.feac_enabled", m.feac_enabled.to_string());
        kv("optim.lr", o.lr.to_string());
        kv("optim.beta1", o.beta1.to_string());
        kv("optim.beta2", o.beta2.to_string());
        kv("optim.eps", o.eps.to_string());
        kv("optim.lookahead_k", if o.lookahead_k == usize::MAX { "0".into() } else { o.lookahead_k.to_string() });
        kv("optim.lookahead_alpha", o.lookahead_alpha.to_string());
        kv("optim.gc_enabled", o.gc_enabled.to_string());
        kv("optim.weight_decay", o.weight_decay.to_string());
        kv("optim.step_decay", o.step_decay.iter().map(|(a, b)| format!("{a}:{b}")).collect::<Vec<_>>().join(","));
        kv("augment.enabled", self.augment_enabled.to_string());
        for (name, spec) in self.augment.specs() {
            kv(&format!("augment.{name}.enabled"), spec.enabled.to_string());
            kv(&format!("augment.{name}.prob"), spec.prob.to_string());
            kv(&format!("augment.{name}.lo"), spec.range.lo.to_string());
            kv(&format!("augment.{name}.hi"), spec.range.hi.to_string());
        }
        kv("preprocess.mode", match self.preprocess.mode {
            ResizeMode::Distort => "distort".into(),
            ResizeMode::PadWhite => "pad_white".into(),
        });
        kv("preprocess.mean", list_text(&self.preprocess.mean));
        kv("preprocess.std", list_text(&self.preprocess.std));
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.max_steps", t.max_steps.to_string());
        kv("train.target_loss", t.target_loss.map_or("none".into(), |x| x.to_string()));
        kv("train.check_every", t.check_every.to_string());
        kv("train.checkpoint_every", t.checkpoint_every.to_string());
        kv("train.log_every", t.log_every.to_string());
        kv("synth.rows", format!("{}-{}", s.rows.0, s.rows.1));
        kv("synth.cols", format!("{}-{}", s.cols.0, s.cols.1));
        kv("synth.width", s.width.to_string());
        kv("synth.height", s.height.to_string());
        kv("synth.content", s.content.as_str().into());
        kv("synth.fill_prob", s.fill_prob.to_string());
        kv("synth.vrule_prob", s.vrule_prob.to_string());
        kv("synth.hline_prob", s.hline_prob.to_string());
        kv("synth.max_digits", s.max_digits.to_string());
        out
    }

    /// Checks everything except the synthetic-data settings, which only
    /// `synth` uses.
    pub fn validate(&self) -> Result<()> {
        if self.max_seq_len == 0 || self.min_count == 0 {
            return Err(Error::Usage("max_seq_len and min_count must be positive".into()));
        }
        self.model_config(self.model.vocab_size.max(5)).validate()?;
        self.optim.validate()?;
        if self.augment_enabled {
            self.augment.validate()?;
        }
        let channels = self.model.in_channels;
        for (name, v) in [("mean", &self.preprocess.mean), ("std", &self.preprocess.std)] {
            if !(v.len() == 1 || v.len() == channels) || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Usage(format!("preprocess.{name} needs 1 or {channels} finite values")));
            }
        }
        if self.preprocess.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Usage("preprocess.std must be positive".into()));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.check_every == 0 || t.log_every == 0 {
            return Err(Error::Usage("train.batch_size, train.check_every and train.log_every must be positive".into()));
        }
        if t.target_loss.is_some_and(|x| !(x > 0.0)) {
            return Err(Error::Usage("train.target_loss must be positive or none".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig { vocab_size, ..self.model.clone() }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { task: self.task, max_seq_len: self.max_seq_len, seed: derive_seed(self.seed, "synth"), ..self.synth.clone() }
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, "model")
    }

    pub fn train_config(&self) -> TrainConfig {
        let augment = self.augment_enabled.then(|| AugmentPolicy { seed: derive_seed(self.seed, "augment"), ..self.augment.clone() });
        TrainConfig {
            batch_size: self.train.batch_size,
            max_steps: self.train.max_steps,
            target_loss: self.train.target_loss,
            check_every: self.train.check_every,
            seed: derive_seed(self.seed, "batches"),
            augment,
        }
    }

    pub fn augment_policy(&self) -> AugmentPolicy {
        AugmentPolicy { seed: derive_seed(self.seed, "augment"), ..self.augment.clone() }
    }
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("config line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// A `--set key=value` argument.
pub fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply(&[
            ("optim.step_decay".into(), "100:0.1, 200:0.5".into()),
            ("augment.rotate.hi".into(), "3.5".into()),
            ("preprocess.mean".into(), "0.5".into()),
            ("train.target_loss".into(), "none".into()),
            ("synth.rows".into(), "2-4".into()),
            ("optim.lookahead_k".into(), "0".into()),
        ])
        .unwrap();
        assert_eq!(cfg.optim.step_decay, vec![(100, 0.1), (200, 0.5)]);
        assert_eq!(cfg.optim.lookahead_k, usize::MAX);
        let text = cfg.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_text("model.width = 3").is_err());
        assert!(RunConfig::from_text("augment.blur.prob = 0.1").is_err());
        assert!(RunConfig::from_text("optim.lr = fast").is_err());
        assert!(RunConfig::from_text("no equals sign").is_err());
        let mut cfg = RunConfig::from_text("# comment\n\noptim.lr = 0\n").unwrap();
        assert!(cfg.validate().is_err());
        cfg.optim.lr = 1e-3;
        cfg.validate().unwrap();
    }

    #[test]
    fn presets_apply_before_explicit_keys() {
        let cfg = RunConfig::from_text("model.d_model = 64\nmodel.n_heads = 2\nmodel.profile = paper_like\ntask = tcr\nmax_seq_len = 100").unwrap();
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.model.input_h, 400);
        assert_eq!(cfg.max_seq_len, 100);
        assert_eq!(cfg.synth.content, ContentMode::Digits);
    }

    #[test]
    fn sub_seeds_differ() {
        let cfg = RunConfig::default();
        let seeds = [cfg.model_seed(), cfg.synth_config().seed, cfg.train_config().seed, cfg.augment_policy().seed];
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }
}
