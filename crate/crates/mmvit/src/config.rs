//! Flat key=value configuration: `section.key = value` lines, `#`
//! comments, unknown keys rejected. One canonical serialization backs
//! both the printed resolved config and the checkpoint fingerprint.

use std::fmt::Write as _;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("bad value for `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("line {line}: expected `key = value`")]
    BadLine { line: usize },
    #[error("invalid config: {msg}")]
    Invalid { msg: String },
    #[error("unknown preset `{0}` (have tiny, audio, image)")]
    UnknownPreset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// One patchification view: an overlapping strided convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl ViewSpec {
    pub fn square(kernel: usize, stride: usize) -> ViewSpec {
        ViewSpec { kernel: (kernel, kernel), stride: (stride, stride) }
    }

    /// Padding that makes the output grid exactly input/stride.
    pub fn padding(&self) -> (usize, usize) {
        (
            derive_padding(self.kernel.0, self.stride.0),
            derive_padding(self.kernel.1, self.stride.1),
        )
    }
}

/// ceil((k − s)/2): for stride-divisible inputs this yields an output
/// grid of exactly input/stride. Requires k > s (overlap).
pub fn derive_padding(kernel: usize, stride: usize) -> usize {
    debug_assert!(kernel > stride, "patchification requires overlap (k > s)");
    (kernel - stride).div_ceil(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    MultiLabel,
    SingleLabel,
}

impl Task {
    fn as_str(self) -> &'static str {
        match self {
            Task::MultiLabel => "multilabel",
            Task::SingleLabel => "single_label",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input as (C, H, W).
    pub input: (usize, usize, usize),
    /// Channel width at stage 1; doubles at each scaled block.
    pub embed_dim: usize,
    pub views: Vec<ViewSpec>,
    /// Self-attention blocks per stage; cross+scaled pairs are appended
    /// to every stage but the last.
    pub self_counts: Vec<usize>,
    /// Heads per stage.
    pub heads: Vec<usize>,
    pub num_classes: usize,
    pub task: Task,
    pub dropout: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    /// 0 disables clipping.
    pub grad_clip: f64,
    /// Early stop once epoch mean loss drops below this; 0 disables.
    pub stop_at_loss: f64,
    /// Hard cap on optimizer steps; 0 means epochs decide.
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub mixup_alpha: f64,
    pub specaug_max_time: usize,
    pub specaug_max_freq: usize,
    pub roll: bool,
    /// The ablation switch: false reproduces "mixup half, other half
    /// unaltered".
    pub cutmix: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
}

impl Config {
    /// The paper's audio configuration (the default).
    pub fn audio() -> Config {
        Config {
            model: ModelConfig {
                input: (1, 1024, 128),
                embed_dim: 96,
                views: vec![ViewSpec::square(9, 2), ViewSpec::square(13, 4)],
                self_counts: vec![0, 0, 9, 1],
                heads: vec![1, 2, 4, 8],
                num_classes: 527,
                task: Task::MultiLabel,
                dropout: 0.0,
            },
            train: TrainConfig {
                lr: 1e-5,
                weight_decay: 1e-4,
                batch_size: 8,
                epochs: 1,
                warmup_frac: 0.05,
                grad_clip: 0.0,
                stop_at_loss: 0.0,
                max_steps: 0,
            },
            augment: AugmentConfig {
                enabled: true,
                mixup_alpha: 0.5,
                specaug_max_time: 192,
                specaug_max_freq: 48,
                roll: true,
                cutmix: true,
            },
        }
    }

    /// The paper's image configuration.
    pub fn image() -> Config {
        let mut c = Config::audio();
        c.model.input = (3, 224, 224);
        c.model.num_classes = 1000;
        c.model.task = Task::SingleLabel;
        c.train.lr = 5e-5;
        c.train.weight_decay = 1e-2;
        c.augment.enabled = false;
        c
    }

    /// Desk-scale preset used by the acceptance suite: small enough to
    /// finite-difference and to overfit in seconds.
    pub fn tiny() -> Config {
        let mut c = Config::audio();
        c.model.input = (1, 64, 32);
        c.model.embed_dim = 48;
        c.model.self_counts = vec![0, 0, 1, 1];
        c.model.num_classes = 4;
        c.model.task = Task::SingleLabel;
        c.train.lr = 1e-3;
        c.train.epochs = 25;
        c.augment.enabled = false;
        c
    }

    pub fn preset(name: &str) -> Result<Config> {
        match name {
            "audio" => Ok(Config::audio()),
            "image" => Ok(Config::image()),
            "tiny" => Ok(Config::tiny()),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }

    /// Apply `key = value` lines from a config file or CLI overrides on
    /// top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::BadLine { line: i + 1 })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn bad<T>(key: &str, msg: impl Into<String>) -> Result<T> {
            Err(ConfigError::BadValue { key: key.to_string(), msg: msg.into() })
        }
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse().map_err(|e| ConfigError::BadValue {
                key: key.to_string(),
                msg: format!("{e}"),
            })
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',')
                .map(|s| num::<usize>(key, s.trim()))
                .collect()
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "on" => Ok(true),
                "false" | "0" | "off" => Ok(false),
                other => bad(key, format!("expected true/false, got `{other}`")),
            }
        }
        match key {
            "model.input_channels" => self.model.input.0 = num(key, value)?,
            "model.input_height" => self.model.input.1 = num(key, value)?,
            "model.input_width" => self.model.input.2 = num(key, value)?,
            "model.embed_dim" => self.model.embed_dim = num(key, value)?,
            "model.view_kernels" => {
                let ks = list(key, value)?;
                self.resize_views(ks.len());
                for (v, k) in self.model.views.iter_mut().zip(ks) {
                    v.kernel = (k, k);
                }
            }
            "model.view_strides" => {
                let ss = list(key, value)?;
                self.resize_views(ss.len());
                for (v, s) in self.model.views.iter_mut().zip(ss) {
                    v.stride = (s, s);
                }
            }
            "model.self_counts" => self.model.self_counts = list(key, value)?,
            "model.heads" => self.model.heads = list(key, value)?,
            "model.num_classes" => self.model.num_classes = num(key, value)?,
            "model.task" => {
                self.model.task = match value {
                    "multilabel" => Task::MultiLabel,
                    "single_label" => Task::SingleLabel,
                    other => return bad(key, format!("unknown task `{other}`")),
                }
            }
            "model.dropout" => self.model.dropout = num(key, value)?,
            "train.lr" => self.train.lr = num(key, value)?,
            "train.weight_decay" => self.train.weight_decay = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.epochs" => self.train.epochs = num(key, value)?,
            "train.warmup_frac" => self.train.warmup_frac = num(key, value)?,
            "train.grad_clip" => self.train.grad_clip = num(key, value)?,
            "train.stop_at_loss" => self.train.stop_at_loss = num(key, value)?,
            "train.max_steps" => self.train.max_steps = num(key, value)?,
            "augment.enabled" => self.augment.enabled = flag(key, value)?,
            "augment.mixup_alpha" => self.augment.mixup_alpha = num(key, value)?,
            "augment.specaug_max_time" => self.augment.specaug_max_time = num(key, value)?,
            "augment.specaug_max_freq" => self.augment.specaug_max_freq = num(key, value)?,
            "augment.roll" => self.augment.roll = flag(key, value)?,
            "augment.cutmix" => self.augment.cutmix = flag(key, value)?,
            other => return Err(ConfigError::UnknownKey { key: other.to_string() }),
        }
        Ok(())
    }

    fn resize_views(&mut self, n: usize) {
        let template = ViewSpec::square(9, 2);
        self.model.views.resize(n, template);
    }

    /// Every key in canonical (sorted) order with its current value.
    pub fn entries(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let t = &self.train;
        let a = &self.augment;
        let join = |xs: &[usize]| {
            xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        };
        let kernels: Vec<usize> = m.views.iter().map(|v| v.kernel.0).collect();
        let strides: Vec<usize> = m.views.iter().map(|v| v.stride.0).collect();
        let mut e = vec![
            ("augment.cutmix".into(), a.cutmix.to_string()),
            ("augment.enabled".into(), a.enabled.to_string()),
            ("augment.mixup_alpha".into(), a.mixup_alpha.to_string()),
            ("augment.roll".into(), a.roll.to_string()),
            ("augment.specaug_max_freq".into(), a.specaug_max_freq.to_string()),
            ("augment.specaug_max_time".into(), a.specaug_max_time.to_string()),
            ("model.dropout".into(), m.dropout.to_string()),
            ("model.embed_dim".into(), m.embed_dim.to_string()),
            ("model.heads".into(), join(&m.heads)),
            ("model.input_channels".into(), m.input.0.to_string()),
            ("model.input_height".into(), m.input.1.to_string()),
            ("model.input_width".into(), m.input.2.to_string()),
            ("model.num_classes".into(), m.num_classes.to_string()),
            ("model.self_counts".into(), join(&m.self_counts)),
            ("model.task".into(), m.task.as_str().into()),
            ("model.view_kernels".into(), join(&kernels)),
            ("model.view_strides".into(), join(&strides)),
            ("train.batch_size".into(), t.batch_size.to_string()),
            ("train.epochs".into(), t.epochs.to_string()),
            ("train.grad_clip".into(), t.grad_clip.to_string()),
            ("train.lr".into(), t.lr.to_string()),
            ("train.max_steps".into(), t.max_steps.to_string()),
            ("train.stop_at_loss".into(), t.stop_at_loss.to_string()),
            ("train.warmup_frac".into(), t.warmup_frac.to_string()),
            ("train.weight_decay".into(), t.weight_decay.to_string()),
        ];
        e.sort();
        e
    }

    /// Canonical text form; parsing it back reproduces the config.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// FNV-1a over the canonical `model.*` lines. Identifies the
    /// architecture a checkpoint was saved for, ignoring train/augment
    /// settings.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (k, v) in self.entries() {
            if !k.starts_with("model.") {
                continue;
            }
            for b in k.bytes().chain("=".bytes()).chain(v.bytes()).chain("\n".bytes()) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn num_stages(&self) -> usize {
        self.model.self_counts.len()
    }

    /// Check every structural invariant; errors name the failing field.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let fail = |msg: String| Err(ConfigError::Invalid { msg });
        let (c, h, w) = m.input;
        if c == 0 || h == 0 || w == 0 {
            return fail(format!("model.input has a zero extent: ({c},{h},{w})"));
        }
        if m.embed_dim == 0 {
            return fail("model.embed_dim must be positive".into());
        }
        if m.views.is_empty() {
            return fail("at least one view required".into());
        }
        if m.self_counts.is_empty() || m.self_counts.len() != m.heads.len() {
            return fail(format!(
                "model.self_counts ({}) and model.heads ({}) must list one entry per stage",
                m.self_counts.len(),
                m.heads.len()
            ));
        }
        if m.num_classes == 0 {
            return fail("model.num_classes must be positive".into());
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return fail(format!("model.dropout {} outside [0,1)", m.dropout));
        }
        let halvings = self.num_stages() - 1;
        for (i, v) in m.views.iter().enumerate() {
            if v.kernel.0 <= v.stride.0 || v.kernel.1 <= v.stride.1 {
                return fail(format!(
                    "view {i}: kernel {:?} must exceed stride {:?} (overlap)",
                    v.kernel, v.stride
                ));
            }
            if i > 0 {
                let prev = &m.views[i - 1];
                if v.stride.0 != prev.stride.0 * 2 || v.stride.1 != prev.stride.1 * 2 {
                    return fail(format!(
                        "view {i}: stride {:?} must double view {}'s {:?} (token ratio 4)",
                        v.stride,
                        i - 1,
                        prev.stride
                    ));
                }
            }
            for (axis, (extent, stride)) in
                [(h, v.stride.0), (w, v.stride.1)].into_iter().enumerate()
            {
                let name = ["height", "width"][axis];
                if extent % stride != 0 {
                    return fail(format!(
                        "view {i}: input {name} {extent} not divisible by stride {stride}"
                    ));
                }
                let grid = extent / stride;
                if grid % (1 << halvings) != 0 {
                    return fail(format!(
                        "view {i}: {name} grid {grid} not divisible by 2^{halvings} \
                         (needed for {halvings} scaled blocks)"
                    ));
                }
            }
        }
        for (s, &heads) in m.heads.iter().enumerate() {
            let width = m.embed_dim << s;
            if heads == 0 || width % heads != 0 {
                return fail(format!(
                    "stage {}: width {width} not divisible by {heads} heads",
                    s + 1
                ));
            }
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return fail("train.batch_size must be positive".into());
        }
        if t.lr < 0.0 || t.weight_decay < 0.0 || t.grad_clip < 0.0 {
            return fail("train.lr, weight_decay, grad_clip must be non-negative".into());
        }
        if !(0.0..1.0).contains(&t.warmup_frac) {
            return fail(format!("train.warmup_frac {} outside [0,1)", t.warmup_frac));
        }
        if self.augment.mixup_alpha <= 0.0 {
            return fail("augment.mixup_alpha must be positive".into());
        }
        Ok(())
    }
}

impl Default for Config {
    fn default() -> Self {
        Config::audio()
    }
}
