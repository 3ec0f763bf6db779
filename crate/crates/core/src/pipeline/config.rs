//! Run configuration in a flat `key = value` text format.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and
//! defaults to the desk-scale preset; unknown keys and repeated keys are
//! rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::tmamba::{BranchLayout, MambaKind};
use crate::nn::ModelConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub channels: usize,
    pub depth: usize,
    pub state_dim: usize,
    pub expansion: usize,
    pub crop: usize,
    pub batch: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub lr_period: usize,
    pub seed: u64,
    pub transformer_branch: bool,
    pub mamba_branch: bool,
    pub interaction: bool,
    pub cross_modal_attention: bool,
    pub mamba_as_conv: bool,
    /// Directory with `a/` and `b/` subfolders; `None` trains on the
    /// built-in synthetic set.
    pub data_dir: Option<PathBuf>,
    pub synthetic_pairs: usize,
    pub synthetic_size: usize,
    pub out_dir: PathBuf,
    /// Epochs between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

/// The five architecture variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Transformer branch alone, per-modality attention.
    T,
    /// Adds cross-modal attention.
    TA,
    /// Adds the state-space branch without branch interaction.
    TAM,
    /// The full network.
    TAMI,
    /// The full network with residual convolutions in place of the
    /// state-space blocks.
    TC,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::T, Ablation::TA, Ablation::TAM, Ablation::TAMI, Ablation::TC];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::T => "T",
            Ablation::TA => "T+A",
            Ablation::TAM => "T+A+M",
            Ablation::TAMI => "T+A+M+I",
            Ablation::TC => "T+C",
        }
    }

    /// `base` with this variant's branch toggles.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let (cross, mamba, interaction, conv) = match self {
            Ablation::T => (false, false, false, false),
            Ablation::TA => (true, false, false, false),
            Ablation::TAM => (true, true, false, false),
            Ablation::TAMI => (true, true, true, false),
            Ablation::TC => (true, true, true, true),
        };
        RunConfig {
            transformer_branch: true,
            mamba_branch: mamba,
            interaction,
            cross_modal_attention: cross,
            mamba_as_conv: conv,
            ..base.clone()
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

const KEYS: &[&str] = &[
    "channels",
    "depth",
    "state_dim",
    "expansion",
    "crop",
    "batch",
    "epochs_stage1",
    "epochs_stage2",
    "lr",
    "lr_decay",
    "lr_period",
    "seed",
    "transformer_branch",
    "mamba_branch",
    "interaction",
    "cross_modal_attention",
    "mamba_as_conv",
    "data_dir",
    "synthetic_pairs",
    "synthetic_size",
    "out_dir",
    "checkpoint_every",
];

impl RunConfig {
    /// Toy-scale preset: 8 synthetic 32×32 pairs, batch 2, 50 + 50 epochs.
    pub fn desk() -> Self {
        Self {
            channels: 8,
            depth: 1,
            state_dim: 8,
            expansion: 2,
            crop: 32,
            batch: 2,
            epochs_stage1: 50,
            epochs_stage2: 50,
            lr: 2e-3,
            lr_decay: 0.5,
            lr_period: 20,
            seed: 7,
            transformer_branch: true,
            mamba_branch: true,
            interaction: true,
            cross_modal_attention: true,
            mamba_as_conv: false,
            data_dir: None,
            synthetic_pairs: 8,
            synthetic_size: 32,
            out_dir: PathBuf::from("runs/toy"),
            checkpoint_every: 0,
        }
    }

    /// Published training setup: 64 channels, 128×128 crops, batch 4,
    /// 40 + 40 epochs, lr 7.5e-5 halved every 20 epochs.
    pub fn published() -> Self {
        Self {
            channels: 64,
            crop: 128,
            batch: 4,
            epochs_stage1: 40,
            epochs_stage2: 40,
            lr: 7.5e-5,
            synthetic_size: 128,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.crop < 16 {
            return bad("crop must be at least 16");
        }
        if self.channels == 0 || self.depth == 0 || self.state_dim == 0 || self.expansion == 0 {
            return bad("channels, depth, state_dim and expansion must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return bad("lr_decay must be positive");
        }
        if self.lr_period == 0 {
            return bad("lr_period must be positive");
        }
        if !self.transformer_branch && !self.mamba_branch {
            return bad("cannot disable both branches");
        }
        if self.mamba_as_conv && !self.mamba_branch {
            return bad("mamba_as_conv needs mamba_branch");
        }
        if self.data_dir.is_none() && (self.synthetic_pairs == 0 || self.synthetic_size < self.crop) {
            return bad("synthetic set must have pairs at least as large as the crop");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            depth: self.depth,
            state_dim: self.state_dim,
            expansion: self.expansion,
            layout: BranchLayout {
                transformer: self.transformer_branch,
                mamba: match (self.mamba_branch, self.mamba_as_conv) {
                    (false, _) => None,
                    (true, false) => Some(MambaKind::Ssm),
                    (true, true) => Some(MambaKind::Conv),
                },
                interaction: self.interaction,
            },
            cross_modal_attention: self.cross_modal_attention,
        }
    }

    /// Learning rate in effect during `epoch` (0-based) of a stage.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_period) as i32)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        let mut seen: Vec<&str> = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::Config(format!("line {}: {m}", no + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let Some(&known) = KEYS.iter().find(|k| **k == key) else {
                return Err(err(format!("unknown key `{key}`")));
            };
            if seen.contains(&known) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            seen.push(known);
            cfg.set(key, value).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
        }
        fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" | "on" | "yes" | "1" => Ok(true),
                "false" | "off" | "no" | "0" => Ok(false),
                _ => Err(format!("`{key}`: expected a boolean, got `{v}`")),
            }
        }
        match key {
            "channels" => self.channels = num(key, v)?,
            "depth" => self.depth = num(key, v)?,
            "state_dim" => self.state_dim = num(key, v)?,
            "expansion" => self.expansion = num(key, v)?,
            "crop" => self.crop = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "epochs_stage1" => self.epochs_stage1 = num(key, v)?,
            "epochs_stage2" => self.epochs_stage2 = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "lr_decay" => self.lr_decay = num(key, v)?,
            "lr_period" => self.lr_period = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "transformer_branch" => self.transformer_branch = flag(key, v)?,
            "mamba_branch" => self.mamba_branch = flag(key, v)?,
            "interaction" => self.interaction = flag(key, v)?,
            "cross_modal_attention" => self.cross_modal_attention = flag(key, v)?,
            "mamba_as_conv" => self.mamba_as_conv = flag(key, v)?,
            "data_dir" => self.data_dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "synthetic_pairs" => self.synthetic_pairs = num(key, v)?,
            "synthetic_size" => self.synthetic_size = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            _ => unreachable!("key list and setter disagree on `{key}`"),
        }
        Ok(())
    }

    /// Serialises every key; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let b = |x: bool| if x { "true" } else { "false" };
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "depth = {}", self.depth);
        let _ = writeln!(s, "state_dim = {}", self.state_dim);
        let _ = writeln!(s, "expansion = {}", self.expansion);
        let _ = writeln!(s, "crop = {}", self.crop);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "epochs_stage1 = {}", self.epochs_stage1);
        let _ = writeln!(s, "epochs_stage2 = {}", self.epochs_stage2);
        let _ = writeln!(s, "lr = {:?}", self.lr);
        let _ = writeln!(s, "lr_decay = {:?}", self.lr_decay);
        let _ = writeln!(s, "lr_period = {}", self.lr_period);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "transformer_branch = {}", b(self.transformer_branch));
        let _ = writeln!(s, "mamba_branch = {}", b(self.mamba_branch));
        let _ = writeln!(s, "interaction = {}", b(self.interaction));
        let _ = writeln!(s, "cross_modal_attention = {}", b(self.cross_modal_attention));
        let _ = writeln!(s, "mamba_as_conv = {}", b(self.mamba_as_conv));
        let dir = self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let _ = writeln!(s, "data_dir = {dir}");
        let _ = writeln!(s, "synthetic_pairs = {}", self.synthetic_pairs);
        let _ = writeln!(s, "synthetic_size = {}", self.synthetic_size);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        s
    }
}
