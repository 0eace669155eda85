//! Flat dotted-key configuration (`train.batch=12` style) shared by every
//! CLI verb. One `seed` key feeds all randomness.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which mixup strategy the trainer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixKind {
    None,
    FixedSentence,
    BetaHidden,
    Oommix,
}

impl MixKind {
    pub const ALL: [MixKind; 4] =
        [MixKind::None, MixKind::FixedSentence, MixKind::BetaHidden, MixKind::Oommix];

    pub fn name(self) -> &'static str {
        match self {
            MixKind::None => "none",
            MixKind::FixedSentence => "fixed-sentence",
            MixKind::BetaHidden => "beta-hidden",
            MixKind::Oommix => "oommix",
        }
    }

    pub fn parse(s: &str) -> Result<MixKind> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mix.strategy {:?}", s)))
    }

    /// Strategies that interpolate pairs need batches of at least 2.
    pub fn needs_pairs(self) -> bool {
        !matches!(self, MixKind::None)
    }
}

/// How the two BCE terms of the discriminator loss are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LdForm {
    Mean,
    Sum,
}

impl LdForm {
    pub fn name(self) -> &'static str {
        match self {
            LdForm::Mean => "mean",
            LdForm::Sum => "sum",
        }
    }

    pub fn parse(s: &str) -> Result<LdForm> {
        match s {
            "mean" => Ok(LdForm::Mean),
            "sum" => Ok(LdForm::Sum),
            other => Err(Error::Config(format!("unknown mix.ld_form {:?}", other))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCfg {
    /// Encoder layer count M.
    pub layers: usize,
    /// Embedding width D.
    pub width: usize,
    /// Attention heads H; must divide width.
    pub heads: usize,
    /// Maximum sequence length L.
    pub seq_len: usize,
    /// Feed-forward width; 0 means 2 × width.
    pub ff: usize,
    /// Vocabulary cap V (including pad and unk).
    pub vocab_cap: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixCfg {
    pub strategy: MixKind,
    /// Generator placement m_g; -1 resolves to ⌈M/4⌉.
    pub m_g: i64,
    /// Discriminator placement m_d; -1 resolves to M.
    pub m_d: i64,
    /// λ for the fixed-sentence baseline.
    pub fixed_lambda: f64,
    /// Beta(a, a) shape for the beta-hidden baseline.
    pub beta_a: f64,
    /// Apply λ ← max(λ, 1−λ) to beta draws.
    pub beta_max: bool,
    pub e_init: f64,
    pub e_check_every: usize,
    pub e_window: usize,
    pub e_threshold: f64,
    pub e_factor: f64,
    pub e_cap: f64,
    pub ld_form: LdForm,
    /// Permit m_g = m_d (layer-sweep diagnostics only).
    #[serde(default)]
    pub allow_equal: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainCfg {
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub batch: usize,
    pub warmup: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub max_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataCfg {
    /// "synth" or "csv".
    pub source: String,
    /// CSV paths when source = csv.
    pub train: String,
    pub test: String,
    /// Text columns after the label column.
    pub text_cols: usize,
    /// Stratified subsample of the training file; 0 keeps all.
    pub train_n: usize,
    /// Validation examples carved out of the training set.
    pub val_n: usize,
    pub eda: bool,
    pub eda_p_insert: f64,
    pub eda_p_delete: f64,
    pub eda_p_swap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthCfg {
    pub classes: usize,
    /// Keywords per class.
    pub keywords: usize,
    /// Keyword emission probability q.
    pub q: f64,
    /// Distractor vocabulary size.
    pub vocab: usize,
    /// Tokens per generated text.
    pub length: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Fraction of training labels resampled uniformly.
    pub label_noise: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisCfg {
    pub bins: usize,
    pub pca_target: f64,
    pub isomap_k: usize,
    pub isomap_dims: usize,
    /// Generated pairs in an embedding dump.
    pub pairs: usize,
    /// Cap on actual points fed to Isomap; 0 keeps all.
    pub max_points: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Config {
    pub seed: u64,
    pub model: ModelCfg,
    pub mix: MixCfg,
    pub train: TrainCfg,
    pub data: DataCfg,
    pub synth: SynthCfg,
    pub analysis: AnalysisCfg,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 42,
            model: ModelCfg {
                layers: 4,
                width: 64,
                heads: 4,
                seq_len: 64,
                ff: 0,
                vocab_cap: 2000,
                dropout: 0.1,
            },
            mix: MixCfg {
                strategy: MixKind::Oommix,
                m_g: -1,
                m_d: -1,
                fixed_lambda: 0.5,
                beta_a: 0.1,
                beta_max: false,
                e_init: 1.0,
                e_check_every: 50,
                e_window: 50,
                e_threshold: 0.6,
                e_factor: 1.5,
                e_cap: 8.0,
                ld_form: LdForm::Mean,
                allow_equal: false,
            },
            train: TrainCfg {
                // From-scratch toy rates; the 2e-5 of the pretrained setup
                // is far too slow without pretrained weights.
                lr_encoder: 3e-4,
                lr_head: 1e-3,
                batch: 12,
                warmup: 1000,
                eval_every: 200,
                patience: 10,
                max_steps: 20000,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                clip: 1.0,
            },
            data: DataCfg {
                source: "synth".into(),
                train: String::new(),
                test: String::new(),
                text_cols: 1,
                train_n: 0,
                val_n: 500,
                eda: false,
                eda_p_insert: 0.1,
                eda_p_delete: 0.1,
                eda_p_swap: 0.1,
            },
            synth: SynthCfg {
                classes: 4,
                keywords: 8,
                q: 0.7,
                vocab: 200,
                length: 18,
                train: 2000,
                val: 500,
                test: 1000,
                label_noise: 0.0,
            },
            analysis: AnalysisCfg {
                bins: 20,
                pca_target: 0.8,
                isomap_k: 15,
                isomap_dims: 3,
                pairs: 500,
                max_points: 0,
            },
        }
    }
}

impl Config {
    /// Generator placement with the -1 default resolved to ⌈M/4⌉.
    pub fn m_g(&self) -> usize {
        if self.mix.m_g < 0 {
            self.model.layers.div_ceil(4)
        } else {
            self.mix.m_g as usize
        }
    }

    /// Discriminator placement with the -1 default resolved to M.
    pub fn m_d(&self) -> usize {
        if self.mix.m_d < 0 {
            self.model.layers
        } else {
            self.mix.m_d as usize
        }
    }

    /// Feed-forward width with the 0 default resolved to 2 × width.
    pub fn ff_width(&self) -> usize {
        if self.model.ff == 0 {
            2 * self.model.width
        } else {
            self.model.ff
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.layers < 2 {
            return Err(Error::Config("model.layers must be ≥ 2".into()));
        }
        if m.width == 0 || m.heads == 0 || m.width % m.heads != 0 {
            return Err(Error::Config(format!(
                "model.width {} must be a positive multiple of model.heads {}",
                m.width, m.heads
            )));
        }
        if m.seq_len < 2 {
            return Err(Error::Config("model.seq_len must be ≥ 2".into()));
        }
        if m.vocab_cap < 3 {
            return Err(Error::Config("model.vocab_cap must be ≥ 3".into()));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Config("model.dropout must be in [0, 1)".into()));
        }
        let (m_g, m_d) = (self.m_g(), self.m_d());
        if self.mix.strategy == MixKind::Oommix {
            let ok = m_g < m_d || (m_g == m_d && self.mix.allow_equal);
            if !ok {
                return Err(Error::Config(format!("need m_g < m_d, got {} ≥ {}", m_g, m_d)));
            }
        }
        if m_d > m.layers {
            return Err(Error::Config(format!("m_d {} exceeds layer count {}", m_d, m.layers)));
        }
        if !(0.0..=1.0).contains(&self.mix.fixed_lambda) {
            return Err(Error::Config("mix.fixed_lambda must be in [0, 1]".into()));
        }
        if self.mix.beta_a <= 0.0 {
            return Err(Error::Config("mix.beta_a must be positive".into()));
        }
        let t = &self.train;
        if t.lr_encoder <= 0.0 || t.lr_head <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if t.patience == 0 {
            return Err(Error::Config("train.patience must be ≥ 1".into()));
        }
        if t.batch < 2 && self.mix.strategy.needs_pairs() {
            return Err(Error::Config("train.batch must be ≥ 2 when mixing".into()));
        }
        if t.batch == 0 || t.eval_every == 0 || t.max_steps == 0 {
            return Err(Error::Config("train.batch/eval_every/max_steps must be positive".into()));
        }
        if self.data.source != "synth" && self.data.source != "csv" {
            return Err(Error::Config(format!("unknown data.source {:?}", self.data.source)));
        }
        if self.synth.classes < 2 {
            return Err(Error::Config("synth.classes must be ≥ 2".into()));
        }
        if !(0.0..=1.0).contains(&self.synth.q) || !(0.0..=1.0).contains(&self.synth.label_noise) {
            return Err(Error::Config("synth.q and synth.label_noise must be in [0, 1]".into()));
        }
        if self.analysis.bins == 0 || self.analysis.isomap_dims == 0 {
            return Err(Error::Config("analysis.bins/isomap_dims must be positive".into()));
        }
        Ok(())
    }

    /// Apply one dotted-key override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {:?} for {}", v, key)))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(Error::Config(format!("bad value {:?} for {}", v, key))),
            }
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "model.layers" => self.model.layers = num(key, value)?,
            "model.width" => self.model.width = num(key, value)?,
            "model.heads" => self.model.heads = num(key, value)?,
            "model.seq_len" => self.model.seq_len = num(key, value)?,
            "model.ff" => self.model.ff = num(key, value)?,
            "model.vocab_cap" => self.model.vocab_cap = num(key, value)?,
            "model.dropout" => self.model.dropout = num(key, value)?,
            "mix.strategy" => self.mix.strategy = MixKind::parse(value)?,
            "mix.m_g" => self.mix.m_g = num(key, value)?,
            "mix.m_d" => self.mix.m_d = num(key, value)?,
            "mix.fixed_lambda" => self.mix.fixed_lambda = num(key, value)?,
            "mix.beta_a" => self.mix.beta_a = num(key, value)?,
            "mix.beta_max" => self.mix.beta_max = flag(key, value)?,
            "mix.e_init" => self.mix.e_init = num(key, value)?,
            "mix.e_check_every" => self.mix.e_check_every = num(key, value)?,
            "mix.e_window" => self.mix.e_window = num(key, value)?,
            "mix.e_threshold" => self.mix.e_threshold = num(key, value)?,
            "mix.e_factor" => self.mix.e_factor = num(key, value)?,
            "mix.e_cap" => self.mix.e_cap = num(key, value)?,
            "mix.ld_form" => self.mix.ld_form = LdForm::parse(value)?,
            "mix.allow_equal" => self.mix.allow_equal = flag(key, value)?,
            "train.lr_encoder" => self.train.lr_encoder = num(key, value)?,
            "train.lr_head" => self.train.lr_head = num(key, value)?,
            "train.batch" => self.train.batch = num(key, value)?,
            "train.warmup" => self.train.warmup = num(key, value)?,
            "train.eval_every" => self.train.eval_every = num(key, value)?,
            "train.patience" => self.train.patience = num(key, value)?,
            "train.max_steps" => self.train.max_steps = num(key, value)?,
            "train.beta1" => self.train.beta1 = num(key, value)?,
            "train.beta2" => self.train.beta2 = num(key, value)?,
            "train.eps" => self.train.eps = num(key, value)?,
            "train.clip" => self.train.clip = num(key, value)?,
            "data.source" => self.data.source = value.to_string(),
            "data.train" => self.data.train = value.to_string(),
            "data.test" => self.data.test = value.to_string(),
            "data.text_cols" => self.data.text_cols = num(key, value)?,
            "data.train_n" => self.data.train_n = num(key, value)?,
            "data.val_n" => self.data.val_n = num(key, value)?,
            "data.eda" => self.data.eda = flag(key, value)?,
            "data.eda_p_insert" => self.data.eda_p_insert = num(key, value)?,
            "data.eda_p_delete" => self.data.eda_p_delete = num(key, value)?,
            "data.eda_p_swap" => self.data.eda_p_swap = num(key, value)?,
            "synth.classes" => self.synth.classes = num(key, value)?,
            "synth.keywords" => self.synth.keywords = num(key, value)?,
            "synth.q" => self.synth.q = num(key, value)?,
            "synth.vocab" => self.synth.vocab = num(key, value)?,
            "synth.length" => self.synth.length = num(key, value)?,
            "synth.train" => self.synth.train = num(key, value)?,
            "synth.val" => self.synth.val = num(key, value)?,
            "synth.test" => self.synth.test = num(key, value)?,
            "synth.label_noise" => self.synth.label_noise = num(key, value)?,
            "analysis.bins" => self.analysis.bins = num(key, value)?,
            "analysis.pca_target" => self.analysis.pca_target = num(key, value)?,
            "analysis.isomap_k" => self.analysis.isomap_k = num(key, value)?,
            "analysis.isomap_dims" => self.analysis.isomap_dims = num(key, value)?,
            "analysis.pairs" => self.analysis.pairs = num(key, value)?,
            "analysis.max_points" => self.analysis.max_points = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {:?}", other))),
        }
        Ok(())
    }

    /// Parse `key=value` lines; `#` starts a comment, blank lines skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key=value, got {:?}", ln + 1, raw)));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
        let mut cfg = Config::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Every key in `set` order with its current value, for echoing the
    /// resolved configuration into run directories.
    pub fn flat(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{}={}", k, v);
        };
        put("seed", self.seed.to_string());
        put("model.layers", self.model.layers.to_string());
        put("model.width", self.model.width.to_string());
        put("model.heads", self.model.heads.to_string());
        put("model.seq_len", self.model.seq_len.to_string());
        put("model.ff", self.model.ff.to_string());
        put("model.vocab_cap", self.model.vocab_cap.to_string());
        put("model.dropout", self.model.dropout.to_string());
        put("mix.strategy", self.mix.strategy.name().to_string());
        put("mix.m_g", self.mix.m_g.to_string());
        put("mix.m_d", self.mix.m_d.to_string());
        put("mix.fixed_lambda", self.mix.fixed_lambda.to_string());
        put("mix.beta_a", self.mix.beta_a.to_string());
        put("mix.beta_max", self.mix.beta_max.to_string());
        put("mix.e_init", self.mix.e_init.to_string());
        put("mix.e_check_every", self.mix.e_check_every.to_string());
        put("mix.e_window", self.mix.e_window.to_string());
        put("mix.e_threshold", self.mix.e_threshold.to_string());
        put("mix.e_factor", self.mix.e_factor.to_string());
        put("mix.e_cap", self.mix.e_cap.to_string());
        put("mix.ld_form", self.mix.ld_form.name().to_string());
        put("mix.allow_equal", self.mix.allow_equal.to_string());
        put("train.lr_encoder", self.train.lr_encoder.to_string());
        put("train.lr_head", self.train.lr_head.to_string());
        put("train.batch", self.train.batch.to_string());
        put("train.warmup", self.train.warmup.to_string());
        put("train.eval_every", self.train.eval_every.to_string());
        put("train.patience", self.train.patience.to_string());
        put("train.max_steps", self.train.max_steps.to_string());
        put("train.beta1", self.train.beta1.to_string());
        put("train.beta2", self.train.beta2.to_string());
        put("train.eps", self.train.eps.to_string());
        put("train.clip", self.train.clip.to_string());
        put("data.source", self.data.source.clone());
        put("data.train", self.data.train.clone());
        put("data.test", self.data.test.clone());
        put("data.text_cols", self.data.text_cols.to_string());
        put("data.train_n", self.data.train_n.to_string());
        put("data.val_n", self.data.val_n.to_string());
        put("data.eda", self.data.eda.to_string());
        put("data.eda_p_insert", self.data.eda_p_insert.to_string());
        put("data.eda_p_delete", self.data.eda_p_delete.to_string());
        put("data.eda_p_swap", self.data.eda_p_swap.to_string());
        put("synth.classes", self.synth.classes.to_string());
        put("synth.keywords", self.synth.keywords.to_string());
        put("synth.q", self.synth.q.to_string());
        put("synth.vocab", self.synth.vocab.to_string());
        put("synth.length", self.synth.length.to_string());
        put("synth.train", self.synth.train.to_string());
        put("synth.val", self.synth.val.to_string());
        put("synth.test", self.synth.test.to_string());
        put("synth.label_noise", self.synth.label_noise.to_string());
        put("analysis.bins", self.analysis.bins.to_string());
        put("analysis.pca_target", self.analysis.pca_target.to_string());
        put("analysis.isomap_k", self.analysis.isomap_k.to_string());
        put("analysis.isomap_dims", self.analysis.isomap_dims.to_string());
        put("analysis.pairs", self.analysis.pairs.to_string());
        put("analysis.max_points", self.analysis.max_points.to_string());
        s
    }
}

/// Split a seed into independent per-subsystem streams.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over seed ⊕ tagged odd constant
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable tags for `derive_seed`; keeping them in one place avoids
/// accidental stream collisions.
pub mod seed_tags {
    pub const INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const PAIRS: u64 = 4;
    pub const GAMMA: u64 = 5;
    pub const SYNTH: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const EDA: u64 = 8;
    pub const ANALYSIS: u64 = 9;
}
