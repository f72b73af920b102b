//! Run configuration: strict TOML with per-section defaults.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::error::{Result, TideError};
use crate::objective::{GameVariant, LossWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Excitatory share of `d_model`.
    pub excitatory_fraction: f64,
    /// Internal computation steps `T`.
    pub ticks: usize,
    pub tau_e: f64,
    pub tau_i: f64,
    pub dt: f64,
    pub classes: usize,
    /// Image `[C, H, W]`.
    pub input_shape: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d_model: 256, excitatory_fraction: 0.8, ticks: 50, tau_e: 20.0, tau_i: 5.0, dt: 1.0, classes: 10, input_shape: [1, 28, 28] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NlmConfig {
    pub window: usize,
    pub hidden: usize,
}

impl Default for NlmConfig {
    fn default() -> Self {
        Self { window: 25, hidden: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyncConfig {
    pub d_ee: usize,
    pub d_ei: usize,
    pub d_ii: usize,
    /// Pair counts; each defaults to its stream width.
    pub p_ee: Option<usize>,
    pub p_ei: Option<usize>,
    pub p_ii: Option<usize>,
    pub clamp: Option<f64>,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self { d_ee: 256, d_ei: 128, d_ii: 64, p_ee: None, p_ei: None, p_ii: None, clamp: None }
    }
}

impl SyncConfig {
    pub fn d_sync(&self) -> usize {
        self.d_ee + self.d_ei + self.d_ii
    }

    pub fn pairs(&self) -> [usize; 3] {
        [self.p_ee.unwrap_or(self.d_ee), self.p_ei.unwrap_or(self.d_ei), self.p_ii.unwrap_or(self.d_ii)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub d_attn: usize,
    pub heads: usize,
    pub dropout: f64,
    pub residual: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { d_attn: 512, heads: 8, dropout: 0.1, residual: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WtaConfig {
    pub k_max: usize,
    pub gamma: f64,
    pub tol: f64,
    /// Auxiliary pool size; defaults to `n_I`.
    pub n_lat: Option<usize>,
}

impl Default for WtaConfig {
    fn default() -> Self {
        Self { k_max: 5, gamma: 0.1, tol: 1e-4, n_lat: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub d_mem: usize,
    pub theta: f64,
    pub mu: f64,
    /// Keep `m`, `v` across forward passes; otherwise they restart at zero
    /// for every sequence. Off by default: with the gate open `m` grows
    /// without bound across batches.
    pub persistent: bool,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self { d_mem: 256, theta: 0.5, mu: 0.9, persistent: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: 256, dropout: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_ei: f64,
    pub lambda_game: f64,
    pub lambda_sync: f64,
    pub lambda_spec: f64,
    pub tau_ee: f64,
    pub tau_ii: f64,
    pub rho_star: f64,
    pub t_s: u64,
    pub t_w: u64,
    pub game_variant: GameVariant,
    pub d_e: f64,
    pub d_i: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_ei: w.lambda_ei,
            lambda_game: w.lambda_game,
            lambda_sync: w.lambda_sync,
            lambda_spec: 0.0,
            tau_ee: w.tau_ee,
            tau_ii: w.tau_ii,
            rho_star: w.rho_star,
            t_s: w.t_s,
            t_w: w.t_w,
            game_variant: GameVariant::Energy,
            d_e: 1.0,
            d_i: 1.0,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_ei: self.lambda_ei,
            lambda_game: self.lambda_game,
            lambda_sync: self.lambda_sync,
            lambda_spec: self.lambda_spec,
            tau_ee: self.tau_ee,
            tau_ii: self.tau_ii,
            rho_star: self.rho_star,
            t_s: self.t_s,
            t_w: self.t_w,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub clip: f64,
    /// Truncated BPTT horizon in internal steps; 0 means full.
    pub tbptt: usize,
    pub seed: u64,
    pub eval_interval: u64,
    pub monitor_interval: u64,
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            lr: 1e-3,
            warmup: 1000,
            total_steps: 50_000,
            weight_decay: 1e-4,
            clip: 1.0,
            tbptt: 0,
            seed: 42,
            eval_interval: 1000,
            monitor_interval: 100,
            checkpoint_interval: 5000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `mnist`, `fashion-mnist`, `blobs` or `bars`.
    pub dataset: String,
    /// Directory holding the IDX files; falls back to `TIDE_DATA_DIR`.
    pub dir: Option<String>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Sample count for the synthetic tasks.
    pub synthetic_n: usize,
    pub mean: f64,
    pub std: f64,
    pub corruptions: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: "mnist".into(),
            dir: None,
            train_limit: None,
            test_limit: None,
            synthetic_n: 512,
            mean: 0.1307,
            std: 0.3081,
            corruptions: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub nlm: NlmConfig,
    pub sync: SyncConfig,
    pub attention: AttentionConfig,
    pub wta: WtaConfig,
    pub memory: MemoryConfig,
    pub head: HeadConfig,
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| TideError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TideError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_toml().as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn n_e(&self) -> usize {
        (self.model.excitatory_fraction * self.model.d_model as f64).round() as usize
    }

    pub fn n_i(&self) -> usize {
        self.model.d_model - self.n_e()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TideError::Config(m));
        let m = &self.model;
        if !(0.0..1.0).contains(&m.excitatory_fraction) || self.n_e() == 0 || self.n_i() == 0 {
            return bad(format!("d_model {} with fraction {} leaves an empty population", m.d_model, m.excitatory_fraction));
        }
        if m.ticks == 0 || m.classes < 2 {
            return bad("ticks must be ≥ 1 and classes ≥ 2".into());
        }
        if !(m.tau_e > 0.0 && m.tau_i > 0.0 && m.dt > 0.0) {
            return bad("time constants and dt must be positive".into());
        }
        let a = &self.attention;
        if a.heads == 0 || a.d_attn % a.heads != 0 {
            return bad(format!("d_attn {} is not divisible by {} heads", a.d_attn, a.heads));
        }
        if self.nlm.window == 0 || self.nlm.hidden == 0 {
            return bad("nlm window and hidden must be positive".into());
        }
        let s = &self.sync;
        let [pe, pei, pii] = s.pairs();
        let (ne, ni) = (self.n_e(), self.n_i());
        if pe > ne * ne || pei > ne * ni || pii > ni * ni {
            return bad(format!("sync pair counts {:?} exceed the pair spaces", s.pairs()));
        }
        if s.d_ee == 0 || s.d_ei == 0 || s.d_ii == 0 || pe == 0 || pei == 0 || pii == 0 {
            return bad("sync widths and pair counts must be positive".into());
        }
        if self.wta.k_max == 0 || self.wta.gamma < 0.0 {
            return bad("wta k_max must be ≥ 1 and gamma ≥ 0".into());
        }
        let t = &self.train;
        if t.batch == 0 || t.total_steps <= t.warmup || t.lr < 0.0 || t.clip <= 0.0 {
            return bad("train: batch ≥ 1, total_steps > warmup, lr ≥ 0, clip > 0 required".into());
        }
        if self.loss.t_w == 0 || self.loss.d_e <= 0.0 || self.loss.d_i <= 0.0 {
            return bad("loss: t_w, d_e, d_i must be positive".into());
        }
        if self.data.std <= 0.0 {
            return bad("data std must be positive".into());
        }
        for c in [a.dropout, self.head.dropout] {
            if !(0.0..1.0).contains(&c) {
                return bad(format!("dropout {c} outside [0, 1)"));
            }
        }
        Ok(())
    }

    /// Desk-scale MNIST configuration.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.model.d_model = 64;
        c.model.ticks = 10;
        c.sync = SyncConfig { d_ee: 32, d_ei: 16, d_ii: 16, ..SyncConfig::default() };
        c.attention.d_attn = 32;
        c.attention.heads = 4;
        c.memory.d_mem = 32;
        c.head.hidden = 64;
        c.backbone = BackboneConfig {
            stem_channels: 8,
            branch_channels: 8,
            agg_channels: 32,
            stem_stride: 2,
            ..BackboneConfig::default()
        };
        c.loss.t_s = 200;
        c.loss.t_w = 800;
        c.train.batch = 32;
        c.train.warmup = 100;
        c.train.total_steps = 2000;
        c.train.eval_interval = 500;
        c.train.checkpoint_interval = 1000;
        c.data.train_limit = Some(2000);
        c.data.test_limit = Some(1000);
        c
    }

    /// Seconds-scale two-class synthetic configuration on 8×8 images.
    pub fn tiny() -> Self {
        let mut c = Self::default();
        c.model = ModelConfig { d_model: 16, ticks: 4, classes: 2, input_shape: [1, 8, 8], ..ModelConfig::default() };
        c.nlm = NlmConfig { window: 4, hidden: 4 };
        c.sync = SyncConfig { d_ee: 12, d_ei: 6, d_ii: 4, ..SyncConfig::default() };
        c.attention = AttentionConfig { d_attn: 8, heads: 2, dropout: 0.0, residual: true };
        c.memory.d_mem = 8;
        c.head = HeadConfig { hidden: 8, dropout: 0.0 };
        c.backbone = BackboneConfig {
            stem_channels: 4,
            branch_channels: 4,
            agg_channels: 8,
            grid: 2,
            allow_custom_shape: true,
            ..BackboneConfig::default()
        };
        c.loss.t_s = 20;
        c.loss.t_w = 50;
        c.train.batch = 16;
        c.train.lr = 1e-2;
        c.train.warmup = 10;
        c.train.total_steps = 200;
        c.train.eval_interval = 100;
        c.train.monitor_interval = 50;
        c.train.checkpoint_interval = 100;
        c.data.dataset = "blobs".into();
        c.data.synthetic_n = 128;
        c
    }
}
