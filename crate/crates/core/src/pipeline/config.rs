//! Flat TOML pipeline configuration.
//!
//! Every key is optional; omitted keys take the defaults below. Relative
//! paths are resolved against the directory holding the config file.
//!
//! ```toml
//! mode = "ead-rbm"          # ead-rbm | ead-dbm | s-rbm | s-dbm
//! seed = 0
//! frames = "train/frames"   # input frames for train / detect / stream
//! ground_truth = "gt"       # mask directory for eval
//! model_dir = "bundle"
//! output_dir = "out"
//! scales = [1.0, 0.5, 0.25]
//! patch_height = 12
//! patch_width = 18
//! stride_v = 6
//! stride_h = 9
//! cluster_hidden = 4        # clustering RBM
//! region_hidden = 100       # region RBMs
//! dbm_cluster_hidden = 4
//! dbm_recon_hidden = 200
//! epochs = 500              # clustering and region RBMs
//! learning_rate = 0.1
//! cd_steps = 1
//! batch_size = 100
//! dbm_epochs = 500
//! dbm_learning_rate = 0.001
//! dbm_chains = 100
//! pretrain_epochs = 50
//! pretrain_learning_rate = 0.001
//! mean_field_tol = 1e-4
//! mean_field_iters = 30
//! reduced_hidden = 100      # hidden units kept when shrinking the DBM
//! finetune_epochs = 50
//! beta = 0.0035             # default depends on mode
//! gamma = 10
//! aggregation = "max"       # max | mean; default depends on mode
//! chunk_len = 20
//! stream_epochs = 20
//! stream_learning_rate = 0.1
//! alpha = 5.0               # dual-pixel precision, percent
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dbm::{DbmTrainConfig, MeanFieldConfig};
use crate::detector::{Aggregation, DetectorConfig};
use crate::error::{Error, Result};
use crate::ingest::PatchSpec;
use crate::rbm::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    EadRbm,
    EadDbm,
    SRbm,
    SDbm,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::EadRbm => "ead-rbm",
            Mode::EadDbm => "ead-dbm",
            Mode::SRbm => "s-rbm",
            Mode::SDbm => "s-dbm",
        }
    }

    pub fn is_streaming(self) -> bool {
        matches!(self, Mode::SRbm | Mode::SDbm)
    }

    pub fn uses_dbm(self) -> bool {
        matches!(self, Mode::EadDbm | Mode::SDbm)
    }

    /// Whether detection reconstructs with per-region RBMs.
    pub fn has_region_rbms(self) -> bool {
        self != Mode::EadDbm
    }

    pub fn default_beta(self) -> f64 {
        match self {
            Mode::EadRbm => 0.0035,
            Mode::EadDbm => 0.0043,
            Mode::SRbm | Mode::SDbm => 0.003,
        }
    }

    pub fn default_aggregation(self) -> Aggregation {
        if self.uses_dbm() {
            Aggregation::Mean
        } else {
            Aggregation::Max
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ead-rbm" => Ok(Mode::EadRbm),
            "ead-dbm" => Ok(Mode::EadDbm),
            "s-rbm" => Ok(Mode::SRbm),
            "s-dbm" => Ok(Mode::SDbm),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationName {
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub seed: u64,
    pub frames: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub model_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub scales: Vec<f64>,
    pub patch_height: usize,
    pub patch_width: usize,
    pub stride_v: usize,
    pub stride_h: usize,
    pub cluster_hidden: usize,
    pub region_hidden: usize,
    pub dbm_cluster_hidden: usize,
    pub dbm_recon_hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub cd_steps: usize,
    pub batch_size: usize,
    pub dbm_epochs: usize,
    pub dbm_learning_rate: f64,
    pub dbm_chains: usize,
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,
    pub mean_field_tol: f64,
    pub mean_field_iters: usize,
    pub reduced_hidden: usize,
    pub finetune_epochs: usize,
    pub beta: Option<f64>,
    pub gamma: usize,
    pub aggregation: Option<AggregationName>,
    pub chunk_len: usize,
    pub stream_epochs: usize,
    pub stream_learning_rate: f64,
    pub alpha: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: Mode::EadRbm,
            seed: 0,
            frames: None,
            ground_truth: None,
            model_dir: None,
            output_dir: None,
            scales: vec![1.0, 0.5, 0.25],
            patch_height: 12,
            patch_width: 18,
            stride_v: 6,
            stride_h: 9,
            cluster_hidden: 4,
            region_hidden: 100,
            dbm_cluster_hidden: 4,
            dbm_recon_hidden: 200,
            epochs: 500,
            learning_rate: 0.1,
            cd_steps: 1,
            batch_size: 100,
            dbm_epochs: 500,
            dbm_learning_rate: 0.001,
            dbm_chains: 100,
            pretrain_epochs: 50,
            pretrain_learning_rate: 0.001,
            mean_field_tol: 1e-4,
            mean_field_iters: 30,
            reduced_hidden: 100,
            finetune_epochs: 50,
            beta: None,
            gamma: 10,
            aggregation: None,
            chunk_len: 20,
            stream_epochs: 20,
            stream_learning_rate: 0.1,
            alpha: 5.0,
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub beta: Option<f64>,
    pub gamma: Option<usize>,
    pub scales: Option<Vec<f64>>,
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Everything that determines the trained models; hashed into the bundle.
#[derive(Serialize)]
struct ModelKey<'a> {
    mode: Mode,
    seed: u64,
    scales: &'a [f64],
    patch: [usize; 4],
    hidden: [usize; 5],
    rbm: (usize, f64, usize, usize),
    dbm: (usize, f64, usize, usize, f64),
    mean_field: (f64, usize),
    finetune_epochs: usize,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read, parse and resolve relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.frames,
            &mut cfg.ground_truth,
            &mut cfg.model_dir,
            &mut cfg.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(v) = o.beta {
            self.beta = Some(v);
        }
        if let Some(v) = o.gamma {
            self.gamma = v;
        }
        if let Some(v) = &o.scales {
            self.scales = v.clone();
        }
        if let Some(v) = o.mode {
            self.mode = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.output_dir = Some(v.clone());
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return bad(format!("scales must be non-empty ratios in (0, 1]: {:?}", self.scales));
        }
        let positive = [
            ("patch_height", self.patch_height),
            ("patch_width", self.patch_width),
            ("stride_v", self.stride_v),
            ("stride_h", self.stride_h),
            ("cluster_hidden", self.cluster_hidden),
            ("region_hidden", self.region_hidden),
            ("dbm_cluster_hidden", self.dbm_cluster_hidden),
            ("dbm_recon_hidden", self.dbm_recon_hidden),
            ("cd_steps", self.cd_steps),
            ("batch_size", self.batch_size),
            ("dbm_chains", self.dbm_chains),
            ("reduced_hidden", self.reduced_hidden),
            ("gamma", self.gamma),
            ("chunk_len", self.chunk_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.cluster_hidden > 8 || self.dbm_cluster_hidden > 8 {
            return bad("clustering layers are limited to 8 units (256 regions)".into());
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("dbm_learning_rate", self.dbm_learning_rate),
            ("pretrain_learning_rate", self.pretrain_learning_rate),
            ("stream_learning_rate", self.stream_learning_rate),
            ("mean_field_tol", self.mean_field_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a positive number"));
            }
        }
        if self.beta.is_some_and(|b| !(b > 0.0 && b.is_finite())) {
            return bad("beta must be positive".into());
        }
        if !(0.0..=100.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 100]", self.alpha));
        }
        if self.mode == Mode::SDbm && self.reduced_hidden > self.dbm_recon_hidden {
            return bad(format!(
                "reduced_hidden {} exceeds dbm_recon_hidden {}",
                self.reduced_hidden, self.dbm_recon_hidden
            ));
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or_else(|| self.mode.default_beta())
    }

    pub fn aggregation(&self) -> Aggregation {
        match self.aggregation {
            Some(AggregationName::Max) => Aggregation::Max,
            Some(AggregationName::Mean) => Aggregation::Mean,
            None => self.mode.default_aggregation(),
        }
    }

    pub fn patch_spec(&self, scale: f64) -> Result<PatchSpec> {
        PatchSpec::new(self.patch_height, self.patch_width, self.stride_v, self.stride_h, scale)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            beta: self.beta(),
            gamma: self.gamma,
            aggregation: self.aggregation(),
            chunk_len: self.chunk_len,
        }
    }

    pub fn mean_field(&self) -> MeanFieldConfig {
        MeanFieldConfig {
            tol: self.mean_field_tol,
            max_iters: self.mean_field_iters,
        }
    }

    /// CD settings for clustering and region RBMs.
    pub fn rbm_training(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            cd_steps: self.cd_steps,
            batch_size: self.batch_size,
            seed,
        }
    }

    pub fn dbm_training(&self, seed: u64) -> DbmTrainConfig {
        DbmTrainConfig {
            epochs: self.dbm_epochs,
            learning_rate: self.dbm_learning_rate,
            batch_size: self.batch_size,
            chains: self.dbm_chains,
            pretrain_epochs: self.pretrain_epochs,
            pretrain_learning_rate: self.pretrain_learning_rate,
            mean_field: self.mean_field(),
            seed,
        }
    }

    pub fn finetune_training(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.finetune_epochs,
            ..self.rbm_training(seed)
        }
    }

    pub fn stream_training(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.stream_epochs,
            learning_rate: self.stream_learning_rate,
            ..self.rbm_training(seed)
        }
    }

    /// Hex SHA-256 of the settings that shape trained models.
    pub fn model_hash(&self) -> String {
        let key = ModelKey {
            mode: self.mode,
            seed: self.seed,
            scales: &self.scales,
            patch: [self.patch_height, self.patch_width, self.stride_v, self.stride_h],
            hidden: [
                self.cluster_hidden,
                self.region_hidden,
                self.dbm_cluster_hidden,
                self.dbm_recon_hidden,
                self.reduced_hidden,
            ],
            rbm: (self.epochs, self.learning_rate, self.cd_steps, self.batch_size),
            dbm: (
                self.dbm_epochs,
                self.dbm_learning_rate,
                self.dbm_chains,
                self.pretrain_epochs,
                self.pretrain_learning_rate,
            ),
            mean_field: (self.mean_field_tol, self.mean_field_iters),
            finetune_epochs: self.finetune_epochs,
        };
        let text = toml::to_string(&key).expect("model key serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn require_path<'a>(&self, p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        p.as_deref()
            .ok_or_else(|| Error::Config(format!("missing `{key}`")))
    }
}
