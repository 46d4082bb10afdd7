use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use topocnn::data::{AugmentConfig, SubsetCaps, SyntheticSpec};
use topocnn::models::{Attachment, Family, ModelSpec};
use topocnn::topo_loss::SimilarityMode;
use topocnn::trainer::TrainConfig;
use topocnn::Scheme;

pub const DATA_ROOT_ENV: &str = "TOPOCNN_DATA_ROOT";

/// Documentation of every run-config key, shown by `train --help`.
pub const CONFIG_KEYS: &str = "\
CONFIG KEYS (flat TOML; unknown keys are rejected)
  dataset                  cifar10 | mnist | synthetic                 [cifar10]
  data_root                dataset directory; falls back to $TOPOCNN_DATA_ROOT
  train_cap                stratified cap on training examples         [all]
  val_cap                  validation examples carved from dev set     [dev/10]
  test_cap                 stratified cap on test examples             [all]
  split_seed               seed of the train/val split                 [0]
  synthetic_dev_examples   synthetic development-set size              [2000]
  synthetic_test_examples  synthetic test-set size                     [500]
  synthetic_channels       synthetic image channels                    [3]
  synthetic_size           synthetic image height = width              [32]
  synthetic_noise          synthetic pixel noise std                   [0.2]
  synthetic_seed           synthetic generator seed                    [0]
  model                    small_vgg | small_resnet                    [small_vgg]
  widths                   stage widths, e.g. [32, 64, 128, 256]       [family default]
  attachment               default | none                              [default]
  topo_layers              explicit list of conv ids to attach         [unset]
  dtype                    f32 | f64                                   [f32]
  epochs                   training epochs                             [20]
  batch_size               mini-batch size                             [128]
  lr0                      peak learning rate                          [0.01]
  momentum                 SGD momentum                                [0.9]
  weight_decay             coupled L2 weight decay                     [0.01]
  warmup_fraction          fraction of steps with linear warmup        [0.3]
  seed                     initialization / shuffling seed             [0]
  augment                  random crop + flip                          [true]
  augment_pad              crop padding                                [4]
  flip                     horizontal flips (disable for digits)       [true]
  lambda                   topographic loss weight, 0 = baseline       [0]
  scheme                   grid2d | nested2d | circle | grid3d | nested3d | sphere  [grid2d]
  similarity               per_sample | pooled                         [per_sample]
  output_dir               where checkpoint, sidecar and metrics go    [runs/default]
";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Cifar10,
    Mnist,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttachRule {
    Default,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DTypeName {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetName,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_cap: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_cap: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_cap: Option<usize>,
    pub split_seed: u64,
    pub synthetic_dev_examples: usize,
    pub synthetic_test_examples: usize,
    pub synthetic_channels: usize,
    pub synthetic_size: usize,
    pub synthetic_noise: f64,
    pub synthetic_seed: u64,

    pub model: Family,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
    pub attachment: AttachRule,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topo_layers: Option<Vec<String>>,
    pub dtype: DTypeName,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub augment: bool,
    pub augment_pad: usize,
    pub flip: bool,

    pub lambda: f64,
    pub scheme: Scheme,
    pub similarity: SimilarityMode,

    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = SyntheticSpec::default();
        RunConfig {
            dataset: DatasetName::Cifar10,
            data_root: None,
            train_cap: None,
            val_cap: None,
            test_cap: None,
            split_seed: 0,
            synthetic_dev_examples: s.dev_examples,
            synthetic_test_examples: s.test_examples,
            synthetic_channels: s.channels,
            synthetic_size: s.size,
            synthetic_noise: s.noise,
            synthetic_seed: s.seed,
            model: Family::SmallVgg,
            widths: None,
            attachment: AttachRule::Default,
            topo_layers: None,
            dtype: DTypeName::F32,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr0: t.lr0,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            warmup_fraction: t.warmup_fraction,
            seed: t.seed,
            augment: true,
            augment_pad: 4,
            flip: true,
            lambda: t.lambda,
            scheme: t.scheme,
            similarity: t.similarity,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            batch_size: self.batch_size,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            warmup_fraction: self.warmup_fraction,
            lambda: self.lambda,
            scheme: self.scheme,
            similarity: self.similarity,
            augment: self.augment.then_some(AugmentConfig { pad: self.augment_pad, flip: self.flip }),
            seed: self.seed,
        }
    }

    pub fn caps(&self) -> SubsetCaps {
        SubsetCaps { train: self.train_cap, val: self.val_cap, test: self.test_cap }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 10,
            channels: self.synthetic_channels,
            size: self.synthetic_size,
            dev_examples: self.synthetic_dev_examples,
            test_examples: self.synthetic_test_examples,
            noise: self.synthetic_noise,
            max_shift: SyntheticSpec::default().max_shift,
            seed: self.synthetic_seed,
        }
    }

    /// Input geometry implied by the dataset: `(channels, size)`.
    pub fn input_geometry(&self) -> (usize, usize) {
        match self.dataset {
            DatasetName::Cifar10 => (3, 32),
            DatasetName::Mnist => (1, 28),
            DatasetName::Synthetic => (self.synthetic_channels, self.synthetic_size),
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let (c, size) = self.input_geometry();
        let mut spec = ModelSpec::new(self.model, c, size, 10);
        if let Some(w) = &self.widths {
            spec.widths = w.clone();
        }
        spec.attachment = match (&self.topo_layers, self.attachment) {
            (Some(ids), _) => Attachment::Explicit(ids.clone()),
            (None, AttachRule::None) => Attachment::None,
            (None, AttachRule::Default) => Attachment::Default,
        };
        spec
    }

    pub fn data_root(&self) -> Option<PathBuf> {
        self.data_root.clone().or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
    }

    /// Whole-config checks that do not need the data.
    pub fn validate(&self) -> Result<(), String> {
        self.train_config().validate().map_err(|e| e.to_string().replace("invalid argument: ", ""))?;
        if self.augment_pad > 16 {
            return Err("augment_pad: must be at most 16".into());
        }
        for (name, cap) in [("train_cap", self.train_cap), ("val_cap", self.val_cap), ("test_cap", self.test_cap)] {
            if cap == Some(0) {
                return Err(format!("{name}: must be positive"));
            }
        }
        if self.dataset == DatasetName::Synthetic {
            if self.synthetic_channels == 0 || self.synthetic_size < 4 {
                return Err("synthetic_channels / synthetic_size: need at least 1 channel and size 4".into());
            }
            if !(self.synthetic_noise >= 0.0) {
                return Err("synthetic_noise: must be >= 0".into());
            }
        }
        if let Some(w) = &self.widths {
            if w.is_empty() || w.contains(&0) {
                return Err("widths: must be a non-empty list of positive integers".into());
            }
            if self.lambda > 0.0 && w.contains(&1) {
                return Err("widths: topographic layers need at least 2 channels".into());
            }
        }
        if self.lambda > 0.0 && self.attachment == AttachRule::None && self.topo_layers.is_none() {
            return Err("lambda: positive weight but attachment = \"none\" leaves no topographic layers".into());
        }
        if self.topo_layers.as_ref().is_some_and(|l| l.is_empty()) && self.lambda > 0.0 {
            return Err("topo_layers: empty list with positive lambda".into());
        }
        topocnn::Model::<f32>::new(self.model_spec(), 0).map(|_| ()).map_err(|e| format!("model: {e}"))
    }
}
