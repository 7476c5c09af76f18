//! Training configuration and model description, loadable from JSON.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backward::ScalePairing;
use crate::clip::MCSHyper;
use crate::conv::ConvSpec;
use crate::error::{Error, Result};

/// Arithmetic used for the convolution layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Float forward and backward.
    #[serde(rename = "fp32")]
    Fp32,
    /// INT8 forward; per-channel gradient scales with magnitude-aware clipping.
    #[default]
    #[serde(rename = "int8-da")]
    Int8Da,
    /// INT8 forward; one gradient scale per layer.
    #[serde(rename = "int8-gq")]
    Int8Gq,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Fp32, Mode::Int8Da, Mode::Int8Gq];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Fp32 => "fp32",
            Mode::Int8Da => "int8-da",
            Mode::Int8Gq => "int8-gq",
        }
    }

    pub fn is_quantized(self) -> bool {
        self != Mode::Fp32
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}; expected fp32, int8-da or int8-gq")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant { lr: f32 },
    /// `lr · gamma^k` where `k` counts milestones (in epochs) already reached.
    Multistep { lr: f32, milestones: Vec<u64>, gamma: f32 },
}

impl LrSchedule {
    pub fn at_epoch(&self, epoch: u64) -> f32 {
        match self {
            LrSchedule::Constant { lr } => *lr,
            LrSchedule::Multistep { lr, milestones, gamma } => {
                let reached = milestones.iter().filter(|&&m| epoch >= m).count();
                lr * gamma.powi(reached as i32)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let (lr, gamma) = match self {
            LrSchedule::Constant { lr } => (*lr, 1.0),
            LrSchedule::Multistep { lr, gamma, .. } => (*lr, *gamma),
        };
        if !(lr > 0.0 && lr.is_finite()) || !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("learning rate {lr} and gamma {gamma} must be positive")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub rounding: u64,
    pub data: u64,
}

impl Seeds {
    /// Init, shuffle and rounding seeds derived from one run seed; the data seed is kept.
    pub fn for_run(self, run: u64) -> Seeds {
        Seeds {
            init: run,
            shuffle: run.wrapping_add(0x5eed_0001),
            rounding: run.wrapping_add(0x5eed_0002),
            data: self.data,
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            init: 0,
            shuffle: 0x5eed_0001,
            rounding: 0x5eed_0002,
            data: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Seeded Gaussian-blob images, one blob layout per class.
    Synthetic {
        train: usize,
        val: usize,
        #[serde(default = "default_image_size")]
        size: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        /// Standard deviation of per-pixel noise.
        #[serde(default = "default_noise")]
        noise: f32,
    },
    /// IDX image/label file pairs.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        val_images: PathBuf,
        val_labels: PathBuf,
        #[serde(default = "default_classes")]
        classes: usize,
    },
}

fn default_image_size() -> usize {
    16
}

fn default_classes() -> usize {
    10
}

fn default_noise() -> f32 {
    0.15
}

impl DatasetSource {
    pub fn classes(&self) -> usize {
        match self {
            DatasetSource::Synthetic { classes, .. } | DatasetSource::Idx { classes, .. } => *classes,
        }
    }
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic {
            train: 2000,
            val: 500,
            size: 16,
            classes: 10,
            noise: default_noise(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default = "default_one")]
        padding: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    /// Per-channel float scale and shift.
    Affine,
    /// Fully connected classifier; must be the last layer.
    Linear {
        out_features: usize,
    },
}

fn default_kernel() -> usize {
    3
}

fn default_one() -> usize {
    1
}

impl LayerSpec {
    pub fn conv(out_channels: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `(channels, height, width)` of one input image.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Shape bookkeeping result for one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Planned {
    pub spec: LayerSpec,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ModelSpec {
    /// The default four-conv network for 16×16 single-channel images.
    pub fn desk(classes: usize) -> Self {
        ModelSpec {
            input: [1, 16, 16],
            layers: vec![
                LayerSpec::conv(8),
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::conv(16),
                LayerSpec::Relu,
                LayerSpec::conv(32),
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::conv(32),
                LayerSpec::Relu,
                LayerSpec::Linear { out_features: classes },
            ],
        }
    }

    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, LayerSpec::Conv { .. })).count()
    }

    pub fn classes(&self) -> Option<usize> {
        match self.layers.last() {
            Some(LayerSpec::Linear { out_features }) => Some(*out_features),
            _ => None,
        }
    }

    /// Walks the layer list, checking that consecutive shapes fit.
    pub(crate) fn plan(&self) -> Result<Vec<Planned>> {
        let bad = |i: usize, msg: String| Error::Config(format!("layer {i}: {msg}"));
        if self.input.contains(&0) {
            return Err(Error::Config(format!("input extents {:?} must be positive", self.input)));
        }
        if self.conv_count() == 0 {
            return Err(Error::Config("the model needs at least one conv layer".into()));
        }
        let mut shape = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, &spec) in self.layers.iter().enumerate() {
            let next = match spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if out_channels == 0 {
                        return Err(bad(i, "conv needs at least one output channel".into()));
                    }
                    let conv = ConvSpec::square(kernel, stride, padding).map_err(|e| bad(i, e.to_string()))?;
                    let (h, w) = conv.output_hw((shape[1], shape[2])).map_err(|e| bad(i, e.to_string()))?;
                    [out_channels, h, w]
                }
                LayerSpec::Relu | LayerSpec::Affine => shape,
                LayerSpec::MaxPool { size } => {
                    if size == 0 || shape[1] < size || shape[2] < size {
                        return Err(bad(i, format!("pool size {size} does not fit {}×{}", shape[1], shape[2])));
                    }
                    [shape[0], shape[1] / size, shape[2] / size]
                }
                LayerSpec::Linear { out_features } => {
                    if i + 1 != self.layers.len() {
                        return Err(bad(i, "the linear classifier must be the last layer".into()));
                    }
                    if out_features == 0 {
                        return Err(bad(i, "linear layer needs at least one output".into()));
                    }
                    [out_features, 1, 1]
                }
            };
            out.push(Planned {
                spec,
                input: shape,
                output: next,
            });
            shape = next;
        }
        if self.classes().is_none() {
            return Err(Error::Config("the model must end with a linear classifier".into()));
        }
        Ok(out)
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::desk(10)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub hyper: MCSHyper,
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seeds: Seeds,
    pub dataset: DatasetSource,
    pub model: ModelSpec,
    /// Iterations between metrics records.
    pub log_every: u64,
    /// Magnitude exponent of the diagnostic quantization error.
    pub alpha: f32,
    /// Keep the first conv layer in float.
    pub exempt_first: bool,
    /// Keep the last conv layer in float.
    pub exempt_last: bool,
    pub pairing: ScalePairing,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Int8Da,
            hyper: MCSHyper::default(),
            epochs: 20,
            batch_size: 32,
            lr: LrSchedule::Constant { lr: 0.02 },
            momentum: 0.9,
            weight_decay: 5e-4,
            seeds: Seeds::default(),
            dataset: DatasetSource::default(),
            model: ModelSpec::default(),
            log_every: 50,
            alpha: 0.2,
            exempt_first: false,
            exempt_last: false,
            pairing: ScalePairing::OperandConsistent,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.lr.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay {} must be non-negative", self.weight_decay)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be non-negative", self.alpha)));
        }
        self.model.plan()?;
        let classes = self.dataset.classes();
        if self.model.classes() != Some(classes) {
            return Err(Error::Config(format!(
                "classifier has {:?} outputs but the dataset has {classes} classes",
                self.model.classes()
            )));
        }
        if let DatasetSource::Synthetic {
            train, val, size, noise, ..
        } = self.dataset
        {
            if train == 0 || val == 0 || size < 4 || !(noise >= 0.0) {
                return Err(Error::Config("synthetic dataset needs train, val > 0, size ≥ 4, noise ≥ 0".into()));
            }
            if self.model.input != [1, size, size] {
                return Err(Error::Config(format!(
                    "model input {:?} does not match synthetic images [1, {size}, {size}]",
                    self.model.input
                )));
            }
        }
        Ok(())
    }

    /// Whether conv layer `index` (of `count`) runs the INT8 path.
    pub fn conv_quantized(&self, index: usize, count: usize) -> bool {
        self.mode.is_quantized() && !(self.exempt_first && index == 0) && !(self.exempt_last && index + 1 == count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_roundtrips() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn partial_json_uses_defaults() {
        let cfg = TrainConfig::from_json(r#"{"mode": "fp32", "epochs": 3, "hyper": {"k": 1.2, "A": 0.5}}"#).unwrap();
        assert_eq!(cfg.mode, Mode::Fp32);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.hyper.k, 1.2);
        assert_eq!(cfg.batch_size, 32);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(TrainConfig::from_json(r#"{"batch_size": 0}"#), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_json(r#"{"bogus": 1}"#), Err(Error::Config(_))));
        assert!(matches!(
            TrainConfig::from_json(r#"{"hyper": {"k": 1.5, "A": 0.8}}"#),
            Err(Error::Config(_))
        ));
        assert!(TrainConfig::from_json(r#"{"hyper": {"k": 1.5, "A": 0.8, "allow_oscillation": true}}"#).is_ok());
        let mut cfg = TrainConfig::default();
        cfg.model.layers.retain(|l| !matches!(l, LayerSpec::Conv { .. }));
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.model.layers.swap(0, 10);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn plan_tracks_shapes() {
        let plan = ModelSpec::desk(10).plan().unwrap();
        assert_eq!(plan[0].output, [8, 16, 16]);
        assert_eq!(plan[2].output, [8, 8, 8]);
        assert_eq!(plan[7].output, [32, 4, 4]);
        assert_eq!(plan[10].input, [32, 4, 4]);
        assert_eq!(plan[10].output, [10, 1, 1]);
    }

    #[test]
    fn schedules() {
        let m = LrSchedule::Multistep {
            lr: 0.1,
            milestones: vec![5, 10],
            gamma: 0.1,
        };
        assert_eq!(m.at_epoch(4), 0.1);
        assert!((m.at_epoch(5) - 0.01).abs() < 1e-9);
        assert!((m.at_epoch(12) - 0.001).abs() < 1e-9);
        assert_eq!("int8-gq".parse::<Mode>().unwrap(), Mode::Int8Gq);
        assert!("int4".parse::<Mode>().is_err());
    }

    #[test]
    fn exemptions() {
        let mut cfg = TrainConfig {
            exempt_first: true,
            ..TrainConfig::default()
        };
        assert!(!cfg.conv_quantized(0, 4));
        assert!(cfg.conv_quantized(3, 4));
        cfg.exempt_last = true;
        assert!(!cfg.conv_quantized(3, 4));
        cfg.mode = Mode::Fp32;
        assert!(!cfg.conv_quantized(1, 4));
    }
}
