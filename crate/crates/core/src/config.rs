//! Experiment configuration: family defaults overlaid with a TOML file of dotted keys.
//!
//! ```toml
//! dataset.name = "one_moon"
//! dataset.noise_frac = 0.1
//! model.variant = "dpvae"
//! model.latent_dim = 2
//! train.lr_vae = 1e-3
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFamily {
    OneMoon,
    Circle,
    Mnist,
    FashionMnist,
    Dsprites,
}

impl DatasetFamily {
    pub const ALL: [DatasetFamily; 5] = [
        DatasetFamily::OneMoon,
        DatasetFamily::Circle,
        DatasetFamily::Mnist,
        DatasetFamily::FashionMnist,
        DatasetFamily::Dsprites,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetFamily::OneMoon => "one_moon",
            DatasetFamily::Circle => "circle",
            DatasetFamily::Mnist => "mnist",
            DatasetFamily::FashionMnist => "fashion_mnist",
            DatasetFamily::Dsprites => "dsprites",
        }
    }

    pub fn is_toy(self) -> bool {
        matches!(self, DatasetFamily::OneMoon | DatasetFamily::Circle)
    }

    /// (height, width) of image families.
    pub fn image_shape(self) -> Option<(usize, usize)> {
        match self {
            DatasetFamily::Mnist | DatasetFamily::FashionMnist => Some((28, 28)),
            DatasetFamily::Dsprites => Some((64, 64)),
            _ => None,
        }
    }

    pub fn data_dim(self) -> usize {
        self.image_shape().map(|(h, w)| h * w).unwrap_or(2)
    }
}

impl fmt::Display for DatasetFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown dataset family {s:?} (expected one of one_moon, circle, mnist, fashion_mnist, dsprites)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vae,
    Dpvae,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mlp,
    Conv,
}

/// How the relevance vector enters the flow prior of the dpVAE variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowAlpha {
    /// Standard-normal base, α absent from the latent prior.
    Off,
    /// Base density N(0, α⁻¹ I) on z₀ = g(z).
    Base,
    /// z is scaled by α^½ before the flow, with its log-determinant.
    Input,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceSource {
    /// 1/α from the relevance vector.
    Prior,
    /// Aggregate-posterior variance of the encoder on the evaluation set.
    Empirical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: DatasetFamily,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_frac: f64,
    pub radius: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub latent_dim: usize,
    pub architecture: Architecture,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    /// Convolution channels per stage (conv architecture only).
    pub conv_channels: Vec<usize>,
    pub flow_blocks: usize,
    pub flow_hidden: Vec<usize>,
    pub flow_scale_max: f64,
    pub flow_alpha: FlowAlpha,
    pub relevance_hidden: Vec<usize>,
    pub relevance_features: usize,
    pub prior_concentration: f64,
    pub prior_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub burnin: usize,
    pub lr_vae: f64,
    pub lr_ren: f64,
    pub r: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off unless set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_generate: usize,
    pub unbiased_energy: bool,
    pub variance_source: VarianceSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl TrainConfig {
    /// Defaults per dataset family.
    pub fn defaults(family: DatasetFamily) -> TrainConfig {
        let (epochs, batch_size) = match family {
            DatasetFamily::OneMoon | DatasetFamily::Circle => (1500, 128),
            DatasetFamily::Mnist | DatasetFamily::FashionMnist => (100, 100),
            DatasetFamily::Dsprites => (100, 128),
        };
        TrainConfig {
            epochs,
            burnin: epochs / 10,
            lr_vae: 1e-3,
            lr_ren: 1e-5,
            r: 4,
            batch_size,
            seed: 42,
            clip_norm: None,
        }
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.epochs == 0 {
            errors.push("train.epochs must be positive".into());
        }
        if self.burnin >= self.epochs && self.epochs > 0 {
            errors.push(format!(
                "train.burnin ({}) must be smaller than train.epochs ({})",
                self.burnin, self.epochs
            ));
        }
        if self.r == 0 {
            errors.push("train.r must be positive".into());
        }
        if self.batch_size == 0 {
            errors.push("train.batch_size must be positive".into());
        } else if self.r > 0 && self.batch_size % self.r != 0 {
            errors.push(format!(
                "train.batch_size ({}) must be divisible by train.r ({})",
                self.batch_size, self.r
            ));
        }
        if self.batch_size < 2 {
            errors.push("train.batch_size must be at least 2 for relevance inference".into());
        }
        for (key, lr) in [("train.lr_vae", self.lr_vae), ("train.lr_ren", self.lr_ren)] {
            if !(lr > 0.0 && lr.is_finite()) {
                errors.push(format!("{key} must be a positive finite number, got {lr}"));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                errors.push(format!("train.clip_norm must be positive, got {c}"));
            }
        }
    }
}

/// Training defaults for a family name.
pub fn default_config(family: &str) -> Result<TrainConfig> {
    Ok(TrainConfig::defaults(family.parse()?))
}

impl ModelConfig {
    pub fn defaults(family: DatasetFamily) -> ModelConfig {
        let (latent_dim, architecture, hidden, blocks) = match family {
            DatasetFamily::OneMoon | DatasetFamily::Circle => {
                (2, Architecture::Mlp, vec![64, 64], 4)
            }
            DatasetFamily::Mnist | DatasetFamily::FashionMnist => {
                (16, Architecture::Mlp, vec![512, 256], 6)
            }
            DatasetFamily::Dsprites => (10, Architecture::Conv, vec![256], 6),
        };
        ModelConfig {
            variant: Variant::Dpvae,
            latent_dim,
            architecture,
            hidden,
            conv_channels: vec![32, 64],
            flow_blocks: blocks,
            flow_hidden: vec![64, 64],
            flow_scale_max: 3.0,
            flow_alpha: FlowAlpha::Base,
            relevance_hidden: vec![64, 64],
            relevance_features: 128,
            prior_concentration: 1e-3,
            prior_rate: 1e-4,
        }
    }

    pub fn validate(&self, family: DatasetFamily, errors: &mut Vec<String>) {
        if self.latent_dim == 0 {
            errors.push("model.latent_dim must be at least 1".into());
        }
        if self.flow_blocks < 2 && self.variant == Variant::Dpvae {
            errors.push(format!(
                "model.flow_blocks must be at least 2, got {}",
                self.flow_blocks
            ));
        }
        if self.architecture == Architecture::Conv {
            match family.image_shape() {
                None => errors.push(format!(
                    "model.architecture = \"conv\" needs an image dataset, not {family}"
                )),
                Some((h, w)) => {
                    let f = 1usize << self.conv_channels.len();
                    if self.conv_channels.is_empty() {
                        errors.push("model.conv_channels must list at least one stage".into());
                    } else if h % f != 0 || w % f != 0 {
                        errors.push(format!(
                            "{} stride-2 conv stages do not divide the {h}x{w} image",
                            self.conv_channels.len()
                        ));
                    }
                }
            }
        }
        let widths = [
            ("model.hidden", &self.hidden),
            ("model.flow_hidden", &self.flow_hidden),
            ("model.relevance_hidden", &self.relevance_hidden),
            ("model.conv_channels", &self.conv_channels),
        ];
        for (key, w) in widths {
            if w.contains(&0) {
                errors.push(format!("{key} widths must be positive"));
            }
        }
        if self.relevance_features == 0 {
            errors.push("model.relevance_features must be positive".into());
        }
        if !(self.flow_scale_max > 0.0) {
            errors.push("model.flow_scale_max must be positive".into());
        }
        for (key, v) in [
            ("model.prior_concentration", self.prior_concentration),
            ("model.prior_rate", self.prior_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                errors.push(format!("{key} must be positive, got {v}"));
            }
        }
    }
}

impl DatasetConfig {
    pub fn defaults(family: DatasetFamily) -> DatasetConfig {
        DatasetConfig {
            name: family,
            n_train: 4096,
            n_test: 1024,
            noise_frac: 0.1,
            radius: 1.0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.n_train == 0 {
            errors.push("dataset.n_train must be positive".into());
        }
        if self.n_test < 2 {
            errors.push("dataset.n_test must be at least 2".into());
        }
        if self.name.is_toy() {
            if !(self.noise_frac >= 0.0 && self.noise_frac.is_finite()) {
                errors.push(format!(
                    "dataset.noise_frac must be non-negative, got {}",
                    self.noise_frac
                ));
            }
            if !(self.radius > 0.0 && self.radius.is_finite()) {
                errors.push(format!(
                    "dataset.radius must be positive, got {}",
                    self.radius
                ));
            }
        } else {
            let required = [
                ("dataset.train_images", &self.train_images),
                ("dataset.test_images", &self.test_images),
            ];
            for (key, p) in required {
                match p {
                    None => errors.push(format!("{key} is required for dataset {}", self.name)),
                    Some(p) if !p.exists() => {
                        errors.push(format!("{key}: {} does not exist", p.display()))
                    }
                    Some(_) => {}
                }
            }
            for (key, p) in [
                ("dataset.train_labels", &self.train_labels),
                ("dataset.test_labels", &self.test_labels),
            ] {
                if let Some(p) = p {
                    if !p.exists() {
                        errors.push(format!("{key}: {} does not exist", p.display()));
                    }
                }
            }
        }
    }
}

impl ExperimentConfig {
    pub fn defaults(family: DatasetFamily) -> ExperimentConfig {
        ExperimentConfig {
            output_dir: PathBuf::from("runs").join(family.name()),
            dataset: DatasetConfig::defaults(family),
            model: ModelConfig::defaults(family),
            train: TrainConfig::defaults(family),
            eval: EvalConfig {
                n_generate: 1024,
                unbiased_energy: false,
                variance_source: VarianceSource::Prior,
            },
        }
    }

    /// Parses a config file; relative dataset paths resolve against the file's directory.
    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = ExperimentConfig::parse(&text)?;
        for p in [
            &mut cfg.dataset.train_images,
            &mut cfg.dataset.train_labels,
            &mut cfg.dataset.test_images,
            &mut cfg.dataset.test_labels,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses config text without checking that referenced files exist.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![format!("syntax: {e}")]))?;
        let mut errors = Vec::new();
        let family = match lookup(&table, "dataset.name") {
            None => {
                errors.push("dataset.name is required".into());
                DatasetFamily::OneMoon
            }
            Some(Value::String(s)) => match s.parse() {
                Ok(f) => f,
                Err(e) => {
                    errors.push(format!("dataset.name: {e}"));
                    DatasetFamily::OneMoon
                }
            },
            Some(v) => {
                errors.push(format!(
                    "dataset.name must be a string, got {}",
                    v.type_str()
                ));
                DatasetFamily::OneMoon
            }
        };
        let mut cfg = ExperimentConfig::defaults(family);
        let mut o = Overlay {
            table: &table,
            errors: &mut errors,
            seen: vec!["dataset.name".to_string()],
        };
        o.path("output_dir", &mut cfg.output_dir);

        let d = &mut cfg.dataset;
        o.usize("dataset.n_train", &mut d.n_train);
        o.usize("dataset.n_test", &mut d.n_test);
        o.f64("dataset.noise_frac", &mut d.noise_frac);
        o.f64("dataset.radius", &mut d.radius);
        o.opt_path("dataset.train_images", &mut d.train_images);
        o.opt_path("dataset.train_labels", &mut d.train_labels);
        o.opt_path("dataset.test_images", &mut d.test_images);
        o.opt_path("dataset.test_labels", &mut d.test_labels);

        let m = &mut cfg.model;
        o.enumeration("model.variant", &mut m.variant);
        o.usize("model.latent_dim", &mut m.latent_dim);
        o.enumeration("model.architecture", &mut m.architecture);
        o.widths("model.hidden", &mut m.hidden);
        o.widths("model.conv_channels", &mut m.conv_channels);
        o.usize("model.flow_blocks", &mut m.flow_blocks);
        o.widths("model.flow_hidden", &mut m.flow_hidden);
        o.f64("model.flow_scale_max", &mut m.flow_scale_max);
        o.enumeration("model.flow_alpha", &mut m.flow_alpha);
        o.widths("model.relevance_hidden", &mut m.relevance_hidden);
        o.usize("model.relevance_features", &mut m.relevance_features);
        o.f64("model.prior_concentration", &mut m.prior_concentration);
        o.f64("model.prior_rate", &mut m.prior_rate);

        let t = &mut cfg.train;
        let epochs_set = lookup(&table, "train.epochs").is_some();
        o.usize("train.epochs", &mut t.epochs);
        if epochs_set {
            // burn-in tracks the epoch count unless given explicitly
            t.burnin = t.epochs / 10;
        }
        o.usize("train.burnin", &mut t.burnin);
        o.f64("train.lr_vae", &mut t.lr_vae);
        o.f64("train.lr_ren", &mut t.lr_ren);
        o.usize("train.r", &mut t.r);
        o.usize("train.batch_size", &mut t.batch_size);
        o.u64("train.seed", &mut t.seed);
        let mut clip = t.clip_norm.unwrap_or(0.0);
        if o.f64("train.clip_norm", &mut clip) {
            t.clip_norm = Some(clip);
        }

        let e = &mut cfg.eval;
        o.usize("eval.n_generate", &mut e.n_generate);
        o.bool("eval.unbiased_energy", &mut e.unbiased_energy);
        o.enumeration("eval.variance_source", &mut e.variance_source);

        let seen = std::mem::take(&mut o.seen);
        for key in flatten_keys(&table) {
            if !seen.contains(&key) {
                errors.push(format!("{key}: unknown key"));
            }
        }
        cfg.check_values(&mut errors);
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    fn check_values(&self, errors: &mut Vec<String>) {
        self.train.validate(errors);
        self.model.validate(self.dataset.name, errors);
        if self.dataset.n_train < self.train.batch_size {
            errors.push(format!(
                "dataset.n_train ({}) must be at least train.batch_size ({})",
                self.dataset.n_train, self.train.batch_size
            ));
        }
    }

    /// Full validation, including that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        self.check_values(&mut errors);
        self.dataset.validate(&mut errors);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn lookup<'a>(table: &'a Table, key: &str) -> Option<&'a Value> {
    let mut parts = key.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn flatten_keys(table: &Table) -> Vec<String> {
    fn walk(prefix: &str, t: &Table, out: &mut Vec<String>) {
        for (k, v) in t {
            let key = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match v {
                Value::Table(inner) => walk(&key, inner, out),
                _ => out.push(key),
            }
        }
    }
    let mut out = Vec::new();
    walk("", table, &mut out);
    out
}

struct Overlay<'a> {
    table: &'a Table,
    errors: &'a mut Vec<String>,
    seen: Vec<String>,
}

impl Overlay<'_> {
    fn get(&mut self, key: &str) -> Option<&Value> {
        self.seen.push(key.to_string());
        lookup(self.table, key)
    }

    fn mismatch(&mut self, key: &str, want: &str, got: &Value) {
        self.errors
            .push(format!("{key} must be {want}, got {}", got.type_str()));
    }

    fn usize(&mut self, key: &str, slot: &mut usize) -> bool {
        match self.get(key).cloned() {
            None => false,
            Some(Value::Integer(i)) if i >= 0 => {
                *slot = i as usize;
                true
            }
            Some(Value::Integer(i)) => {
                self.errors
                    .push(format!("{key} must be non-negative, got {i}"));
                false
            }
            Some(v) => {
                self.mismatch(key, "an integer", &v);
                false
            }
        }
    }

    fn u64(&mut self, key: &str, slot: &mut u64) -> bool {
        let mut v = 0usize;
        let ok = self.usize(key, &mut v);
        if ok {
            *slot = v as u64;
        }
        ok
    }

    fn f64(&mut self, key: &str, slot: &mut f64) -> bool {
        match self.get(key).cloned() {
            None => false,
            Some(Value::Float(x)) => {
                *slot = x;
                true
            }
            Some(Value::Integer(i)) => {
                *slot = i as f64;
                true
            }
            Some(v) => {
                self.mismatch(key, "a number", &v);
                false
            }
        }
    }

    fn bool(&mut self, key: &str, slot: &mut bool) -> bool {
        match self.get(key).cloned() {
            None => false,
            Some(Value::Boolean(b)) => {
                *slot = b;
                true
            }
            Some(v) => {
                self.mismatch(key, "a boolean", &v);
                false
            }
        }
    }

    fn path(&mut self, key: &str, slot: &mut PathBuf) -> bool {
        let mut p = None;
        let ok = self.opt_path(key, &mut p);
        if let Some(p) = p {
            *slot = p;
        }
        ok
    }

    fn opt_path(&mut self, key: &str, slot: &mut Option<PathBuf>) -> bool {
        match self.get(key).cloned() {
            None => false,
            Some(Value::String(s)) => {
                *slot = Some(PathBuf::from(s));
                true
            }
            Some(v) => {
                self.mismatch(key, "a path string", &v);
                false
            }
        }
    }

    fn widths(&mut self, key: &str, slot: &mut Vec<usize>) -> bool {
        match self.get(key).cloned() {
            None => false,
            Some(Value::Array(items)) => {
                let mut out = Vec::with_capacity(items.len());
                for it in &items {
                    match it {
                        Value::Integer(i) if *i > 0 => out.push(*i as usize),
                        other => {
                            self.errors.push(format!(
                                "{key} entries must be positive integers, got {other}"
                            ));
                            return false;
                        }
                    }
                }
                *slot = out;
                true
            }
            Some(v) => {
                self.mismatch(key, "an array of integers", &v);
                false
            }
        }
    }

    fn enumeration<T: for<'de> Deserialize<'de>>(&mut self, key: &str, slot: &mut T) -> bool {
        match self.get(key).cloned() {
            None => false,
            Some(Value::String(s)) => match T::deserialize(Value::String(s.clone())) {
                Ok(v) => {
                    *slot = v;
                    true
                }
                Err(_) => {
                    self.errors.push(format!("{key}: unrecognized value {s:?}"));
                    false
                }
            },
            Some(v) => {
                self.mismatch(key, "a string", &v);
                false
            }
        }
    }
}
