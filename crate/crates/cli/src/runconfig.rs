//! `key = value` training configuration files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lognet::lognum::AccumMode;
use lognet::train::{LrSchedule, Optimizer, TrainConfig};

use crate::error::{CliError, CliResult};
use crate::parse;

/// Where training and test samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Shapes {
        train: usize,
        test: usize,
        size: usize,
        noise: f64,
        seed: u64,
    },
    Separable {
        train: usize,
        test: usize,
        seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test: Option<(PathBuf, PathBuf)>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arch: String,
    pub train: TrainConfig,
    pub data: DataSource,
    pub out_dir: PathBuf,
    /// Epochs between numbered checkpoints; the latest model is always kept.
    pub checkpoint_every: usize,
}

/// Keys accepted in a configuration file.
pub const KEYS: &[&str] = &[
    "arch",
    "preset",
    "epochs",
    "batch_size",
    "seed",
    "optimizer",
    "lr",
    "momentum",
    "beta1",
    "beta2",
    "lr_decay_every",
    "lr_decay_factor",
    "weight_q",
    "activation_q",
    "gradient_q",
    "accum",
    "augment",
    "fsr_floor",
    "bn_momentum",
    "bn_refresh",
    "data",
    "train_samples",
    "test_samples",
    "image_size",
    "noise",
    "data_seed",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "out_dir",
    "checkpoint_every",
];

struct Entries {
    map: BTreeMap<String, String>,
    base: PathBuf,
}

impl Entries {
    fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim().to_ascii_lowercase();
            if !KEYS.contains(&k.as_str()) {
                return Err(CliError::usage(format!("line {}: unknown key `{k}`", n + 1)));
            }
            if map.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(CliError::usage(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(Self {
            map,
            base: base.to_path_buf(),
        })
    }

    fn str(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.str(key)
            .map(|v| v.parse::<T>().map_err(|e| bad(key, e)))
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.str(key).map(|p| self.base.join(p))
    }

    fn require_path(&self, key: &str) -> CliResult<PathBuf> {
        self.path(key)
            .ok_or_else(|| CliError::usage(format!("key `{key}` is required")))
    }
}

fn bad(key: &str, e: impl std::fmt::Display) -> CliError {
    CliError::usage(format!("key `{key}`: {e}"))
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::open(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses `text`; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let e = Entries::parse(text, base)?;
        let arch = e
            .str("arch")
            .ok_or_else(|| CliError::usage("key `arch` is required"))?
            .to_string();
        lognet::nn::parse_arch(&arch).map_err(|err| bad("arch", err))?;

        let mut t = match e.str("preset").unwrap_or("float") {
            "float" => TrainConfig::float(),
            "log" => TrainConfig::log_quantized(),
            other => return Err(bad("preset", format!("unknown preset `{other}` (expected float or log)"))),
        };
        t.epochs = e.or("epochs", t.epochs)?;
        t.batch_size = e.or("batch_size", t.batch_size)?;
        t.seed = e.or("seed", t.seed)?;
        t.augment = e.or("augment", t.augment)?;
        t.fsr_floor = e.or("fsr_floor", t.fsr_floor)?;
        t.bn_momentum = e.or("bn_momentum", t.bn_momentum)?;
        t.bn_refresh = e.or("bn_refresh", t.bn_refresh)?;
        if let Some(a) = e.get::<AccumMode>("accum")? {
            t.accum = a;
        }
        for (key, slot) in [
            ("weight_q", &mut t.weight_q),
            ("activation_q", &mut t.activation_q),
            ("gradient_q", &mut t.gradient_q),
        ] {
            if let Some(v) = e.str(key) {
                *slot = parse::quantizer(v).map_err(|err| bad(key, err))?;
            }
        }

        let lr = e.or("lr", t.optimizer.lr())?;
        t.optimizer = match e.str("optimizer").unwrap_or(match t.optimizer {
            Optimizer::SgdMomentum { .. } => "sgd",
            Optimizer::Adam { .. } => "adam",
        }) {
            "sgd" => {
                for k in ["beta1", "beta2"] {
                    if e.str(k).is_some() {
                        return Err(bad(k, "only used by adam"));
                    }
                }
                Optimizer::sgd(lr, e.or("momentum", 0.9)?)
            }
            "adam" => {
                if e.str("momentum").is_some() {
                    return Err(bad("momentum", "only used by sgd"));
                }
                match Optimizer::adam(lr) {
                    Optimizer::Adam { eps, beta1, beta2, .. } => Optimizer::Adam {
                        lr,
                        beta1: e.or("beta1", beta1)?,
                        beta2: e.or("beta2", beta2)?,
                        eps,
                    },
                    o => o,
                }
            }
            other => return Err(bad("optimizer", format!("unknown optimizer `{other}` (expected sgd or adam)"))),
        };
        t.schedule = match (e.get::<usize>("lr_decay_every")?, e.get::<f64>("lr_decay_factor")?) {
            (None, None) => LrSchedule::Constant,
            (Some(every), factor) if every > 0 => LrSchedule::StepDecay {
                every,
                factor: factor.unwrap_or(0.1),
            },
            (Some(_), _) => return Err(bad("lr_decay_every", "must be positive")),
            (None, Some(_)) => return Err(bad("lr_decay_factor", "needs lr_decay_every")),
        };
        t.validate().map_err(|err| CliError::usage(err.to_string()))?;

        let seed = e.or("data_seed", 1u64)?;
        let data = match e.str("data").unwrap_or("shapes") {
            "shapes" => DataSource::Shapes {
                train: e.or("train_samples", 2000)?,
                test: e.or("test_samples", 500)?,
                size: e.or("image_size", 12)?,
                noise: e.or("noise", lognet::data::DEFAULT_SHAPES_NOISE)?,
                seed,
            },
            "separable" => DataSource::Separable {
                train: e.or("train_samples", 1000)?,
                test: e.or("test_samples", 250)?,
                seed,
            },
            "idx" => DataSource::Idx {
                train_images: e.require_path("train_images")?,
                train_labels: e.require_path("train_labels")?,
                test: match (e.path("test_images"), e.path("test_labels")) {
                    (Some(i), Some(l)) => Some((i, l)),
                    (None, None) => None,
                    _ => return Err(bad("test_images", "test_images and test_labels go together")),
                },
            },
            other => {
                return Err(bad(
                    "data",
                    format!("unknown data source `{other}` (expected shapes, separable or idx)"),
                ))
            }
        };
        let checkpoint_every = e.or("checkpoint_every", 1usize)?;
        if checkpoint_every == 0 {
            return Err(bad("checkpoint_every", "must be positive"));
        }
        Ok(Self {
            arch,
            train: t,
            data,
            out_dir: e.path("out_dir").unwrap_or_else(|| base.to_path_buf()),
            checkpoint_every,
        })
    }
}
