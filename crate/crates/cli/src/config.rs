//! Key = value config files for training runs. Lines are `key = value`,
//! blank lines and `#` comments ignored. CLI flags override file values.

use std::path::Path;

use pas3d_core::error::{Error, Result};
use pas3d_core::training::TrainConfig;

/// Training settings plus the model-scaling knobs shared by `train` and
/// `campaign`.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub train: TrainConfig,
    pub width_multiplier: f64,
    pub input_shape: (i64, i64, i64),
    pub dropout: Option<f64>,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            train: TrainConfig::default(),
            width_multiplier: 1.0,
            input_shape: (128, 128, 64),
            dropout: None,
        }
    }
}

/// Parse an `HxWxD` shape such as `128x128x64`.
pub fn parse_shape(s: &str) -> Result<(i64, i64, i64)> {
    let parts: Vec<&str> = s.split('x').collect();
    let bad = || Error::Config(format!("expected HxWxD shape like 128x128x64, got '{s}'"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut dims = [0i64; 3];
    for (d, p) in dims.iter_mut().zip(&parts) {
        *d = p.parse().map_err(|_| bad())?;
        if *d < 1 {
            return Err(bad());
        }
    }
    Ok((dims[0], dims[1], dims[2]))
}

impl RunSettings {
    /// Load from a key = value file.
    pub fn from_file(path: impl AsRef<Path>) -> Result<RunSettings> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut s = RunSettings::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            s.apply(key.trim(), value.trim()).map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(s)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
        }
        match key {
            "initial_lr" | "lr" => self.train.initial_lr = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "epochs" => self.train.epochs = num(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            "plateau_factor" => self.train.plateau.factor = num(key, value)?,
            "plateau_patience" => self.train.plateau.patience = num(key, value)?,
            "min_lr" => self.train.plateau.min_lr = num(key, value)?,
            "grad_clip" => {
                self.train.grad_clip = match value {
                    "none" | "off" => None,
                    v => Some(num(key, v)?),
                }
            }
            "stop_at_train_accuracy" => {
                self.train.stop_at_train_accuracy = Some(num(key, value)?)
            }
            "width_multiplier" => self.width_multiplier = num(key, value)?,
            "input_shape" => self.input_shape = parse_shape(value)?,
            "dropout" => self.dropout = Some(num(key, value)?),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }
}
