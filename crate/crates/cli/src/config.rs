//! Flat `key = value` run configuration with a fixed schema.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    FloatList,
    /// A float, or `auto`.
    FloatOrAuto,
    Choice(&'static [&'static str]),
}

struct Key {
    name: &'static str,
    kind: Kind,
    default: &'static str,
    help: &'static str,
}

const fn key(name: &'static str, kind: Kind, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        kind,
        default,
        help,
    }
}

const MODELS: &[&str] = &["crnn", "nn", "lstm", "cnn", "convlstm"];

const SCHEMA: &[Key] = &[
    key("lat_min", Kind::Float, "24.0", "southern grid edge (degrees)"),
    key("lat_max", Kind::Float, "25.0", "northern grid edge"),
    key("lon_min", Kind::Float, "120.5", "western grid edge"),
    key("lon_max", Kind::Float, "121.5", "eastern grid edge"),
    key("rows", Kind::Int, "20", "grid rows"),
    key("cols", Kind::Int, "20", "grid columns"),
    key("subsample", Kind::Int, "32", "per-axis Voronoi subsamples per sector"),
    key(
        "fill",
        Kind::Choice(&["zero", "nearest"]),
        "zero",
        "value for sectors no node covers",
    ),
    key("period", Kind::Int, "7200", "bucket length in seconds"),
    key("window", Kind::Int, "12", "input steps"),
    key("horizon", Kind::Int, "12", "forecast steps"),
    key(
        "theta_max",
        Kind::FloatOrAuto,
        "auto",
        "normalization constant; auto uses the training maximum",
    ),
    key(
        "train_fraction",
        Kind::Float,
        "0.7",
        "leading share of frames used for training",
    ),
    key(
        "val_fraction",
        Kind::Float,
        "0.0",
        "share of training windows held out for validation",
    ),
    key("eval_stride", Kind::Int, "6", "offset between evaluation sequences"),
    key("model", Kind::Choice(MODELS), "crnn", "architecture"),
    key("blocks", Kind::Int, "4", "crnn conv/convlstm blocks"),
    key("filters", Kind::Int, "16", "crnn block width"),
    key("penultimate", Kind::Int, "20", "crnn last convlstm width"),
    key("kernel", Kind::Int, "3", "spatial kernel size"),
    key("width", Kind::Int, "16", "comparator hidden width"),
    key("batch_size", Kind::Int, "20", "mini-batch size"),
    key("epochs", Kind::Int, "500", "training epochs"),
    key("lr", Kind::Float, "0.0002", "initial learning-rate multiplier"),
    key("decay_factor", Kind::Float, "0.8", "plateau reduction factor"),
    key("patience", Kind::Int, "10", "plateau patience in epochs"),
    key(
        "checkpoint_every",
        Kind::Int,
        "0",
        "epochs between checkpoints; 0 disables",
    ),
    key("sigmas", Kind::FloatList, "0, 0.1, 0.2", "noise levels for sweeps"),
    key("noise_seeds", Kind::Int, "10", "noise realizations per level"),
    key("steps", Kind::Int, "600", "synthetic plume steps"),
    key("spinup", Kind::Int, "48", "plume steps discarded before output"),
    key("diffusion", Kind::Float, "0.06", "plume diffusion (cells^2 per step)"),
    key("wind_speed", Kind::Float, "0.5", "plume wind speed (cells per step)"),
    key("wind_period", Kind::Float, "240", "steps per full wind rotation"),
    key(
        "boundary",
        Kind::Choice(&["outflow", "periodic"]),
        "outflow",
        "plume boundary",
    ),
    key("emission_jitter", Kind::Float, "0.1", "relative emission fluctuation"),
    key("sensors", Kind::Int, "0", "virtual nodes; 0 places one per sector"),
    key("read_noise", Kind::Float, "0", "sensor read-noise std (µg/m³)"),
    key("dropout", Kind::Float, "0", "probability a reading is lost"),
    key("seed", Kind::Int, "0", "seed when --seed is not given"),
];

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: SCHEMA.iter().map(|k| (k.name, k.default.to_string())).collect(),
        }
    }
}

fn check(k: &Key, value: &str) -> Result<(), ConfigError> {
    let bad = |what: &str| err(format!("`{}` expects {what}, got `{value}`", k.name));
    match k.kind {
        Kind::Int => value
            .parse::<u64>()
            .map(drop)
            .map_err(|_| bad("a non-negative integer")),
        Kind::Float => match value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(()),
            _ => Err(bad("a finite number")),
        },
        Kind::FloatOrAuto => match value {
            "auto" => Ok(()),
            v => match v.parse::<f64>() {
                Ok(x) if x.is_finite() && x > 0.0 => Ok(()),
                _ => Err(bad("a positive number or `auto`")),
            },
        },
        Kind::FloatList => {
            for part in value.split(',') {
                match part.trim().parse::<f64>() {
                    Ok(v) if v.is_finite() && v >= 0.0 => {}
                    _ => return Err(bad("a comma-separated list of non-negative numbers")),
                }
            }
            Ok(())
        }
        Kind::Choice(options) => {
            if options.contains(&value) {
                Ok(())
            } else {
                Err(bad(&format!("one of {}", options.join(", "))))
            }
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let spec = SCHEMA
                .iter()
                .find(|s| s.name == k)
                .ok_or_else(|| err(format!("line {}: unknown key `{k}`", i + 1)))?;
            check(spec, v).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
            cfg.values.insert(spec.name, v.to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|e| err(format!("cannot read config {}: {e}", p.display())))?;
                RunConfig::parse(&text)
            }
        }
    }

    fn raw(&self, k: &str) -> &str {
        self.values
            .get(k)
            .unwrap_or_else(|| panic!("`{k}` is not a config key"))
    }

    pub fn usize(&self, k: &str) -> usize {
        self.raw(k).parse().expect("validated")
    }

    pub fn u64(&self, k: &str) -> u64 {
        self.raw(k).parse().expect("validated")
    }

    pub fn f64(&self, k: &str) -> f64 {
        self.raw(k).parse().expect("validated")
    }

    pub fn str(&self, k: &str) -> &str {
        self.raw(k)
    }

    /// `None` for `auto`.
    pub fn f64_or_auto(&self, k: &str) -> Option<f64> {
        match self.raw(k) {
            "auto" => None,
            v => Some(v.parse().expect("validated")),
        }
    }

    pub fn f64_list(&self, k: &str) -> Vec<f64> {
        self.raw(k)
            .split(',')
            .map(|p| p.trim().parse().expect("validated"))
            .collect()
    }

    /// Every key with its current value, in schema order.
    pub fn entries(&self) -> Vec<(String, String)> {
        SCHEMA
            .iter()
            .map(|k| (k.name.to_string(), self.raw(k.name).to_string()))
            .collect()
    }

    /// A commented template listing every key with its default.
    pub fn template() -> String {
        let mut out = String::new();
        for k in SCHEMA {
            out.push_str(&format!("# {}\n{} = {}\n", k.help, k.name, k.default));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = RunConfig::parse("# comment\nrows = 8 # trailing\n\nsigmas = 0, 0.3\ntheta_max = 150\n").unwrap();
        assert_eq!(cfg.usize("rows"), 8);
        assert_eq!(cfg.usize("cols"), 20);
        assert_eq!(cfg.f64_list("sigmas"), vec![0.0, 0.3]);
        assert_eq!(cfg.f64_or_auto("theta_max"), Some(150.0));
        assert_eq!(RunConfig::default().f64_or_auto("theta_max"), None);
    }

    #[test]
    fn schema_violations() {
        for bad in [
            "colour = red",
            "rows = -1",
            "rows",
            "lr = nan",
            "model = transformer",
            "theta_max = 0",
            "sigmas = 0.1, x",
        ] {
            assert!(RunConfig::parse(bad).is_err(), "{bad}");
        }
        assert!(RunConfig::parse("colour = red")
            .unwrap_err()
            .to_string()
            .contains("unknown key `colour`"));
    }

    #[test]
    fn template_parses_to_defaults() {
        let cfg = RunConfig::parse(&RunConfig::template()).unwrap();
        assert_eq!(cfg.entries(), RunConfig::default().entries());
    }
}
