//! Run configuration: a flat `key = value` file layered over a named preset,
//! with command-line overrides applied last.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::bridge::{CentralSpace, RowMarginal, TrainConfig};
use crate::error::{Error, Result};
use crate::ot::PrototypeSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Opt,
    T5,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Opt => "opt",
            Preset::T5 => "t5",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "opt" => Ok(Preset::Opt),
            "t5" => Ok(Preset::T5),
            other => Err(Error::InvalidValue(format!("unknown preset `{other}` (desk, opt, t5)"))),
        }
    }

    pub fn train_config(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::default(),
            Preset::Opt => TrainConfig::opt_scale(),
            Preset::T5 => TrainConfig::t5_scale(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_name: String,
    pub preset: Preset,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub train: TrainConfig,
    /// Size of the learnable central space when `central = prototypes`.
    pub prototype_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_preset(Preset::Desk)
    }
}

/// Every key accepted in a config file, in canonical order.
pub const KEYS: &[&str] = &[
    "run_name",
    "preset",
    "data_dir",
    "out_dir",
    "lr",
    "warmup_steps",
    "total_steps",
    "batch_size",
    "adamw_beta1",
    "adamw_beta2",
    "adamw_eps",
    "weight_decay",
    "seed",
    "bias",
    "central",
    "prototype_count",
    "marginal",
    "gap_every",
    "eps",
    "tol",
    "max_iter",
    "log_domain",
    "tau",
    "lambda_map",
    "lambda_cap",
    "lambda_itc",
    "lambda_itm",
    "itc_temperature",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::InvalidValue(format!("`{key}`: cannot parse `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::InvalidValue(format!("`{key}` must be true or false, got `{v}`"))),
    }
}

impl RunConfig {
    pub fn from_preset(preset: Preset) -> Self {
        Self {
            run_name: "run".into(),
            preset,
            data_dir: None,
            out_dir: None,
            train: preset.train_config(),
            prototype_count: PrototypeSpace::DEFAULT_COUNT,
        }
    }

    /// Sets one key. Setting `preset` records the name only; [`parse_config`]
    /// applies the preset's values before any other key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "run_name" => {
                if v.is_empty() || v.contains(char::is_whitespace) {
                    return Err(Error::InvalidValue("run_name must be nonempty without whitespace".into()));
                }
                self.run_name = v.to_string();
            }
            "preset" => self.preset = Preset::parse(v)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            "lr" => t.lr = num(key, v)?,
            "warmup_steps" => t.warmup_steps = num(key, v)?,
            "total_steps" => t.total_steps = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "adamw_beta1" => t.adamw.beta1 = num(key, v)?,
            "adamw_beta2" => t.adamw.beta2 = num(key, v)?,
            "adamw_eps" => t.adamw.eps = num(key, v)?,
            "weight_decay" => t.adamw.weight_decay = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "bias" => t.bias = boolean(key, v)?,
            "central" => {
                t.central = match v {
                    "words" => CentralSpace::Words,
                    "prototypes" => CentralSpace::Prototypes(self.prototype_count),
                    _ => return Err(Error::InvalidValue(format!("central must be words or prototypes, got `{v}`"))),
                }
            }
            "prototype_count" => {
                self.prototype_count = num(key, v)?;
                if let CentralSpace::Prototypes(_) = t.central {
                    t.central = CentralSpace::Prototypes(self.prototype_count);
                }
            }
            "marginal" => {
                t.marginal = match v {
                    "words" => RowMarginal::WordFrequency,
                    "uniform" => RowMarginal::Uniform,
                    _ => return Err(Error::InvalidValue(format!("marginal must be words or uniform, got `{v}`"))),
                }
            }
            "gap_every" => t.gap_every = num(key, v)?,
            "eps" => t.solver.eps = num(key, v)?,
            "tol" => t.solver.tol = num(key, v)?,
            "max_iter" => t.solver.max_iter = num(key, v)?,
            "log_domain" => t.solver.log_domain = boolean(key, v)?,
            "tau" => t.loss.tau = num(key, v)?,
            "lambda_map" => t.loss.lambda_map = num(key, v)?,
            "lambda_cap" => t.loss.lambda_cap = num(key, v)?,
            "lambda_itc" => t.loss.lambda_itc = num(key, v)?,
            "lambda_itm" => t.loss.lambda_itm = num(key, v)?,
            "itc_temperature" => t.loss.itc_temperature = num(key, v)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.prototype_count == 0 {
            return Err(Error::InvalidValue("prototype_count must be at least 1".into()));
        }
        self.train.validate()
    }

    pub fn require_data_dir(&self) -> Result<&Path> {
        self.data_dir.as_deref().ok_or(Error::MissingPath("data_dir"))
    }

    pub fn require_out_dir(&self) -> Result<&Path> {
        self.out_dir.as_deref().ok_or(Error::MissingPath("out_dir"))
    }

    /// Every key with its effective value, one `key = value` line each, in
    /// [`KEYS`] order. Floats use shortest round-trip formatting, so parsing
    /// the output reproduces this config exactly.
    pub fn to_canonical_string(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut line = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        line("run_name", self.run_name.clone());
        line("preset", self.preset.name().into());
        if let Some(p) = &self.data_dir {
            line("data_dir", p.display().to_string());
        }
        if let Some(p) = &self.out_dir {
            line("out_dir", p.display().to_string());
        }
        line("lr", format!("{:?}", t.lr));
        line("warmup_steps", t.warmup_steps.to_string());
        line("total_steps", t.total_steps.to_string());
        line("batch_size", t.batch_size.to_string());
        line("adamw_beta1", format!("{:?}", t.adamw.beta1));
        line("adamw_beta2", format!("{:?}", t.adamw.beta2));
        line("adamw_eps", format!("{:?}", t.adamw.eps));
        line("weight_decay", format!("{:?}", t.adamw.weight_decay));
        line("seed", t.seed.to_string());
        line("bias", t.bias.to_string());
        line(
            "central",
            match t.central {
                CentralSpace::Words => "words".into(),
                CentralSpace::Prototypes(_) => "prototypes".into(),
            },
        );
        line("prototype_count", self.prototype_count.to_string());
        line(
            "marginal",
            match t.marginal {
                RowMarginal::WordFrequency => "words".into(),
                RowMarginal::Uniform => "uniform".into(),
            },
        );
        line("gap_every", t.gap_every.to_string());
        line("eps", format!("{:?}", t.solver.eps));
        line("tol", format!("{:?}", t.solver.tol));
        line("max_iter", t.solver.max_iter.to_string());
        line("log_domain", t.solver.log_domain.to_string());
        line("tau", format!("{:?}", t.loss.tau));
        line("lambda_map", format!("{:?}", t.loss.lambda_map));
        line("lambda_cap", format!("{:?}", t.loss.lambda_cap));
        line("lambda_itc", format!("{:?}", t.loss.lambda_itc));
        line("lambda_itm", format!("{:?}", t.loss.lambda_itm));
        line("itc_temperature", format!("{:?}", t.loss.itc_temperature));
        s
    }
}

/// Parses `key = value` lines; `#` starts a comment. Duplicate keys keep the last value.
pub fn parse_pairs(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Malformed {
            path: origin.to_path_buf(),
            reason: format!("line {}: expected key = value", i + 1),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) =
        s.split_once('=').ok_or_else(|| Error::InvalidValue(format!("override `{s}` is not of the form key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Builds the effective config: preset defaults, then the file, then
/// `overrides`. The preset is taken from the overrides if given there,
/// else from the file, else `desk`. Unknown keys are rejected and the
/// result is validated.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let file_pairs = match path {
        Some(p) => parse_pairs(&fs::read_to_string(p)?, p)?,
        None => Vec::new(),
    };
    let all: Vec<&(String, String)> = file_pairs.iter().chain(overrides).collect();
    for (k, _) in &all {
        if !KEYS.contains(&k.as_str()) {
            return Err(Error::UnknownKey(k.clone()));
        }
    }
    let preset = match all.iter().rev().find(|(k, _)| k == "preset") {
        Some((_, v)) => Preset::parse(v)?,
        None => Preset::Desk,
    };
    let mut cfg = RunConfig::from_preset(preset);
    // prototype_count first so `central = prototypes` picks it up regardless of order
    for (k, v) in all.iter().filter(|(k, _)| k == "prototype_count") {
        cfg.set(k, v)?;
    }
    for (k, v) in all.iter().filter(|(k, _)| k != "preset" && k != "prototype_count") {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), text).unwrap();
        f
    }

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn empty_file_gives_desk_defaults() {
        let f = write("");
        let cfg = parse_config(Some(f.path()), &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.preset, Preset::Desk);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn overrides_beat_the_file() {
        let f = write("eps = 0.05\n# comment\nlambda_map = 0.2 # trailing\n");
        let cfg = parse_config(Some(f.path()), &ov(&[("eps", "0.01")])).unwrap();
        assert_eq!(cfg.train.solver.eps, 0.01);
        assert_eq!(cfg.train.loss.lambda_map, 0.2);
    }

    #[test]
    fn opt_and_t5_presets() {
        let cfg = parse_config(None, &ov(&[("preset", "opt")])).unwrap();
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.warmup_steps, 1500);
        assert_eq!(cfg.train.total_steps, 30_000);
        assert_eq!(cfg.train.batch_size, 128);
        let t5 = parse_config(None, &ov(&[("preset", "t5")])).unwrap();
        assert_eq!(
            (t5.train.lr, t5.train.warmup_steps, t5.train.batch_size, t5.train.total_steps),
            (5e-3, 3000, 256, 15_000)
        );
    }

    #[test]
    fn file_keys_apply_on_top_of_a_later_preset() {
        let f = write("total_steps = 2000\npreset = opt\n");
        let cfg = parse_config(Some(f.path()), &[]).unwrap();
        assert_eq!(cfg.train.total_steps, 2000);
        assert_eq!(cfg.train.batch_size, 128);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(parse_config(None, &ov(&[("learning_rate", "1")])), Err(Error::UnknownKey(_))));
        assert!(matches!(parse_config(None, &ov(&[("lr", "fast")])), Err(Error::InvalidValue(_))));
        assert!(matches!(parse_config(None, &ov(&[("lr", "-1")])), Err(Error::InvalidValue(_))));
        assert!(matches!(
            parse_config(None, &ov(&[("warmup_steps", "50"), ("total_steps", "10")])),
            Err(Error::InvalidValue(_))
        ));
        let f = write("no equals sign here\n");
        assert!(matches!(parse_config(Some(f.path()), &[]), Err(Error::Malformed { .. })));
        assert!(matches!(RunConfig::default().require_data_dir(), Err(Error::MissingPath("data_dir"))));
    }

    #[test]
    fn canonical_form_round_trips() {
        let cfg = parse_config(
            None,
            &ov(&[
                ("lr", "0.0033"),
                ("central", "prototypes"),
                ("prototype_count", "17"),
                ("marginal", "uniform"),
                ("data_dir", "/tmp/d"),
                ("lambda_itc", "0.1"),
                ("bias", "false"),
                ("run_name", "x1"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.train.central, CentralSpace::Prototypes(17));
        let text = cfg.to_canonical_string();
        let f = write(&text);
        let back = parse_config(Some(f.path()), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_canonical_string(), text);
    }
}
