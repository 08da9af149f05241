//! Settings resolution: command-line flags override a key=value config file,
//! which overrides built-in defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use gpbart::sampler::{Hyperparams, Variant};
use gpbart::{Error, Result};
use sha2::{Digest, Sha256};

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "GPBART_WORKERS";

macro_rules! settings {
    ($($field:ident => $key:literal : $help:literal,)*) => {
        /// Flags shared by every subcommand. Each flag has a config-file key
        /// of the same name.
        #[derive(Args, Debug, Default, Clone)]
        pub struct Flags {
            /// Plain-text key=value file; flags given on the command line win.
            #[arg(long, value_name = "PATH")]
            pub config: Option<PathBuf>,
            /// Progress lines on standard error.
            #[arg(long, short)]
            pub verbose: bool,
            $(
                #[doc = $help]
                #[arg(long = $key, value_name = "VALUE")]
                pub $field: Option<String>,
            )*
        }

        pub const KEYS: &[&str] = &["verbose", $($key),*];

        impl Flags {
            fn given(&self) -> BTreeMap<String, String> {
                let mut m = BTreeMap::new();
                if self.verbose {
                    m.insert("verbose".to_string(), "true".to_string());
                }
                $(
                    if let Some(v) = &self.$field {
                        m.insert($key.to_string(), v.clone());
                    }
                )*
                m
            }
        }
    };
}

settings! {
    input => "input": "Input CSV.",
    output => "output": "Output file (predict, simulate).",
    out_dir => "out-dir": "Output directory (fit, benchmark).",
    posterior => "posterior": "Posterior file written by fit.",
    target => "target": "Target column name.",
    categorical => "categorical": "Comma-separated categorical columns.",
    ignore => "ignore": "Comma-separated columns to leave out of the model.",
    gp_columns => "gp-columns": "Comma-separated kernel columns [default: all continuous].",
    rotation_columns => "rotation-columns": "Comma-separated rotation columns [default: all continuous].",
    variant => "variant": "Model variant A, B, C or D [default: D].",
    variants => "variants": "Comma-separated variants to compare [default: A,B,C,D].",
    trees => "trees": "Number of trees [default: 10].",
    n_mcmc => "n-mcmc": "Total MCMC iterations [default: 2000].",
    n_burnin => "n-burnin": "Discarded iterations [default: 500].",
    k => "k": "Prior scale multiplier [default: 2].",
    kappa => "kappa": "Length-scale prior mixture weight [default: 0.3].",
    eta_tau => "eta-tau": "Residual-precision prior quantile [default: 0.9].",
    alpha => "alpha": "Tree prior base [default: 0.95].",
    beta => "beta": "Tree prior power [default: 2].",
    min_leaf_size => "min-leaf-size": "Smallest leaf [default: 1].",
    q => "q": "Noise replicates per draw for intervals [default: 10].",
    level => "level": "Interval level in [0, 1) [default: 0.95].",
    seed => "seed": "Random seed [default: 0].",
    repetitions => "repetitions": "Cross-validation repetitions [default: 5].",
    folds => "folds": "Cross-validation folds [default: 5].",
    workers => "workers": "Worker threads [default: $GPBART_WORKERS or available parallelism].",
    generator => "generator": "Synthetic source: benchmark or friedman.",
    n => "n": "Rows to simulate [default: 100 for benchmark, 500 for friedman].",
    p => "p": "Friedman covariates, 5 or 10 [default: 10].",
    grid_resolution => "grid-resolution": "Surface grid points per axis, 0 to skip [default: 50].",
}

/// Keys that do not change any result and are left out of the config hash.
const UNHASHED: &[&str] = &["verbose", "workers", "output", "out-dir"];

/// Resolved settings for one subcommand.
#[derive(Clone, Debug)]
pub struct Settings {
    values: BTreeMap<String, String>,
    subcommand: String,
}

/// Parse a key=value file. Blank lines and lines starting with `#` are
/// skipped; unknown keys are an error.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i as u64 + 1,
            message: format!("expected key=value, got '{line}'"),
        })?;
        let key = key.trim().replace('_', "-");
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::Parse {
                line: i as u64 + 1,
                message: format!("unknown key '{key}'"),
            });
        }
        m.insert(key, value.trim().to_string());
    }
    Ok(m)
}

impl Settings {
    pub fn resolve(subcommand: &str, flags: &Flags) -> Result<Self> {
        let mut values = match &flags.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    Error::InvalidInput(format!("cannot read config {}: {e}", path.display()))
                })?;
                parse_config_file(&text)?
            }
            None => BTreeMap::new(),
        };
        values.extend(flags.given());
        Ok(Settings {
            values,
            subcommand: subcommand.to_string(),
        })
    }

    #[cfg(test)]
    pub fn from_pairs(subcommand: &str, pairs: &[(&str, &str)]) -> Self {
        Settings {
            values: pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            subcommand: subcommand.to_string(),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn required(&self, key: &str) -> Result<&str> {
        self.raw(key).ok_or_else(|| {
            Error::InvalidInput(format!("{} needs --{key}", self.subcommand))
        })
    }

    pub fn path(&self, key: &str) -> Result<&Path> {
        self.required(key).map(Path::new)
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::InvalidInput(format!("invalid value '{v}' for {key}: {e}")))
            })
            .transpose()
    }

    pub fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn list(&self, key: &str) -> Option<Vec<String>> {
        self.raw(key).map(|v| {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect()
        })
    }

    pub fn verbose(&self) -> Result<bool> {
        self.or("verbose", false)
    }

    pub fn seed(&self) -> Result<u64> {
        self.or("seed", 0)
    }

    pub fn workers(&self) -> Result<usize> {
        if let Some(w) = self.parsed::<usize>("workers")? {
            return Ok(w);
        }
        match std::env::var(WORKERS_ENV) {
            Ok(v) => v.trim().parse().map_err(|e| {
                Error::InvalidInput(format!("invalid {WORKERS_ENV} value '{v}': {e}"))
            }),
            Err(_) => Ok(0),
        }
    }

    pub fn variant(&self) -> Result<Variant> {
        self.or("variant", Variant::D)
    }

    pub fn variants(&self) -> Result<Vec<Variant>> {
        match self.list("variants") {
            None => Ok(Variant::ALL.to_vec()),
            Some(names) => {
                let mut out = Vec::new();
                for name in names {
                    let v: Variant = name.parse()?;
                    if !out.contains(&v) {
                        out.push(v);
                    }
                }
                Ok(out)
            }
        }
    }

    /// Defaults overridden by the sampler keys, then validated.
    pub fn hyperparams(&self) -> Result<Hyperparams> {
        let d = Hyperparams::default();
        let hp = Hyperparams {
            n_trees: self.or("trees", d.n_trees)?,
            n_mcmc: self.or("n-mcmc", d.n_mcmc)?,
            n_burnin: self.or("n-burnin", d.n_burnin)?,
            k: self.or("k", d.k)?,
            kappa: self.or("kappa", d.kappa)?,
            eta_tau: self.or("eta-tau", d.eta_tau)?,
            alpha: self.or("alpha", d.alpha)?,
            beta: self.or("beta", d.beta)?,
            min_leaf_size: self.or("min-leaf-size", d.min_leaf_size)?,
            q_replicates: self.or("q", d.q_replicates)?,
            ..d
        };
        hp.validate()?;
        Ok(hp)
    }

    /// SHA-256 over the sorted result-relevant settings.
    pub fn config_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.subcommand.as_bytes());
        h.update(b"\n");
        for (k, v) in &self.values {
            if UNHASHED.contains(&k.as_str()) {
                continue;
            }
            h.update(format!("{k}={v}\n").as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
