use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use m2vae::datasets::{generate_synthetic, make_cold_split, Catalog, ColdSplit, Dataset, SyntheticSpec};
use m2vae::evaluation::Variant;
use m2vae::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// Everything that affects results, read from one TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Option<String>,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
    pub sweep: SweepConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub interactions: Option<PathBuf>,
    pub attributes: Option<PathBuf>,
    pub features: Option<PathBuf>,
    /// Generate data in memory instead of reading files.
    pub synthetic: Option<SyntheticSpec>,
    pub cold_fraction: f64,
    pub split_seed: u64,
    /// Seed of the random projection used when image features are wider
    /// than the model.
    pub projection_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            interactions: None,
            attributes: None,
            features: None,
            synthetic: None,
            cold_fraction: 0.3,
            split_seed: 0,
            projection_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            variants: Variant::NAMES.iter().map(|s| s.to_string()).collect(),
            seeds: (0..5).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: String,
    pub grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            parameter: "tau".into(),
            grid: vec![0.05, 0.1, 0.5],
        }
    }
}

pub const SWEEPABLE: [&str; 10] = [
    "alpha",
    "beta",
    "tau",
    "tau_co",
    "learning_rate",
    "c_p",
    "c_n",
    "dim",
    "batch_size",
    "kl_weight",
];

/// `config` with one hyperparameter replaced.
pub fn with_parameter(config: &TrainConfig, name: &str, value: f64) -> Result<TrainConfig> {
    let mut c = config.clone();
    let count = || -> Result<usize> {
        if value >= 0.0 && value.fract() == 0.0 {
            Ok(value as usize)
        } else {
            bail!("`{name}` needs a non-negative integer, got {value}")
        }
    };
    match name {
        "alpha" => c.alpha = value,
        "beta" => c.beta = value,
        "tau" => c.tau = value,
        "tau_co" => c.tau_co = value,
        "learning_rate" => c.learning_rate = value,
        "kl_weight" => c.kl_weight = value,
        "c_p" => c.c_p = count()?,
        "c_n" => c.c_n = count()?,
        "dim" => c.dim = count()?,
        "batch_size" => c.batch_size = count()?,
        _ => bail!("cannot sweep `{name}` (valid: {})", SWEEPABLE.join(", ")),
    }
    c.validate()?;
    Ok(c)
}

impl RunConfig {
    /// Parses `path`; relative data paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut config.data.interactions,
            &mut config.data.attributes,
            &mut config.data.features,
            &mut config.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        config.validate()?;
        config.variant = Some(config.variant()?.name().to_string());
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.variant()?;
        for v in &self.ablation.variants {
            v.parse::<Variant>()?;
        }
        let d = &self.data;
        let files = [&d.interactions, &d.attributes, &d.features];
        let given = files.iter().filter(|f| f.is_some()).count();
        match (given, &d.synthetic) {
            (0, Some(spec)) => spec.validate()?,
            (3, None) => {
                for f in files.into_iter().flatten() {
                    if !f.exists() {
                        bail!("data file {} does not exist", f.display());
                    }
                }
            }
            (0, None) => bail!("no data: give [data] interactions/attributes/features or a [data.synthetic] table"),
            (_, Some(_)) => bail!("[data.synthetic] cannot be combined with data files"),
            _ => bail!("[data] needs all three of interactions, attributes, features"),
        }
        if !(d.cold_fraction > 0.0 && d.cold_fraction < 1.0) {
            bail!("cold_fraction {} not in (0, 1)", d.cold_fraction);
        }
        Ok(())
    }

    pub fn variant(&self) -> Result<Variant> {
        Ok(self.variant.as_deref().unwrap_or("full").parse::<Variant>()?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Loaded data with image features brought to the model width, and its split.
pub struct Prepared {
    pub catalog: Catalog,
    pub split: ColdSplit,
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    let d = &config.data;
    let (log, catalog) = match &d.synthetic {
        Some(spec) => {
            let data = generate_synthetic(spec)?;
            (data.log, data.catalog)
        }
        None => {
            let ds = Dataset::load(
                d.interactions.as_deref().unwrap(),
                d.attributes.as_deref().unwrap(),
                d.features.as_deref().unwrap(),
                None,
            )?;
            (ds.log, ds.catalog)
        }
    };
    let catalog = catalog.with_image_dim(config.train.dim, d.projection_seed);
    let split = make_cold_split(&log, &catalog, d.cold_fraction, d.split_seed)?;
    Ok(Prepared { catalog, split })
}
