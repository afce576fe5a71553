use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::dataset::ToyRecipe;
use crate::cost::{baseline_flops, CompressionSchedule, CostCoefficients, HwConfig, HwCostModel, HwMetric, SyntheticCostModel};
use crate::error::{Error, Result};
use crate::search::{SearchConfig, TrainConfig};
use crate::vit::ModelConfig;

/// A constraint target, absolute or relative to the uncompressed backbone.
///
/// Parsed from `"50%"` (relative), `"0.45G"`, `"450M"`, `"900k"` (absolute
/// with a decimal suffix) or a bare number (absolute, in the metric's unit).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Absolute(f64),
    /// Fraction of the baseline, e.g. `0.5` for `"50%"`.
    Relative(f64),
}

impl Target {
    pub fn resolve(self, baseline: f64) -> f64 {
        match self {
            Target::Absolute(v) => v,
            Target::Relative(f) => f * baseline,
        }
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let bad = || Error::Config(format!("cannot parse target {s:?}; expected e.g. 50%, 0.45G or 12.5"));
        let (num, scale, relative) = match t.char_indices().last() {
            Some((i, '%')) => (&t[..i], 0.01, true),
            Some((i, 'G' | 'g')) => (&t[..i], 1e9, false),
            Some((i, 'M')) => (&t[..i], 1e6, false),
            Some((i, 'K' | 'k')) => (&t[..i], 1e3, false),
            Some(_) => (t, 1.0, false),
            None => return Err(bad()),
        };
        let v: f64 = num.trim().parse().map_err(|_| bad())?;
        let v = v * scale;
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::Config(format!("target {s:?} must be positive")));
        }
        Ok(if relative { Target::Relative(v) } else { Target::Absolute(v) })
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Absolute(v) => write!(f, "{v}"),
            Target::Relative(r) => write!(f, "{}%", r * 100.0),
        }
    }
}

impl Serialize for Target {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Target::Absolute(v) => s.serialize_f64(*v),
            Target::Relative(_) => s.serialize_str(&self.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for Target {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v.is_finite() && v > 0.0 => Ok(Target::Absolute(v)),
            Raw::Num(v) => Err(serde::de::Error::custom(format!("target must be positive, got {v}"))),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Search targets. Relative FLOPs are measured against the blocks-only
/// operation count; relative latency and power against the uncompressed
/// backbone on the configured hardware.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Targets {
    pub flops: Option<Target>,
    pub latency: Option<Target>,
    pub power: Option<Target>,
}

/// Where examples come from: the synthetic recipe, or IDX files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub recipe: ToyRecipe,
    pub idx: Option<IdxFiles>,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub val_images: PathBuf,
    pub val_labels: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnumerateMode {
    /// Rejection-sampled schedules just under the FLOPs target.
    #[default]
    Random,
    /// Every combination of `kept_grid` per block and stage.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnumerateConfig {
    pub mode: EnumerateMode,
    pub count: usize,
    /// Kept-count grid for `grid` mode.
    pub kept_grid: Vec<usize>,
    /// Random schedules have FLOPs in `[lower · T, T]`.
    pub lower: f64,
    /// Evaluate at most this many schedules.
    pub budget: Option<usize>,
    pub seed: u64,
}

impl Default for EnumerateConfig {
    fn default() -> Self {
        Self {
            mode: EnumerateMode::Random,
            count: 2000,
            kept_grid: Vec::new(),
            lower: 0.9,
            budget: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareConfig {
    /// Cost-model coefficient file; the bundled model when absent.
    pub coefficients: Option<PathBuf>,
    /// Design point for latency/power search and reporting; the model's
    /// anchor when absent.
    pub config: Option<HwConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Validation image indices to render.
    pub images: Vec<usize>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { images: vec![0, 1] }
    }
}

/// A complete run description, one section per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub targets: Targets,
    pub search: SearchConfig,
    pub enumerate: EnumerateConfig,
    pub finetune: TrainConfig,
    pub hardware: HardwareConfig,
    pub render: RenderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            targets: Targets {
                flops: Some(Target::Relative(0.5)),
                ..Targets::default()
            },
            search: SearchConfig::default(),
            enumerate: EnumerateConfig::default(),
            finetune: TrainConfig {
                epochs: 2,
                lr: 1e-3,
                lr_min: 1e-4,
                ..TrainConfig::default()
            },
            hardware: HardwareConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.data.idx.is_none() {
            self.data.recipe.validate()?;
            self.data.recipe.check_model(&self.model)?;
        }
        self.train.validate()?;
        self.finetune.validate()?;
        for (name, section, run) in [
            ("flops", self.search.target_flops, self.targets.flops),
            ("latency", self.search.target_latency, self.targets.latency),
            ("power", self.search.target_power, self.targets.power),
        ] {
            if section.is_some() && run.is_some() {
                return Err(Error::Config(format!(
                    "{name} target given both in targets and in search.target_{name}"
                )));
            }
        }
        if !(self.enumerate.lower >= 0.0 && self.enumerate.lower <= 1.0) {
            return Err(Error::Config(format!("enumerate.lower must lie in [0, 1], got {}", self.enumerate.lower)));
        }
        Ok(())
    }

    /// Uses `seed` for every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
        self.search.seed = seed;
        self.enumerate.seed = seed;
        self.finetune.seed = seed;
    }

    pub fn coefficients(&self) -> Result<CostCoefficients> {
        match &self.hardware.coefficients {
            Some(p) => CostCoefficients::load(p),
            None => Ok(CostCoefficients::default()),
        }
    }

    pub fn cost_model(&self) -> Result<SyntheticCostModel> {
        Ok(SyntheticCostModel::new(self.coefficients()?, &self.model))
    }

    /// The fixed design point: the configured one or the model's anchor.
    pub fn hw_config(&self, model: &SyntheticCostModel) -> HwConfig {
        self.hardware.config.unwrap_or(model.coefficients.anchor)
    }

    /// Blocks-only operations of the uncompressed backbone.
    pub fn baseline_block_flops(&self) -> f64 {
        baseline_flops(&self.model) as f64
    }

    /// The search section with every target resolved to an absolute value.
    pub fn resolved_search(&self) -> Result<SearchConfig> {
        let mut s = self.search.clone();
        if let Some(t) = self.targets.flops {
            s.target_flops = Some(t.resolve(self.baseline_block_flops()));
        }
        if self.targets.latency.is_some() || self.targets.power.is_some() {
            let model = self.cost_model()?;
            let hw = self.hw_config(&model);
            let zero = CompressionSchedule::zero(self.model.token_count(), self.model.depth);
            if let Some(t) = self.targets.latency {
                s.target_latency = Some(t.resolve(model.total(&zero, &hw, HwMetric::Latency)));
            }
            if let Some(t) = self.targets.power {
                s.target_power = Some(t.resolve(model.total(&zero, &hw, HwMetric::Power)));
            }
        }
        s.validate()?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_parsing() {
        assert_eq!("50%".parse::<Target>().unwrap(), Target::Relative(0.5));
        assert_eq!("0.45G".parse::<Target>().unwrap(), Target::Absolute(0.45e9));
        assert_eq!("12.5".parse::<Target>().unwrap(), Target::Absolute(12.5));
        assert_eq!("900k".parse::<Target>().unwrap(), Target::Absolute(9e5));
        assert!("-3%".parse::<Target>().is_err());
        assert!("abc".parse::<Target>().is_err());
        assert!("".parse::<Target>().is_err());
    }

    #[test]
    fn default_round_trips_and_resolves() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        let s = c.resolved_search().unwrap();
        assert_eq!(s.target_flops, Some(0.5 * c.baseline_block_flops()));
    }

    #[test]
    fn rejects_unknown_fields_and_double_targets() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).is_err());
        let mut c = RunConfig::default();
        c.search.target_flops = Some(1.0);
        assert!(c.validate().is_err());
    }
}
