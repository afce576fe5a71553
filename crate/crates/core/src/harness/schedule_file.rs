use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost::{CompressionOrder, CompressionSchedule, HwConfig};
use crate::error::{Error, Result};
use crate::token_ops::SortMetric;
use crate::vit::ModelConfig;

pub const SCHEDULE_FORMAT: u32 = 1;

/// Where a schedule came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the canonical JSON of the configuration that produced it.
    pub config_hash: String,
    pub seed: u64,
    /// Blocks-only operation count of the schedule.
    pub flops: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hardware: Option<HwConfig>,
}

/// A searched schedule with its model and provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleFile {
    pub format_version: u32,
    pub model: ModelConfig,
    pub prune_kept: Vec<usize>,
    pub merge_kept: Vec<usize>,
    pub order: CompressionOrder,
    pub metric: SortMetric,
    pub provenance: Provenance,
}

impl ScheduleFile {
    pub fn new(
        model: &ModelConfig,
        schedule: &CompressionSchedule,
        metric: SortMetric,
        provenance: Provenance,
    ) -> Result<Self> {
        let f = Self {
            format_version: SCHEDULE_FORMAT,
            model: model.clone(),
            prune_kept: schedule.prune_kept.clone(),
            merge_kept: schedule.merge_kept.clone(),
            order: schedule.order,
            metric,
            provenance,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn schedule(&self) -> CompressionSchedule {
        CompressionSchedule {
            token_count: self.model.token_count(),
            prune_kept: self.prune_kept.clone(),
            merge_kept: self.merge_kept.clone(),
            order: self.order,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != SCHEDULE_FORMAT {
            return Err(Error::Format {
                what: "schedule file",
                detail: format!("unsupported format version {}", self.format_version),
            });
        }
        self.model.validate()?;
        let s = self.schedule();
        s.check_model(self.model.depth, self.model.token_count())?;
        if s.kept_profile().windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Schedule("kept profile increases".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(s)?;
        f.validate()?;
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Format {
                what: "schedule file",
                detail: j.to_string(),
            },
            other => other,
        })
    }
}

/// Hex SHA-256 of `value` serialized as compact JSON. Struct fields keep
/// declaration order and maps are sorted, so equal configs hash equally.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ScheduleFile {
        let model = ModelConfig::toy();
        let s = CompressionSchedule {
            token_count: 17,
            prune_kept: vec![17, 12, 9, 9],
            merge_kept: vec![15, 12, 8, 4],
            order: CompressionOrder::PruneThenMerge,
        };
        let prov = Provenance {
            config_hash: config_hash(&model).unwrap(),
            seed: 7,
            flops: crate::cost::flops(&s, model.embed_dim).unwrap(),
            hardware: None,
        };
        ScheduleFile::new(&model, &s, SortMetric::ClassAttention, prov).unwrap()
    }

    #[test]
    fn json_round_trip() {
        let f = sample();
        let text = f.to_json().unwrap();
        let g = ScheduleFile::from_json(&text).unwrap();
        assert_eq!(f, g);
        assert_eq!(text, g.to_json().unwrap());
    }

    #[test]
    fn rejects_wrong_depth() {
        let mut f = sample();
        f.prune_kept.pop();
        assert!(f.validate().is_err());
        let text = sample().to_json().unwrap().replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(ScheduleFile::from_json(&text).is_err());
    }

    #[test]
    fn hash_is_stable() {
        let a = config_hash(&ModelConfig::toy()).unwrap();
        assert_eq!(a, config_hash(&ModelConfig::toy()).unwrap());
        assert_ne!(a, config_hash(&ModelConfig::vit_small()).unwrap());
        assert_eq!(a.len(), 64);
    }
}
