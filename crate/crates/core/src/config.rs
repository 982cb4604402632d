//! Run configuration shared by every command.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alloc::ClusterTagConfig;
use crate::baseline::BaselineConfig;
use crate::layout::SizeClassTable;
use crate::model::ModelKind;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub density: u32,
    pub quarantine: usize,
    pub allocatable: usize,
    pub cache_capacity: usize,
    pub scan_period: u64,
    pub page_threshold: u64,
    pub tag_bits: u32,
    pub strategy: ModelKind,
    /// Keep per-slot tag histories; campaigns switch this off.
    pub record_history: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            density: 5,
            quarantine: 16,
            allocatable: 239,
            cache_capacity: 64,
            scan_period: 1024,
            page_threshold: 4,
            tag_bits: 8,
            strategy: ModelKind::ClusterTag,
            record_history: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.baseline()?;
        if self.strategy == ModelKind::ClusterTag {
            self.clustertag()?;
        }
        Ok(())
    }

    pub fn clustertag(&self) -> Result<ClusterTagConfig, ConfigError> {
        if self.tag_bits != 8 {
            return Err(ConfigError::Invalid(format!(
                "clustertag needs 8-bit tags, got {}",
                self.tag_bits
            )));
        }
        let cfg = ClusterTagConfig {
            density: self.density,
            quarantine: self.quarantine,
            allocatable: self.allocatable,
            cache_capacity: self.cache_capacity,
            scan_period: self.scan_period,
            page_threshold: self.page_threshold,
            size_classes: SizeClassTable::default(),
            record_history: self.record_history,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn baseline(&self) -> Result<BaselineConfig, ConfigError> {
        let cfg = BaselineConfig {
            tag_bits: self.tag_bits,
            size_classes: SizeClassTable::default(),
            record_history: self.record_history,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
