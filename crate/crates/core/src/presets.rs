//! Configurations shipped with the crate.

use serde::Deserialize;

use crate::config::{parse, ExperimentConfig};
use crate::error::{Error, Result};
use crate::model::{HeadSpec, StudentConfig};

pub const VARIANTS_TOML: &str = include_str!("../presets/variants.toml");
pub const DESK_TOML: &str = include_str!("../presets/desk.toml");
pub const PAPER_TOML: &str = include_str!("../presets/paper.toml");

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Grid {
    variant: Vec<StudentConfig>,
}

/// The ten-variant student grid, in `variant_id` order.
pub fn variants() -> Vec<StudentConfig> {
    let grid: Grid = toml::from_str(VARIANTS_TOML).expect("shipped variant grid parses");
    grid.variant
}

pub fn variant(id: u8) -> Result<StudentConfig> {
    variants()
        .into_iter()
        .find(|v| v.variant_id == id)
        .ok_or_else(|| Error::Config(format!("student.variant_id {id} not in 1..=10")))
}

/// The scaled-down student used by the desk benchmark.
pub fn desk_student() -> StudentConfig {
    desk_experiment()
        .and_then(|c| c.student.resolve())
        .expect("shipped desk preset parses")
}

/// A student under 2000 parameters, small enough for brute-force checks.
pub fn tiny_student() -> StudentConfig {
    StudentConfig {
        variant_id: 0,
        base_channels: 2,
        max_channels: 4,
        num_conv_layers: 5,
        transformer_dim: 8,
        transformer_layers: 1,
        attention_heads: 2,
        ff_dim: Some(16),
        head: HeadSpec::Pool,
    }
}

pub fn desk_experiment() -> Result<ExperimentConfig> {
    parse(DESK_TOML, std::iter::empty::<(&str, &str)>())
}

pub fn paper_experiment() -> Result<ExperimentConfig> {
    parse(PAPER_TOML, std::iter::empty::<(&str, &str)>())
}
