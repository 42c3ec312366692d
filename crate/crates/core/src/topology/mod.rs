//! Layer notation, the built-in presets, analytic parameter/op counts and
//! the network built from a topology.

mod counts;
mod dsl;
mod model;
mod presets;

pub use counts::{
    conv_operations, conv_parameters, count_operations, count_parameters, count_running_stats, layer_operations,
    layer_parameters, OpMode,
};
pub use dsl::{parse_layers, parse_topology, LayerKind, LayerSpec, TopologySpec};
pub use model::{Layer, Model};
pub use presets::{preset, preset_source, presets, PRESET_NAMES};
