use super::{parse_topology, TopologySpec};
use crate::error::{Error, Result};

const DANET_FCN: &str = "\
name danet-fcn
c5 s2 64
c3 64
c3 s2 192
c3 192
c3 s2 192
c3 192
tc3 s2 512
tc3 s2 384
tc3 s2 192
out 7
";

const DANET_FCN2: &str = "\
name danet-fcn2
c5 s2 64
ru s2 64
ru s2 256
ru 512
tru s2 256
tru s2 64
tru s2 64
out 7
";

const DANET_FCN3: &str = "\
name danet-fcn3
c5 s2 128
ru s2 256
ru 256
ru s2 512
ru 512
ru 768
ru 768
tru s2 512
tru s2 256
tru s2 64
out 7
";

pub const PRESET_NAMES: [&str; 3] = ["danet-fcn", "danet-fcn2", "danet-fcn3"];

/// DSL source of a named preset.
pub fn preset_source(name: &str) -> Option<&'static str> {
    match name {
        "danet-fcn" => Some(DANET_FCN),
        "danet-fcn2" => Some(DANET_FCN2),
        "danet-fcn3" => Some(DANET_FCN3),
        _ => None,
    }
}

pub fn preset(name: &str) -> Result<TopologySpec> {
    let src = preset_source(name).ok_or_else(|| {
        Error::Config(format!(
            "unknown preset `{name}` (available: {})",
            PRESET_NAMES.join(", ")
        ))
    })?;
    parse_topology(src)
}

pub fn presets() -> Vec<TopologySpec> {
    PRESET_NAMES
        .iter()
        .map(|n| preset(n).expect("built-in presets are valid"))
        .collect()
}
