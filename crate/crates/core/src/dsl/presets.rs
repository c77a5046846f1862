use super::{parse_network, DslError, NetworkConfig};

pub const PRESET_NAMES: [&str; 6] = [
    "ir-3-6-3",
    "ir-6-12-6",
    "ir-5-10-5",
    "ir-20-56-20",
    "mixed-b-6-12-6",
    "very-deep-polynet",
];

fn preset_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "ir-3-6-3" => "IR 3-6-3",
        "ir-6-12-6" => "IR 6-12-6",
        "ir-5-10-5" => "IR 5-10-5",
        "ir-20-56-20" => "IR 20-56-20",
        "mixed-b-6-12-6" => "A: (ir) x 6; B: (3-way -> mpoly-3 -> poly-3) x 4; C: (ir) x 6",
        // Within each poly-3/2-way pair the order is not pinned down; poly-3 goes first,
        // following the higher-to-lower order of the mixed stage B chain.
        "very-deep-polynet" => "A: (2-way) x 10; B: (poly-3 -> 2-way) x 10; C: (poly-3 -> 2-way) x 5",
        _ => return None,
    })
}

/// Named configurations, all written in the public grammar.
pub fn preset(name: &str) -> Result<NetworkConfig, DslError> {
    let text = preset_text(name).ok_or_else(|| DslError::UnknownPreset(name.to_string()))?;
    parse_network(text)
}
