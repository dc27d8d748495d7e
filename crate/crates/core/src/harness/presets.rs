//! Checked-in experiment presets, embedded at compile time.

/// `(name, TOML text)` pairs, in the order `list` prints them.
pub const PRESETS: &[(&str, &str)] = &[
    (
        "ou_sensitivity",
        include_str!("../../presets/ou_sensitivity.toml"),
    ),
    (
        "ou_sensitivity_j",
        include_str!("../../presets/ou_sensitivity_j.toml"),
    ),
    ("ou_rate_fit", include_str!("../../presets/ou_rate_fit.toml")),
    (
        "ou_mle_compare",
        include_str!("../../presets/ou_mle_compare.toml"),
    ),
    (
        "ou_joint_sigma",
        include_str!("../../presets/ou_joint_sigma.toml"),
    ),
    ("ou_clt", include_str!("../../presets/ou_clt.toml")),
    (
        "bistable_sigma075",
        include_str!("../../presets/bistable_sigma075.toml"),
    ),
    (
        "bistable_sigma05",
        include_str!("../../presets/bistable_sigma05.toml"),
    ),
    (
        "nonsymmetric",
        include_str!("../../presets/nonsymmetric.toml"),
    ),
    ("chaos_check", include_str!("../../presets/chaos_check.toml")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
}
