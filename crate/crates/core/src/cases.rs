//! Bundled MATPOWER test cases (see `data/LICENSE-MATPOWER`).

/// Small four-bus case with a phase-shifting transformer, built for tests.
pub const CASE4: &str = include_str!("../data/case4.m");
pub const CASE9: &str = include_str!("../data/case9.m");
pub const CASE14: &str = include_str!("../data/case14.m");
pub const CASE30: &str = include_str!("../data/case30.m");

/// Look up a bundled case by name (`case4`, `case9`, `case14`, `case30`).
pub fn builtin(name: &str) -> Option<&'static str> {
    match name {
        "case4" => Some(CASE4),
        "case9" => Some(CASE9),
        "case14" => Some(CASE14),
        "case30" => Some(CASE30),
        _ => None,
    }
}
