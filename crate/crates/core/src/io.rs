//! Output formatting shared by the library and the CLI.

/// Float rendered with 17 significant digits so it round-trips exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
