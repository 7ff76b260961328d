//! Number formatting shared by the CSV and text writers.

/// Rounds to six significant digits and prints the shortest representation,
/// in exponent form below 1e-4 or from 1e15 up.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "NA".into()
        } else if x > 0.0 {
            "Inf".into()
        } else {
            "-Inf".into()
        };
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("valid float");
    if rounded == 0.0 {
        return "0".into();
    }
    let magnitude = rounded.abs();
    if !(1e-4..1e15).contains(&magnitude) {
        return format!("{rounded:e}");
    }
    format!("{rounded}")
}

/// Fixed decimals, with `-0.000` printed as `0.000`.
pub fn fixed(x: f64, decimals: usize) -> String {
    let s = format!("{x:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}
