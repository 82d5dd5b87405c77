//! Number formatting shared by the CSV and JSON writers.

/// Decimal rendering with `digits` significant digits (no exponent).
pub fn sig(v: f64, digits: usize) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return "0".to_string();
    }
    let exp = v.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    // rounding may carry into a new leading digit
    let lead = s
        .trim_start_matches('-')
        .trim_start_matches(['0', '.'])
        .chars()
        .filter(char::is_ascii_digit)
        .count();
    if lead > digits && decimals > 0 {
        return format!("{v:.prec$}", prec = decimals - 1);
    }
    s
}

/// CSV cell with 9 significant digits.
pub fn csv_num(v: f64) -> String {
    sig(v, 9)
}

/// Fixed 6-decimal rendering used by report JSON.
pub fn fixed6(v: f64) -> String {
    format!("{v:.6}")
}
