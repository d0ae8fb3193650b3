//! Text formatting and file helpers shared by the CSV/JSON exporters.

use std::path::Path;

use crate::error::{Error, Result};

/// Formats `v` with 9 significant digits: positional notation for moderate
/// magnitudes, scientific otherwise. Trailing zeros are trimmed. Non-finite
/// values print as an empty string.
pub fn sig9(v: f64) -> String {
    if !v.is_finite() {
        return String::new();
    }
    if v == 0.0 {
        return "0".to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        let s = if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        };
        if s == "-0" {
            "0".to_string()
        } else {
            s
        }
    } else {
        let s = format!("{v:.8e}");
        let (mant, e) = s.split_once('e').expect("scientific format has an exponent");
        let mant = mant.trim_end_matches('0').trim_end_matches('.');
        format!("{mant}e{e}")
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Serializes `value` as pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::contract(format!("json encoding: {e}")))?;
    s.push('\n');
    write_text(path, &s)
}

/// One CSV row per matrix row.
pub fn matrix_csv(rows: usize, cols: usize, data: &[f64]) -> String {
    let mut out = String::new();
    for r in 0..rows {
        let line: Vec<String> = data[r * cols..(r + 1) * cols].iter().map(|&v| sig9(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
