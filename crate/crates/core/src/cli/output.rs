//! Deterministic text output: `%.17g`-style floats, `\n` line endings.

use std::io::{self, Write};

use nalgebra::DMatrix;

use crate::pde::StateField;

/// Formats `v` with 17 significant digits, trailing zeros removed, like C's
/// `%.17g`. Zero of either sign prints as `0`.
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.into();
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.16e}", v.abs());
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let all: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let digits = all.trim_end_matches('0');
    let body = if (-5..17).contains(&exp) {
        if exp >= 0 {
            let whole = exp as usize + 1;
            if digits.len() <= whole {
                format!("{digits}{}", "0".repeat(whole - digits.len()))
            } else {
                format!("{}.{}", &digits[..whole], &digits[whole..])
            }
        } else {
            format!("0.{}{digits}", "0".repeat((-exp - 1) as usize))
        }
    } else {
        let (lead, rest) = digits.split_at(1);
        let frac = if rest.is_empty() { String::new() } else { format!(".{rest}") };
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{lead}{frac}e{sign}{:02}", exp.abs())
    };
    if v < 0.0 {
        format!("-{body}")
    } else {
        body
    }
}

pub fn write_row(out: &mut dyn Write, values: &[f64]) -> io::Result<()> {
    let line: Vec<String> = values.iter().map(|&v| fmt_float(v)).collect();
    writeln!(out, "{}", line.join(","))
}

pub fn write_matrix(out: &mut dyn Write, m: &DMatrix<f64>) -> io::Result<()> {
    for row in m.row_iter() {
        let values: Vec<f64> = row.iter().copied().collect();
        write_row(out, &values)?;
    }
    Ok(())
}

/// Header `x,y1,…,yn`, then one row per cell.
pub fn write_state(out: &mut dyn Write, state: &StateField) -> io::Result<()> {
    let n = state.values.nrows();
    let header: Vec<String> = (1..=n).map(|k| format!("y{k}")).collect();
    writeln!(out, "x,{}", header.join(","))?;
    for (i, x) in state.grid.centers().into_iter().enumerate() {
        let mut row = vec![x];
        row.extend(state.values.column(i).iter());
        write_row(out, &row)?;
    }
    Ok(())
}
