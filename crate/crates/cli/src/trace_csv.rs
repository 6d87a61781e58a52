//! Trace CSV: one `#` line giving the dimensions, one column-name row, then
//! one row per logged step. Values are written with 17 significant digits
//! so reading a file back reproduces the trace bit for bit.

use std::fmt::Write as _;

use claeo_core::simulator::{SimTrace, TraceRow};

use crate::error::CliError;

const MAX_DIM: usize = 64;

pub fn column_names(n: usize, m: usize, r: usize) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=n).map(|i| format!("x_{i}")));
    cols.extend((1..=n).map(|i| format!("xhat_{i}")));
    cols.push("xhat_ext".into());
    cols.extend((1..=m).map(|i| format!("what_{i}")));
    cols.extend((1..=r).map(|i| format!("theta_c_{i}")));
    cols.extend((1..=r).map(|i| format!("theta_a_{i}")));
    for j in 1..=r {
        for i in 1..=r {
            cols.push(format!("gain_{i}{j}"));
        }
    }
    cols.extend(
        ["gain_eig_min", "gain_eig_max", "u", "delta_t", "mu_rho_norm", "a1_metric", "stack_min_sv"]
            .map(String::from),
    );
    cols.extend((1..=n + 1).map(|i| format!("eta_{i}")));
    cols.push("cost".into());
    cols
}

pub fn write_trace(trace: &SimTrace) -> String {
    let (n, m, r) = (trace.n, trace.m, trace.r);
    let mut out = format!("# claeo-trace n={n} m={m} r={r}\n");
    out.push_str(&column_names(n, m, r).join(","));
    out.push('\n');
    for row in &trace.rows {
        let mut first = true;
        let mut put = |v: f64| {
            if !first {
                out.push(',');
            }
            first = false;
            let _ = write!(out, "{v:.16e}");
        };
        put(row.t);
        row.x.iter().for_each(|v| put(*v));
        row.xhat.iter().for_each(|v| put(*v));
        put(row.xhat_ext);
        row.what.iter().for_each(|v| put(*v));
        row.theta_c.iter().for_each(|v| put(*v));
        row.theta_a.iter().for_each(|v| put(*v));
        row.gain.iter().for_each(|v| put(*v));
        for v in [
            row.gain_eig_min,
            row.gain_eig_max,
            row.u,
            row.delta_t,
            row.mu_rho_norm,
            row.a1_metric,
            row.stack_min_sv,
        ] {
            put(v);
        }
        row.eta.iter().for_each(|v| put(*v));
        put(row.cost);
        out.push('\n');
    }
    out
}

fn bad(message: impl Into<String>) -> CliError {
    CliError::Format { what: "trace", message: message.into() }
}

fn parse_header(line: &str) -> Result<(usize, usize, usize), CliError> {
    let rest = line
        .strip_prefix("# claeo-trace")
        .ok_or_else(|| bad("missing '# claeo-trace' header"))?;
    let mut dims = [None; 3];
    for part in rest.split_whitespace() {
        let (k, v) = part.split_once('=').ok_or_else(|| bad(format!("bad header field {part:?}")))?;
        let idx = match k {
            "n" => 0,
            "m" => 1,
            "r" => 2,
            _ => return Err(bad(format!("unknown header field {k:?}"))),
        };
        let v: usize = v.parse().map_err(|_| bad(format!("bad header value {v:?}")))?;
        if v > MAX_DIM {
            return Err(bad(format!("{k} = {v} exceeds {MAX_DIM}")));
        }
        dims[idx] = Some(v);
    }
    match dims {
        [Some(n), Some(m), Some(r)] if n >= 1 => Ok((n, m, r)),
        _ => Err(bad("header needs n ≥ 1, m and r")),
    }
}

pub fn read_trace(text: &str) -> Result<SimTrace, CliError> {
    let mut lines = text.lines();
    let (n, m, r) = parse_header(lines.next().ok_or_else(|| bad("empty file"))?)?;
    let expected = column_names(n, m, r);
    let names = lines.next().ok_or_else(|| bad("missing column row"))?;
    if names.split(',').ne(expected.iter().map(String::as_str)) {
        return Err(bad("column row does not match the header dimensions"));
    }
    let width = expected.len();
    let mut rows = Vec::new();
    let mut values = Vec::with_capacity(width);
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        values.clear();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| bad(format!("row {}: bad number {field:?}", i + 1)))?;
            values.push(v);
        }
        if values.len() != width {
            return Err(bad(format!("row {}: {} fields, expected {width}", i + 1, values.len())));
        }
        let mut it = values.iter().copied();
        let mut take = |k: usize| -> Vec<f64> { it.by_ref().take(k).collect() };
        let t = take(1)[0];
        let x = take(n);
        let xhat = take(n);
        let xhat_ext = take(1)[0];
        let what = take(m);
        let theta_c = take(r);
        let theta_a = take(r);
        let gain = take(r * r);
        let s = take(7);
        let eta = take(n + 1);
        let cost = take(1)[0];
        rows.push(TraceRow {
            t,
            x,
            xhat,
            xhat_ext,
            what,
            theta_c,
            theta_a,
            gain,
            gain_eig_min: s[0],
            gain_eig_max: s[1],
            u: s[2],
            delta_t: s[3],
            mu_rho_norm: s[4],
            a1_metric: s[5],
            stack_min_sv: s[6],
            eta,
            cost,
        });
    }
    Ok(SimTrace { n, m, r, rows })
}
