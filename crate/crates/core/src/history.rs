//! Recorded-data store for concurrent learning.
//!
//! The stack keeps `p` regressor/target pairs. While slots are free every
//! candidate is appended. Once full, a candidate replaces the column whose
//! replacement yields the largest minimum singular value of `Zᵀ`, and only
//! if that value strictly exceeds the current one.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_finite, check_len, Error, Result};

/// Default threshold on `λ_min(Ψ)` for the rank condition.
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryStack {
    regressors: DMatrix<f64>,
    targets: DVector<f64>,
    fill: usize,
}

/// Result of [`HistoryStack::offer`].
#[derive(Debug, Clone, PartialEq)]
pub struct Offer {
    pub accepted: bool,
    /// Column written, if any (zero-based).
    pub column: Option<usize>,
    pub stack: HistoryStack,
}

impl HistoryStack {
    /// Empty stack holding up to `capacity` records of dimension `m`.
    pub fn new(m: usize, capacity: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("regressor dimension must be positive".into()));
        }
        if capacity < m {
            return Err(Error::Config(format!(
                "stack capacity {capacity} must be at least the regressor dimension {m}"
            )));
        }
        Ok(Self {
            regressors: DMatrix::zeros(m, capacity),
            targets: DVector::zeros(capacity),
            fill: 0,
        })
    }

    pub fn regressor_dim(&self) -> usize {
        self.regressors.nrows()
    }

    pub fn capacity(&self) -> usize {
        self.regressors.ncols()
    }

    pub fn len(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    pub fn is_full(&self) -> bool {
        self.fill == self.capacity()
    }

    /// `Z`, one recorded regressor per column.
    pub fn regressors(&self) -> &DMatrix<f64> {
        &self.regressors
    }

    /// `Λ`, one recorded target per column of `Z`.
    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    /// Filled `(regressor, target)` pairs in column order.
    pub fn records(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        let m = self.regressor_dim();
        (0..self.fill).map(move |j| {
            let col = &self.regressors.as_slice()[j * m..(j + 1) * m];
            (col, self.targets[j])
        })
    }

    /// Pure transition: returns the stack after offering one candidate.
    pub fn offer(&self, regressor: &[f64], target: f64) -> Result<Offer> {
        let mut next = self.clone();
        let column = next.offer_in_place(regressor, target)?;
        Ok(Offer {
            accepted: column.is_some(),
            column,
            stack: next,
        })
    }

    /// Mutating form of [`offer`](Self::offer). Returns the written column.
    pub fn offer_in_place(&mut self, regressor: &[f64], target: f64) -> Result<Option<usize>> {
        check_len("regressor", regressor, self.regressor_dim())?;
        check_finite("regressor", regressor)?;
        check_finite("target", &[target])?;

        if self.fill < self.capacity() {
            let k = self.fill;
            self.write_column(k, regressor, target);
            self.fill += 1;
            return Ok(Some(k));
        }

        let s_old = min_singular_value_of(&self.regressors);
        let mut best: Option<(usize, f64)> = None;
        let mut trial = self.regressors.clone();
        for j in 0..self.capacity() {
            trial.column_mut(j).copy_from_slice(regressor);
            let s = min_singular_value_of(&trial);
            trial.column_mut(j).copy_from(&self.regressors.column(j));
            // strict comparison keeps the lowest index on ties
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        match best {
            Some((j, s_new)) if s_new > s_old => {
                self.write_column(j, regressor, target);
                Ok(Some(j))
            }
            _ => Ok(None),
        }
    }

    fn write_column(&mut self, j: usize, regressor: &[f64], target: f64) {
        self.regressors.column_mut(j).copy_from_slice(regressor);
        self.targets[j] = target;
    }

    /// Smallest singular value of `Zᵀ`; zero while fewer than `m` records
    /// are stored.
    pub fn min_singular_value(&self) -> f64 {
        if self.fill < self.regressor_dim() {
            return 0.0;
        }
        min_singular_value_of(&self.regressors)
    }

    /// `Ψ = Σⱼ Φʲ Φʲᵀ` over the filled records.
    pub fn excitation_matrix(&self) -> DMatrix<f64> {
        let z = self.regressors.columns(0, self.fill);
        &z * z.transpose()
    }

    pub fn rank_condition_met(&self) -> bool {
        self.rank_condition_met_with(DEFAULT_RANK_TOLERANCE)
    }

    pub fn rank_condition_met_with(&self, tolerance: f64) -> bool {
        if self.fill == 0 {
            return false;
        }
        self.excitation_matrix().symmetric_eigen().eigenvalues.min() > tolerance
    }

    /// Keeps only the first `count` records.
    pub fn truncated(&self, count: usize) -> Self {
        let mut out = self.clone();
        for j in count.min(self.fill)..self.capacity() {
            out.regressors.column_mut(j).fill(0.0);
            out.targets[j] = 0.0;
        }
        out.fill = count.min(self.fill);
        out
    }

    /// Serializes the filled records as CSV: `j,phi_1..phi_m,target`.
    pub fn to_csv(&self) -> String {
        let m = self.regressor_dim();
        let mut out = String::new();
        let _ = writeln!(out, "# history stack m={m} capacity={}", self.capacity());
        out.push('j');
        for i in 1..=m {
            let _ = write!(out, ",phi_{i}");
        }
        out.push_str(",target\n");
        for (j, (phi, target)) in self.records().enumerate() {
            let _ = write!(out, "{}", j + 1);
            for v in phi {
                let _ = write!(out, ",{v:.16e}");
            }
            let _ = writeln!(out, ",{target:.16e}");
        }
        out
    }

    /// Parses the format written by [`to_csv`](Self::to_csv). Records fill
    /// slots in file order; `capacity` overrides the one in the file header.
    pub fn from_csv(text: &str, capacity: Option<usize>) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidInput("stack CSV is empty".into()))?;
        let (m, file_capacity) = parse_stack_header(header)?;
        let capacity = capacity.unwrap_or(file_capacity);
        let mut stack = HistoryStack::new(m, capacity).map_err(|e| match e {
            Error::Config(msg) => Error::InvalidInput(msg),
            other => other,
        })?;

        let columns = lines
            .next()
            .ok_or_else(|| Error::InvalidInput("stack CSV is missing its column header".into()))?;
        if columns.split(',').count() != m + 2 {
            return Err(Error::InvalidInput(format!(
                "stack CSV column header has {} fields, expected {}",
                columns.split(',').count(),
                m + 2
            )));
        }

        for (row, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != m + 2 {
                return Err(Error::InvalidInput(format!(
                    "stack CSV row {} has {} fields, expected {}",
                    row + 1,
                    fields.len(),
                    m + 2
                )));
            }
            if stack.fill == capacity {
                return Err(Error::InvalidInput(format!(
                    "stack CSV holds more than {capacity} records"
                )));
            }
            let values = fields[1..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::InvalidInput(format!("bad number {f:?} in stack CSV")))
                })
                .collect::<Result<Vec<f64>>>()?;
            check_finite("stack record", &values)?;
            let k = stack.fill;
            stack.write_column(k, &values[..m], values[m]);
            stack.fill += 1;
        }
        Ok(stack)
    }
}

fn parse_stack_header(line: &str) -> Result<(usize, usize)> {
    let body = line
        .strip_prefix('#')
        .map(str::trim)
        .and_then(|l| l.strip_prefix("history stack"))
        .ok_or_else(|| Error::InvalidInput("stack CSV must start with '# history stack'".into()))?;
    let mut m = None;
    let mut capacity = None;
    for token in body.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("bad stack header token {token:?}")))?;
        let value: usize = value
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad stack header value {value:?}")))?;
        match key {
            "m" => m = Some(value),
            "capacity" => capacity = Some(value),
            _ => return Err(Error::InvalidInput(format!("unknown stack header key {key:?}"))),
        }
    }
    match (m, capacity) {
        (Some(m), Some(c)) if m > 0 && m <= 64 && c <= 4096 => Ok((m, c)),
        _ => Err(Error::InvalidInput("stack header needs sane m= and capacity=".into())),
    }
}

/// Smallest singular value of `zᵀ` where `z` is `m × p`, `p ≥ m`.
pub(crate) fn min_singular_value_of(z: &DMatrix<f64>) -> f64 {
    let svd = z.transpose().svd(false, false);
    svd.singular_values.min().max(0.0)
}

/// Trapezoidal approximation of `∫ ν νᵀ dτ` over `[start, end]`.
///
/// Samples must be time-ordered and cover the window; samples are
/// linearly interpolated at the window edges.
pub fn windowed_excitation_gramian(
    samples: &[(f64, DVector<f64>)],
    start: f64,
    end: f64,
) -> Result<DMatrix<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples".into()));
    }
    if !(start.is_finite() && end.is_finite() && start <= end) {
        return Err(Error::InvalidInput(format!("bad window [{start}, {end}]")));
    }
    let dim = samples[0].1.len();
    for pair in samples.windows(2) {
        if pair[1].0 <= pair[0].0 {
            return Err(Error::InvalidInput("samples must be strictly time-ordered".into()));
        }
    }
    if samples.iter().any(|(_, v)| v.len() != dim) {
        return Err(Error::Dimension("samples have mixed dimensions".into()));
    }
    let (first, last) = (samples[0].0, samples[samples.len() - 1].0);
    if start < first || end > last {
        return Err(Error::InvalidInput(format!(
            "window [{start}, {end}] outside sample range [{first}, {last}]"
        )));
    }

    let interpolate = |t: f64| -> DVector<f64> {
        let idx = samples.partition_point(|(s, _)| *s <= t);
        if idx == 0 {
            return samples[0].1.clone();
        }
        if idx == samples.len() {
            return samples[idx - 1].1.clone();
        }
        let (t0, v0) = &samples[idx - 1];
        let (t1, v1) = &samples[idx];
        let w = (t - t0) / (t1 - t0);
        v0 * (1.0 - w) + v1 * w
    };

    let mut knots: Vec<(f64, DVector<f64>)> = vec![(start, interpolate(start))];
    knots.extend(
        samples
            .iter()
            .filter(|(t, _)| *t > start && *t < end)
            .cloned(),
    );
    if end > start {
        knots.push((end, interpolate(end)));
    }

    let mut gram = DMatrix::zeros(dim, dim);
    for pair in knots.windows(2) {
        let (t0, v0) = &pair[0];
        let (t1, v1) = &pair[1];
        let dt = t1 - t0;
        gram += (v0 * v0.transpose() + v1 * v1.transpose()) * (0.5 * dt);
    }
    Ok(gram)
}
