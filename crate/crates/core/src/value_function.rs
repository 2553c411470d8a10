//! Basis expansion and the ridge-regression value function `V(t) = B Ψ(t)`.
//!
//! An irregularly sampled series (times `t_l`, observations `H ∈ R^{O×L}`)
//! is summarized by regressing `H` on the basis matrix `F ∈ R^{N×L}`,
//! `B* = H Fᵀ (F Fᵀ + λ I)⁻¹`, after which `V(t) = B Ψ(t)` interpolates the
//! series at arbitrary locations.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// `N` Gaussian radial basis functions with shared width.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisSet {
    centers: Vec<f64>,
    width: f64,
}

impl BasisSet {
    pub fn new(centers: Vec<f64>, width: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::invalid("basis needs at least one center"));
        }
        if !(width > 0.0) {
            return Err(Error::invalid(format!("basis width must be positive, got {width}")));
        }
        if centers.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::invalid("basis centers must be strictly increasing"));
        }
        Ok(BasisSet { centers, width })
    }

    /// Centers evenly spaced over the domain (endpoints included), width
    /// equal to the center spacing. A single-function basis sits at the
    /// midpoint with the domain length as its width.
    pub fn uniform(domain: (f64, f64), n: usize) -> Result<Self> {
        let (lo, hi) = domain;
        if !(lo < hi) {
            return Err(Error::invalid(format!("degenerate basis domain [{lo}, {hi}]")));
        }
        if n == 0 {
            return Err(Error::invalid("basis needs at least one function"));
        }
        if n == 1 {
            return BasisSet::new(vec![0.5 * (lo + hi)], hi - lo);
        }
        let spacing = (hi - lo) / (n - 1) as f64;
        let centers = (0..n).map(|i| lo + i as f64 * spacing).collect();
        BasisSet::new(centers, spacing)
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn eval_one(&self, n: usize, t: f64) -> f64 {
        let d = t - self.centers[n];
        (-d * d / (2.0 * self.width * self.width)).exp()
    }
}

/// `Ψ(t) = (ψ_1(t), …, ψ_N(t))`.
pub fn eval_basis(basis: &BasisSet, t: f64) -> DVector<f64> {
    DVector::from_fn(basis.len(), |n, _| basis.eval_one(n, t))
}

/// An irregularly sampled multivariate series: strictly increasing times and
/// an `O × L` observation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    times: Vec<f64>,
    values: DMatrix<f64>,
}

impl TimeSeries {
    pub fn new(times: Vec<f64>, values: DMatrix<f64>) -> Result<Self> {
        if times.is_empty() || values.ncols() != times.len() {
            return Err(Error::invalid(format!(
                "need one observation column per time, got {} columns for {} times",
                values.ncols(),
                times.len()
            )));
        }
        if times.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::invalid("times must be strictly increasing"));
        }
        if times.iter().any(|t| !t.is_finite()) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("times and values must be finite"));
        }
        Ok(TimeSeries { times, values })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn obs_dims(&self) -> usize {
        self.values.nrows()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Serializes as `time,dim_0,…,dim_{O-1}` CSV rows.
    pub fn to_csv_string(&self) -> String {
        let o = self.obs_dims();
        let mut out = String::from("time");
        for d in 0..o {
            out.push_str(&format!(",dim_{d}"));
        }
        out.push('\n');
        for (l, &t) in self.times.iter().enumerate() {
            out.push_str(&format!("{t}"));
            for d in 0..o {
                out.push_str(&format!(",{}", self.values[(d, l)]));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::invalid("empty time series CSV"))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"time") || cols.len() < 2 {
            return Err(Error::invalid(format!(
                "bad time series header {header:?}, expected time,dim_0,…"
            )));
        }
        let o = cols.len() - 1;
        let mut times = Vec::new();
        let mut flat: Vec<f64> = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != o + 1 {
                return Err(Error::invalid(format!(
                    "row {}: expected {} fields, got {}",
                    i + 2,
                    o + 1,
                    fields.len()
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(format!("row {}: {e}", i + 2)))
            };
            times.push(parse(fields[0])?);
            for field in &fields[1..] {
                flat.push(parse(field)?);
            }
        }
        let l = times.len();
        // `flat` is row-major per observation row; DMatrix wants column-major.
        let values = DMatrix::from_fn(o, l, |d, col| flat[col * o + d]);
        TimeSeries::new(times, values)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        TimeSeries::from_csv_str(&text)
    }
}

/// The fitted `O × N` coefficient matrix of the value function.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueParams {
    b: DMatrix<f64>,
}

impl ValueParams {
    pub fn new(b: DMatrix<f64>) -> Result<Self> {
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("value parameters must be finite"));
        }
        Ok(ValueParams { b })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn obs_dims(&self) -> usize {
        self.b.nrows()
    }

    pub fn basis_len(&self) -> usize {
        self.b.ncols()
    }
}

/// Basis matrix `F ∈ R^{N×L}` with `F[n, l] = ψ_n(t_l)`.
pub fn basis_matrix(basis: &BasisSet, times: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(basis.len(), times.len(), |n, l| basis.eval_one(n, times[l]))
}

/// Solves `B* = H Fᵀ (F Fᵀ + λ I)⁻¹` through a Cholesky factorization,
/// retrying once with 1e-12 jitter when `λ = 0` leaves `F Fᵀ` singular.
pub fn fit_ridge(series: &TimeSeries, basis: &BasisSet, lambda: f64) -> Result<ValueParams> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let f = basis_matrix(basis, series.times());
    let n = basis.len();
    let gram = &f * f.transpose() + DMatrix::identity(n, n) * lambda;
    let rhs = &f * series.values().transpose(); // N × O
    let chol = match Cholesky::new(gram.clone()) {
        Some(c) => c,
        None => Cholesky::new(gram + DMatrix::identity(n, n) * 1e-12).ok_or_else(|| {
            Error::numeric("F Fᵀ + λI is singular even after 1e-12 jitter")
        })?,
    };
    let solution = chol.solve(&rhs); // N × O
    ValueParams::new(solution.transpose())
}

/// `V(t) = B Ψ(t)`.
pub fn value_eval(params: &ValueParams, basis: &BasisSet, t: f64) -> DVector<f64> {
    params.matrix() * eval_basis(basis, t)
}
