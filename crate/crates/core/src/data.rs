use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Binary outcome, scalar treatment and a column-major control matrix.
#[derive(Debug, Clone)]
pub struct Dataset {
    y: Vec<f64>,
    d: Vec<f64>,
    x: DMatrix<f64>,
    intercept: Option<usize>,
    column_norms: Vec<f64>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, d: Vec<f64>, x: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(Error::InvalidData(format!("need at least 2 observations, got {n}")));
        }
        if d.len() != n || x.nrows() != n {
            return Err(Error::InvalidData(format!(
                "length mismatch: y has {n}, d has {}, x has {} rows",
                d.len(),
                x.nrows()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidData("need at least one control column".into()));
        }
        if let Some(i) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidData(format!("outcome row {i} is {} (must be 0 or 1)", y[i])));
        }
        if let Some(i) = d.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("treatment row {i} is not finite")));
        }
        for j in 0..x.ncols() {
            if let Some(i) = x.column(j).iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!("control column {j} row {i} is not finite")));
            }
        }
        let column_norms = (0..x.ncols())
            .map(|j| (x.column(j).norm_squared() / n as f64).sqrt())
            .collect();
        Ok(Self {
            y,
            d,
            x,
            intercept: None,
            column_norms,
        })
    }

    /// Declares column `j` as an intercept: it is never penalized and never
    /// dropped for having zero variance.
    pub fn with_intercept(mut self, j: usize) -> Result<Self> {
        if j >= self.p() {
            return Err(Error::Argument(format!("intercept column {j} out of range")));
        }
        self.intercept = Some(j);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Contiguous view of control column `j`.
    #[inline]
    pub fn col(&self, j: usize) -> &[f64] {
        let n = self.n();
        &self.x.as_slice()[j * n..(j + 1) * n]
    }

    pub fn intercept(&self) -> Option<usize> {
        self.intercept
    }

    /// `sqrt(E_n[x_ij^2])` per column.
    pub fn column_norms(&self) -> &[f64] {
        &self.column_norms
    }

    /// Column indices that are never penalized.
    pub fn unpenalized(&self) -> Vec<usize> {
        self.intercept.into_iter().collect()
    }

    /// `x_i' beta` for every row.
    pub fn x_times(&self, beta: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n];
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                for (o, v) in out.iter_mut().zip(self.col(j)) {
                    *o += b * v;
                }
            }
        }
        out
    }

    /// Same observations with rows permuted: row `i` of the result is row
    /// `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n();
        if perm.len() != n {
            return Err(Error::Argument("permutation length mismatch".into()));
        }
        let y = perm.iter().map(|&i| self.y[i]).collect();
        let d = perm.iter().map(|&i| self.d[i]).collect();
        let x = DMatrix::from_fn(n, self.p(), |i, j| self.x[(perm[i], j)]);
        let out = Dataset::new(y, d, x)?;
        Ok(Self {
            intercept: self.intercept,
            ..out
        })
    }

    /// Scales `d` and every kept column of `x` to unit second moment.
    ///
    /// Zero-variance columns other than the declared intercept are dropped
    /// with a warning. Nothing is centered.
    pub fn standardize(&self) -> Result<Standardized> {
        let n = self.n() as f64;
        let mut warnings = Vec::new();
        let mut kept = Vec::with_capacity(self.p());
        for j in 0..self.p() {
            if Some(j) == self.intercept {
                kept.push(j);
                continue;
            }
            let c = self.col(j);
            let m = c.iter().sum::<f64>() / n;
            let var = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            if var <= 1e-12 * (1.0 + m * m) {
                warnings.push(format!("dropped zero-variance control column {j}"));
            } else {
                kept.push(j);
            }
        }
        if kept.is_empty() {
            return Err(Error::InvalidData("every control column has zero variance".into()));
        }
        let d_scale = (self.d.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        if d_scale <= 0.0 {
            return Err(Error::InvalidData("treatment is identically zero".into()));
        }
        let x_scale: Vec<f64> = kept.iter().map(|&j| self.column_norms[j]).collect();
        let x = DMatrix::from_fn(self.n(), kept.len(), |i, k| {
            self.x[(i, kept[k])] / x_scale[k]
        });
        let d = self.d.iter().map(|v| v / d_scale).collect();
        let mut data = Dataset::new(self.y.clone(), d, x)?;
        data.intercept = self
            .intercept
            .and_then(|j| kept.iter().position(|&k| k == j));
        Ok(Standardized {
            data,
            d_scale,
            x_scale,
            kept,
            warnings,
        })
    }
}

/// A dataset rescaled to unit second moments, with the map back to the
/// original columns.
#[derive(Debug, Clone)]
pub struct Standardized {
    pub data: Dataset,
    pub d_scale: f64,
    pub x_scale: Vec<f64>,
    /// Original index of each standardized column.
    pub kept: Vec<usize>,
    pub warnings: Vec<String>,
}

impl Standardized {
    /// Treatment coefficient on the original scale.
    pub fn alpha_original(&self, alpha: f64) -> f64 {
        alpha / self.d_scale
    }

    /// Control coefficients on the original scale, one entry per original
    /// column (dropped columns get 0).
    pub fn beta_original(&self, beta: &[f64], p_original: usize) -> Vec<f64> {
        let mut out = vec![0.0; p_original];
        for (k, &b) in beta.iter().enumerate() {
            out[self.kept[k]] = b / self.x_scale[k];
        }
        out
    }

    /// Original column indices for a standardized support.
    pub fn original_support(&self, support: &[usize]) -> Vec<usize> {
        support.iter().map(|&k| self.kept[k]).collect()
    }
}
