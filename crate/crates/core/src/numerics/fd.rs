//! Central finite-difference oracles.

use super::{GridTensor, ParamGrads, ParameterStore};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference Jacobian of `f` at `x`; column `j` is
/// `(f(x + h·e_j) − f(x − h·e_j)) / 2h`. Returns an `out×in` matrix.
pub fn numerical_jacobian<F>(f: F, x: &GridTensor, h: f64) -> Result<GridTensor>
where
    F: Fn(&GridTensor) -> Result<GridTensor>,
{
    let n = x.numel();
    let mut cols = Vec::with_capacity(n);
    let mut probe = x.clone();
    for j in 0..n {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[j] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[j] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!("non-finite output when perturbing input {j}")));
        }
        cols.push(
            plus.data()
                .iter()
                .zip(minus.data())
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect::<Vec<_>>(),
        );
    }
    let m = cols[0].len();
    let mut data = vec![0.0; m * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            data[i * n + j] = v;
        }
    }
    GridTensor::matrix(m, n, data)
}

/// `log|det(a)|` of a square matrix by LU decomposition with partial pivoting.
pub fn log_abs_det(a: &GridTensor) -> Result<f64> {
    let (n, n2) = a.dims2()?;
    if n != n2 {
        return Err(Error::Oracle(format!("determinant of non-square {n}×{n2} matrix")));
    }
    let mut m = a.data().to_vec();
    let mut total = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap();
        let pv = m[pivot * n + col];
        if pv == 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        if pivot != col {
            for k in 0..n {
                m.swap(pivot * n + k, col * n + k);
            }
        }
        total += pv.abs().ln();
        for row in col + 1..n {
            let factor = m[row * n + col] / pv;
            for k in col..n {
                m[row * n + k] -= factor * m[col * n + k];
            }
        }
    }
    Ok(total)
}

/// Result of comparing analytic parameter gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error with an absolute floor so that gradients that are zero in
/// exact arithmetic are compared on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Perturbs every scalar of every parameter whose name passes `filter` and
/// compares the central difference of `loss` with `analytic`.
pub fn check_param_gradients<F>(
    loss: F,
    params: &ParameterStore,
    analytic: &ParamGrads,
    filter: impl Fn(&str) -> bool,
    h: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore) -> Result<f64>,
{
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let names: Vec<String> = params.names().filter(|n| filter(n)).cloned().collect();
    for name in names {
        let grad = analytic
            .get(&name)
            .cloned()
            .unwrap_or_else(|| GridTensor::zeros(params.get(&name).unwrap().shape()));
        for i in 0..grad.numel() {
            let orig = probe.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + h;
            let plus = loss(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - h;
            let minus = loss(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::Oracle(format!("non-finite loss probing {name}[{i}]")));
            }
            let err = relative_error(grad.data()[i], numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
