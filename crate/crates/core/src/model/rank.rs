//! Numerical rank of attention maps via one-sided Jacobi SVD.

use crate::error::{Error, Result};
use crate::model::network::AttentionRecord;

/// Singular values of a row-major `m × n` matrix, descending.
///
/// One-sided (Hestenes) Jacobi: columns of the taller orientation are
/// rotated pairwise until mutually orthogonal; the singular values are the
/// final column norms.
pub fn singular_values(a: &[f64], m: usize, n: usize) -> Result<Vec<f64>> {
    if a.len() != m * n {
        return Err(Error::config("matrix", format!("{} entries for {m}x{n}", a.len())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(tensorad::Error::NonFinite { op: "singular_values" }.into());
    }
    // Work on columns of a rows×cols matrix with rows >= cols, column-major.
    let (rows, cols, mut u) = if m >= n {
        let mut u = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                u[j * m + i] = a[i * n + j];
            }
        }
        (m, n, u)
    } else {
        (n, m, a.to_vec())
    };
    let tol = f64::EPSILON;
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (cp, cq) = (p * rows, q * rows);
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for k in 0..rows {
                    let (x, y) = (u[cp + k], u[cq + k]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..rows {
                    let (x, y) = (u[cp + k], u[cq + k]);
                    u[cp + k] = c * x - s * y;
                    u[cq + k] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..cols)
        .map(|j| u[j * rows..(j + 1) * rows].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Relative threshold `max(m, n) · epsilon · factor`.
pub fn rank_tolerance(m: usize, n: usize, epsilon: f64, factor: f64) -> f64 {
    m.max(n) as f64 * epsilon * factor
}

/// `#{σ_i > rel_tol · σ_max}`.
pub fn numerical_rank(a: &[f64], m: usize, n: usize, rel_tol: f64) -> Result<usize> {
    let sv = singular_values(a, m, n)?;
    let Some(&max) = sv.first() else { return Ok(0) };
    if max == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > rel_tol * max).count())
}

pub const DEFAULT_RANK_FACTOR: f64 = 1e3;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRank {
    pub layer: usize,
    pub mean: f64,
    pub min: usize,
    pub max: usize,
}

/// Mean, min and max numerical rank per encoder layer over all heads and
/// records. The threshold uses each record's own machine epsilon.
pub fn attention_rank_report(records: &[AttentionRecord], factor: f64) -> Result<Vec<LayerRank>> {
    let layers = records.iter().map(|r| r.layers.len()).max().unwrap_or(0);
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut ranks = Vec::new();
        for rec in records {
            for map in rec.layers.get(l).into_iter().flatten() {
                let (m, n) = map.dims2();
                let tol = rank_tolerance(m, n, rec.epsilon, factor);
                ranks.push(numerical_rank(map.data(), m, n, tol)?);
            }
        }
        if ranks.is_empty() {
            continue;
        }
        out.push(LayerRank {
            layer: l,
            mean: ranks.iter().sum::<usize>() as f64 / ranks.len() as f64,
            min: *ranks.iter().min().unwrap(),
            max: *ranks.iter().max().unwrap(),
        });
    }
    Ok(out)
}

pub fn rank_report_csv(report: &[LayerRank]) -> String {
    let mut s = String::from("layer,mean_rank,min,max\n");
    for r in report {
        s.push_str(&format!("{},{},{},{}\n", r.layer, r.mean, r.min, r.max));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_uniform() {
        let n = 9;
        let eye: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
        let tol = rank_tolerance(n, n, f64::EPSILON, DEFAULT_RANK_FACTOR);
        assert_eq!(numerical_rank(&eye, n, n, tol).unwrap(), n);
        let uni = vec![1.0 / n as f64; n * n];
        assert_eq!(numerical_rank(&uni, n, n, tol).unwrap(), 1);
    }

    #[test]
    fn rectangular_known_values() {
        // diag(3, 2) padded with a zero row, then columns swapped.
        let a = [0.0, 3.0, 2.0, 0.0, 0.0, 0.0];
        let sv = singular_values(&a, 3, 2).unwrap();
        assert!((sv[0] - 3.0).abs() < 1e-14 && (sv[1] - 2.0).abs() < 1e-14);
        let wide = [0.0, 2.0, 0.0, 3.0, 0.0, 0.0];
        let sv = singular_values(&wide, 2, 3).unwrap();
        assert!((sv[0] - 3.0).abs() < 1e-14 && (sv[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(singular_values(&[f64::NAN, 0.0, 0.0, 1.0], 2, 2).is_err());
    }
}
