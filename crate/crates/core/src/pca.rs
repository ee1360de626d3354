//! Two-component PCA by eigendecomposition of the sample covariance.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub mean: Vec<f64>,
    /// Unit principal axes, strongest first. Each axis is oriented so that
    /// its largest-magnitude entry is positive.
    pub axes: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    /// One `[pc1, pc2]` pair per input row.
    pub coordinates: Vec<[f64; 2]>,
}

/// Projects `rows` onto their two leading principal axes.
pub fn project_2d(rows: &[Vec<f64>]) -> Result<Projection> {
    let n = rows.len();
    let dim = rows.first().map_or(0, Vec::len);
    if n == 0 || dim == 0 {
        return Err(Error::Config("PCA needs at least one non-empty row".into()));
    }
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            actual: rows.iter().find(|r| r.len() != dim).unwrap().len(),
        });
    }
    let mean: Vec<f64> = (0..dim)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let centred = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = (centred.transpose() * &centred) / denom;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut axes = Vec::with_capacity(2);
    let mut explained_variance = Vec::with_capacity(2);
    for &idx in order.iter().take(2) {
        let mut axis: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let pivot = axis
            .iter()
            .copied()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            axis.iter_mut().for_each(|v| *v = -*v);
        }
        axes.push(axis);
        explained_variance.push(eig.eigenvalues[idx].max(0.0));
    }
    while axes.len() < 2 {
        axes.push(vec![0.0; dim]);
        explained_variance.push(0.0);
    }

    let coordinates = (0..n)
        .map(|i| {
            let row = centred.row(i);
            let p = |axis: &[f64]| row.iter().zip(axis).map(|(a, b)| a * b).sum::<f64>();
            [p(&axes[0]), p(&axes[1])]
        })
        .collect();

    Ok(Projection {
        mean,
        axes,
        explained_variance,
        coordinates,
    })
}
