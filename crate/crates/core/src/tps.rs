//! Thin-plate-spline interpolation in the plane.
//!
//! Solves the standard bordered system
//!
//! ```text
//! | K + ridge·I   P | | w |   | v |
//! | Pᵀ            0 | | a | = | 0 |
//! ```
//!
//! with `K[i][j] = U(|p_i − p_j|)`, `U(r) = r² ln r²` and `P` the rows `[1, x, y]`,
//! once per output coordinate.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Ridge added to the kernel block diagonal.
pub const TPS_RIDGE: f64 = 1e-9;

/// Radial kernel `r² ln r²`, written in terms of the squared radius.
pub fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// A fitted planar thin-plate spline mapping `sources[i]` onto `targets[i]`.
#[derive(Debug, Clone)]
pub struct ThinPlateSpline {
    centers: Vec<[f64; 2]>,
    /// Kernel weights per center, one column per output coordinate.
    weights: Vec<[f64; 2]>,
    /// Affine part `a0 + a1·x + a2·y` per output coordinate.
    affine: [[f64; 3]; 2],
}

impl ThinPlateSpline {
    pub fn fit(sources: &[[f64; 2]], targets: &[[f64; 2]]) -> Result<Self> {
        if sources.len() != targets.len() {
            return Err(Error::InvalidParameter(format!(
                "{} source points but {} targets",
                sources.len(),
                targets.len()
            )));
        }
        let n = sources.len();
        if n < 3 {
            return Err(Error::InvalidParameter(format!(
                "thin-plate spline needs at least 3 control points, got {n}"
            )));
        }
        if is_degenerate(sources) {
            return Err(Error::DegenerateControlPoints { attempts: 1 });
        }

        let m = n + 3;
        let mut system = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                let k = tps_kernel(dist2(sources[i], sources[j]));
                system[(i, j)] = if i == j { k + TPS_RIDGE } else { k };
            }
            let row = [1.0, sources[i][0], sources[i][1]];
            for (c, &v) in row.iter().enumerate() {
                system[(i, n + c)] = v;
                system[(n + c, i)] = v;
            }
        }
        let mut rhs = DMatrix::<f64>::zeros(m, 2);
        for (i, t) in targets.iter().enumerate() {
            rhs[(i, 0)] = t[0];
            rhs[(i, 1)] = t[1];
        }
        let solution = system
            .lu()
            .solve(&rhs)
            .ok_or(Error::DegenerateControlPoints { attempts: 1 })?;
        if solution.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateControlPoints { attempts: 1 });
        }

        let weights = (0..n).map(|i| [solution[(i, 0)], solution[(i, 1)]]).collect();
        let affine = [
            [solution[(n, 0)], solution[(n + 1, 0)], solution[(n + 2, 0)]],
            [solution[(n, 1)], solution[(n + 1, 1)], solution[(n + 2, 1)]],
        ];
        Ok(ThinPlateSpline {
            centers: sources.to_vec(),
            weights,
            affine,
        })
    }

    pub fn eval(&self, p: [f64; 2]) -> [f64; 2] {
        let mut out = [
            self.affine[0][0] + self.affine[0][1] * p[0] + self.affine[0][2] * p[1],
            self.affine[1][0] + self.affine[1][1] * p[0] + self.affine[1][2] * p[1],
        ];
        for (c, w) in self.centers.iter().zip(&self.weights) {
            let u = tps_kernel(dist2(p, *c));
            out[0] += w[0] * u;
            out[1] += w[1] * u;
        }
        out
    }

    pub fn centers(&self) -> &[[f64; 2]] {
        &self.centers
    }

    /// Largest residual of the interpolation conditions over `targets`.
    pub fn max_residual(&self, targets: &[[f64; 2]]) -> f64 {
        self.centers
            .iter()
            .zip(targets)
            .map(|(c, t)| {
                let e = self.eval(*c);
                (e[0] - t[0]).abs().max((e[1] - t[1]).abs())
            })
            .fold(0.0, f64::max)
    }

    /// Norm of the side conditions `Pᵀ w = 0`; zero for an exact solve.
    pub fn side_condition_residual(&self) -> f64 {
        let mut acc = [[0.0f64; 3]; 2];
        for (c, w) in self.centers.iter().zip(&self.weights) {
            for d in 0..2 {
                acc[d][0] += w[d];
                acc[d][1] += w[d] * c[0];
                acc[d][2] += w[d] * c[1];
            }
        }
        acc.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// All points (nearly) collinear, which leaves the affine block singular, or
/// two points (nearly) coincident, which duplicates kernel rows.
pub fn is_degenerate(points: &[[f64; 2]]) -> bool {
    for (i, a) in points.iter().enumerate() {
        if points[i + 1..].iter().any(|b| dist2(*a, *b) < 1e-12) {
            return true;
        }
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let dx = p[0] - mx;
        let dy = p[1] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    // Smallest eigenvalue of the scatter matrix.
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = ((tr * tr / 4.0) - det).max(0.0).sqrt();
    let minor = tr / 2.0 - disc;
    minor <= 1e-6 * tr.max(1e-12) || tr < 1e-9
}
