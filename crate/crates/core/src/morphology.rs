//! Euclidean distance transform and disc dilation of binary masks.

use crate::model::BinaryMask;

/// Squared Euclidean distance from every pixel to the nearest foreground pixel.
///
/// Exact separable lower-envelope transform (Felzenszwalb & Huttenlocher).
/// An empty mask yields `f64::INFINITY` everywhere.
pub fn squared_distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let mut grid: Vec<f64> = mask
        .data()
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();

    let n = w.max(h);
    let mut scratch = Envelope::with_capacity(n);
    let mut column = vec![0.0; h];
    let mut out = vec![0.0; n];

    for x in 0..w {
        for y in 0..h {
            column[y] = grid[y * w + x];
        }
        scratch.transform(&column, &mut out[..h]);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for row in grid.chunks_exact_mut(w) {
        scratch.transform(row, &mut out[..w]);
        row.copy_from_slice(&out[..w]);
    }
    grid
}

/// Euclidean distance to the nearest foreground pixel (0 inside the mask).
pub fn distance_transform(mask: &BinaryMask) -> Vec<f64> {
    squared_distance_transform(mask).into_iter().map(f64::sqrt).collect()
}

/// Dilation by a Euclidean disc: a pixel is set iff some input foreground
/// pixel lies within distance `radius`.
pub fn dilate(mask: &BinaryMask, radius: u32) -> BinaryMask {
    if radius == 0 || mask.is_empty() {
        return mask.clone();
    }
    let r2 = (radius as f64) * (radius as f64);
    let data = squared_distance_transform(mask)
        .into_iter()
        .map(|d| d <= r2)
        .collect();
    BinaryMask::from_vec(mask.width(), mask.height(), data).expect("same dimensions")
}

struct Envelope {
    vertices: Vec<usize>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Envelope {
            vertices: vec![0; n],
            bounds: vec![0.0; n + 1],
        }
    }

    /// 1-D squared distance transform of the sampled function `f`.
    fn transform(&mut self, f: &[f64], out: &mut [f64]) {
        let n = f.len();
        let Some(first) = f.iter().position(|v| v.is_finite()) else {
            out.fill(f64::INFINITY);
            return;
        };
        let v = &mut self.vertices;
        let z = &mut self.bounds;
        let mut k = 0usize;
        v[0] = first;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in first + 1..n {
            if !f[q].is_finite() {
                continue;
            }
            let qf = q as f64;
            loop {
                let p = v[k];
                let pf = p as f64;
                let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf);
                if s <= z[k] && k > 0 {
                    k -= 1;
                    continue;
                }
                if s <= z[k] {
                    // Parabola at q dominates the only one on the envelope.
                    v[0] = q;
                    z[1] = f64::INFINITY;
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    z[k + 1] = f64::INFINITY;
                }
                break;
            }
        }
        let mut k = 0usize;
        for (q, slot) in out.iter_mut().enumerate() {
            let qf = q as f64;
            while z[k + 1] < qf {
                k += 1;
            }
            let d = qf - v[k] as f64;
            *slot = d * d + f[v[k]];
        }
    }
}
