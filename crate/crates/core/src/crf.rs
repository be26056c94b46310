//! Fully connected two-label CRF over a short window of frames.
//!
//! Energy of a labeling `l`:
//!
//! ```text
//! E(l) = Σ_i ψ_i(l_i) + Σ_{i<j} k(i,j)·[l_i ≠ l_j]
//! k(i,j) = w_a·exp(−‖I_i−I_j‖²/2σ_rgb² − ‖p_i−p_j‖²/2σ_xyt²)
//!        + w_s·[t_i = t_j]·exp(−‖p_i−p_j‖²/2σ_xy²)
//! ```
//!
//! `ψ_i(l) = −ln P_i(l)` with probabilities clamped away from 0 and 1.
//! Positions use pixel units for x, y and the frame offset for t. Pairs
//! further apart than three standard deviations are dropped.
//!
//! Inference is mean field. Pixels are updated one at a time in raster
//! order, each update exactly minimizing the free energy over that pixel's
//! marginal, so the free energy never increases.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BinaryMask, Image, ScoreMap};

/// Unary probabilities are clamped to `[UNARY_CLAMP, 1 − UNARY_CLAMP]`.
pub const UNARY_CLAMP: f64 = 1e-5;

/// Largest instance `crf_exact_map` will enumerate.
pub const EXACT_MAX_PIXELS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfParams {
    pub iterations: usize,
    pub appearance_weight: f64,
    pub appearance_rgb_sigma: f64,
    pub appearance_xyt_sigma: f64,
    pub smoothness_weight: f64,
    pub smoothness_xy_sigma: f64,
    pub temporal_window: usize,
    /// Stop early once no marginal moves by more than this in a sweep; 0 runs every iteration.
    pub tolerance: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            iterations: 10,
            appearance_weight: 5.0,
            appearance_rgb_sigma: 10.0,
            appearance_xyt_sigma: 5.0,
            smoothness_weight: 1.0,
            smoothness_xy_sigma: 1.0,
            temporal_window: 3,
            tolerance: 1e-4,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("crf: {m}")));
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        for (name, s) in [
            ("appearance_rgb_sigma", self.appearance_rgb_sigma),
            ("appearance_xyt_sigma", self.appearance_xyt_sigma),
            ("smoothness_xy_sigma", self.smoothness_xy_sigma),
        ] {
            if !(s > 0.0 && s.is_finite()) {
                return bad(&format!("{name} must be > 0"));
            }
        }
        for (name, w) in [
            ("appearance_weight", self.appearance_weight),
            ("smoothness_weight", self.smoothness_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(&format!("{name} must be >= 0"));
            }
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return bad("tolerance must be >= 0");
        }
        if self.temporal_window == 0 || self.temporal_window.is_multiple_of(2) {
            return bad("temporal_window must be odd");
        }
        Ok(())
    }
}

/// A neighbor displacement and its position-only kernel weights.
#[derive(Debug, Clone, Copy)]
struct Offset {
    dx: i32,
    dy: i32,
    dt: i32,
    appearance: f64,
    smoothness: f64,
}

fn offsets(params: &CrfParams, frames: usize) -> Vec<Offset> {
    let mut out = Vec::new();
    let sa = params.appearance_xyt_sigma;
    let ss = params.smoothness_xy_sigma;
    let ra = if params.appearance_weight > 0.0 { (3.0 * sa).floor() as i32 } else { 0 };
    let rs = if params.smoothness_weight > 0.0 { (3.0 * ss).floor() as i32 } else { 0 };
    let r = ra.max(rs);
    let max_dt = (frames as i32 - 1).min(ra);
    for dt in -max_dt..=max_dt {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx == 0 && dy == 0 && dt == 0 {
                    continue;
                }
                let d2 = (dx * dx + dy * dy) as f64;
                let d2t = d2 + (dt * dt) as f64;
                let appearance = if params.appearance_weight > 0.0 && d2t <= 9.0 * sa * sa {
                    params.appearance_weight * (-d2t / (2.0 * sa * sa)).exp()
                } else {
                    0.0
                };
                let smoothness = if params.smoothness_weight > 0.0 && dt == 0 && d2 <= 9.0 * ss * ss {
                    params.smoothness_weight * (-d2 / (2.0 * ss * ss)).exp()
                } else {
                    0.0
                };
                if appearance > 0.0 || smoothness > 0.0 {
                    out.push(Offset {
                        dx,
                        dy,
                        dt,
                        appearance,
                        smoothness,
                    });
                }
            }
        }
    }
    out
}

/// Mean-field state for one window.
#[derive(Debug, Clone)]
pub struct MeanField {
    width: usize,
    height: usize,
    frames: usize,
    colors: Vec<[u8; 3]>,
    /// `−ln P` per pixel, `[background, foreground]`.
    unary: Vec<[f64; 2]>,
    q: Vec<[f64; 2]>,
    offsets: Vec<Offset>,
    /// `exp(−c/2σ_rgb²)` indexed by integer squared color distance `c`.
    color_lut: Vec<f64>,
}

fn clamp_probability(p: f32) -> f64 {
    (p as f64).clamp(UNARY_CLAMP, 1.0 - UNARY_CLAMP)
}

fn check_window(frames: &[Image], unaries: &[ScoreMap]) -> Result<(u32, u32)> {
    if frames.is_empty() {
        return Err(Error::Crf("empty window".into()));
    }
    if frames.len() != unaries.len() {
        return Err(Error::Crf(format!(
            "{} frames but {} unary maps",
            frames.len(),
            unaries.len()
        )));
    }
    let dims = frames[0].dims();
    for (f, u) in frames.iter().zip(unaries) {
        if f.dims() != dims {
            return Err(Error::DimensionMismatch {
                context: "crf frame".into(),
                expected: dims,
                actual: f.dims(),
            });
        }
        if u.dims() != dims {
            return Err(Error::DimensionMismatch {
                context: "crf unary".into(),
                expected: dims,
                actual: u.dims(),
            });
        }
    }
    Ok(dims)
}

impl MeanField {
    /// Marginals start at the clamped unary probabilities.
    pub fn new(frames: &[Image], unaries: &[ScoreMap], params: &CrfParams) -> Result<MeanField> {
        params.validate()?;
        let (w, h) = check_window(frames, unaries)?;
        let mut colors = Vec::with_capacity(frames.len() * (w * h) as usize);
        let mut unary = Vec::with_capacity(colors.capacity());
        let mut q = Vec::with_capacity(colors.capacity());
        for (f, u) in frames.iter().zip(unaries) {
            for y in 0..h {
                for x in 0..w {
                    colors.push(f.rgb(x, y));
                    let p = clamp_probability(u.get(x, y));
                    unary.push([-(1.0 - p).ln(), -p.ln()]);
                    q.push([1.0 - p, p]);
                }
            }
        }
        let s2 = 2.0 * params.appearance_rgb_sigma * params.appearance_rgb_sigma;
        let color_lut = (0..=3 * 255 * 255).map(|c| (-(c as f64) / s2).exp()).collect();
        Ok(MeanField {
            width: w as usize,
            height: h as usize,
            frames: frames.len(),
            colors,
            unary,
            q,
            offsets: offsets(params, frames.len()),
            color_lut,
        })
    }

    pub fn marginals(&self) -> &[[f64; 2]] {
        &self.q
    }

    fn index(&self, x: usize, y: usize, t: usize) -> usize {
        (t * self.height + y) * self.width + x
    }

    /// Call `f(j, k(i,j))` for every neighbor `j` of pixel `(x, y, t)`.
    fn for_neighbors(&self, x: usize, y: usize, t: usize, mut f: impl FnMut(usize, f64)) {
        let i = self.index(x, y, t);
        let ci = self.colors[i];
        for o in &self.offsets {
            let (nx, ny, nt) = (x as i32 + o.dx, y as i32 + o.dy, t as i32 + o.dt);
            if nx < 0 || ny < 0 || nt < 0 || nx >= self.width as i32 || ny >= self.height as i32 || nt >= self.frames as i32 {
                continue;
            }
            let j = self.index(nx as usize, ny as usize, nt as usize);
            let mut k = o.smoothness;
            if o.appearance > 0.0 {
                let cj = self.colors[j];
                let c2: i32 = (0..3).map(|c| (ci[c] as i32 - cj[c] as i32).pow(2)).sum();
                k += o.appearance * self.color_lut[c2 as usize];
            }
            f(j, k);
        }
    }

    /// One pass of coordinate updates over every pixel. Returns the largest
    /// change of any foreground marginal.
    pub fn sweep(&mut self) -> f64 {
        let mut delta: f64 = 0.0;
        for t in 0..self.frames {
            for y in 0..self.height {
                for x in 0..self.width {
                    let i = self.index(x, y, t);
                    // Potts: log Q_i(l) = −ψ_i(l) + Σ_j k_ij·Q_j(l) + const.
                    let mut m = 0.0;
                    self.for_neighbors(x, y, t, |j, k| m += k * (self.q[j][1] - self.q[j][0]));
                    let logit = self.unary[i][0] - self.unary[i][1] + m;
                    let fg = 1.0 / (1.0 + (-logit).exp());
                    delta = delta.max((fg - self.q[i][1]).abs());
                    self.q[i] = [1.0 - fg, fg];
                }
            }
        }
        delta
    }

    /// Mean-field free energy `E_Q[E] − H(Q)`.
    pub fn free_energy(&self) -> f64 {
        let mut unary = 0.0;
        let mut entropy = 0.0;
        let mut pairwise = 0.0;
        for t in 0..self.frames {
            for y in 0..self.height {
                for x in 0..self.width {
                    let i = self.index(x, y, t);
                    let qi = self.q[i];
                    for (q, u) in qi.iter().zip(self.unary[i]) {
                        unary += q * u;
                        if *q > 0.0 {
                            entropy -= q * q.ln();
                        }
                    }
                    self.for_neighbors(x, y, t, |j, k| {
                        let qj = self.q[j];
                        pairwise += k * (qi[0] * qj[1] + qi[1] * qj[0]);
                    });
                }
            }
        }
        // Every unordered pair was visited from both ends.
        unary + 0.5 * pairwise - entropy
    }

    /// Energy of a hard labeling, `true` = foreground.
    pub fn energy(&self, labels: &[bool]) -> f64 {
        let mut e = 0.0;
        for t in 0..self.frames {
            for y in 0..self.height {
                for x in 0..self.width {
                    let i = self.index(x, y, t);
                    e += self.unary[i][labels[i] as usize];
                    self.for_neighbors(x, y, t, |j, k| {
                        if j > i && labels[i] != labels[j] {
                            e += k;
                        }
                    });
                }
            }
        }
        e
    }

    /// Foreground marginals, one map per frame.
    pub fn foreground_scores(&self) -> Vec<ScoreMap> {
        let n = self.width * self.height;
        (0..self.frames)
            .map(|t| {
                let data = self.q[t * n..(t + 1) * n]
                    .iter()
                    .map(|q| (q[1] as f32).clamp(0.0, 1.0))
                    .collect();
                ScoreMap::new(self.width as u32, self.height as u32, data).expect("clamped")
            })
            .collect()
    }
}

/// Mean-field marginals for a full window.
pub fn crf_refine(frames: &[Image], unaries: &[ScoreMap], params: &CrfParams) -> Result<Vec<ScoreMap>> {
    if frames.len() != params.temporal_window {
        return Err(Error::Crf(format!(
            "window of {} frames, expected {}",
            frames.len(),
            params.temporal_window
        )));
    }
    let mut field = MeanField::new(frames, unaries, params)?;
    for _ in 0..params.iterations {
        if field.sweep() <= params.tolerance {
            break;
        }
    }
    Ok(field.foreground_scores())
}

/// Minimum-energy labeling by enumeration.
pub fn crf_exact_map(frames: &[Image], unaries: &[ScoreMap], params: &CrfParams) -> Result<Vec<BinaryMask>> {
    let field = MeanField::new(frames, unaries, params)?;
    let n = field.q.len();
    if n > EXACT_MAX_PIXELS {
        return Err(Error::Crf(format!(
            "{n} pixels is too many to enumerate (limit {EXACT_MAX_PIXELS})"
        )));
    }
    let mut best = (f64::INFINITY, 0u32);
    let mut labels = vec![false; n];
    for code in 0..1u32 << n {
        for (b, l) in labels.iter_mut().enumerate() {
            *l = code >> b & 1 == 1;
        }
        let e = field.energy(&labels);
        if e < best.0 {
            best = (e, code);
        }
    }
    let per = field.width * field.height;
    Ok((0..field.frames)
        .map(|t| {
            let data = (0..per).map(|p| best.1 >> (t * per + p) & 1 == 1).collect();
            BinaryMask::from_vec(field.width as u32, field.height as u32, data).expect("sized")
        })
        .collect())
}

/// Slide the window over the sequence, replicating the end frames, and
/// threshold each center frame's marginals.
pub fn postprocess_sequence(
    frames: &[Image],
    scores: &[ScoreMap],
    params: &CrfParams,
    tau: f32,
) -> Result<Vec<BinaryMask>> {
    params.validate()?;
    check_window(frames, scores)?;
    let n = frames.len() as i64;
    let half = (params.temporal_window / 2) as i64;
    (0..n)
        .into_par_iter()
        .map(|t| {
            let idx: Vec<usize> = (t - half..=t + half).map(|s| s.clamp(0, n - 1) as usize).collect();
            let wf: Vec<Image> = idx.iter().map(|&s| frames[s].clone()).collect();
            let ws: Vec<ScoreMap> = idx.iter().map(|&s| scores[s].clone()).collect();
            let out = crf_refine(&wf, &ws, params).map_err(|e| Error::Crf(format!("window at frame {t}: {e}")))?;
            Ok(crate::model::threshold(&out[half as usize], tau))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::threshold;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(rng: &mut impl Rng, w: u32, h: u32, frames: usize) -> (Vec<Image>, Vec<ScoreMap>) {
        let imgs = (0..frames)
            .map(|_| Image::from_rgb_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap())
            .collect();
        let un = (0..frames)
            .map(|_| ScoreMap::new(w, h, (0..w * h).map(|_| rng.gen::<f32>()).collect()).unwrap())
            .collect();
        (imgs, un)
    }

    fn single_frame(params: &CrfParams) -> CrfParams {
        CrfParams { temporal_window: 1, ..params.clone() }
    }

    #[test]
    fn zero_weights_return_clamped_unaries() {
        let p = CrfParams { appearance_weight: 0.0, smoothness_weight: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (imgs, mut un) = random_instance(&mut rng, 6, 5, 3);
        un[1] = ScoreMap::new(6, 5, (0..30).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 }).collect()).unwrap();
        let out = crf_refine(&imgs, &un, &p).unwrap();
        for (o, u) in out.iter().zip(&un) {
            for (a, b) in o.data().iter().zip(u.data()) {
                assert_eq!(*a, clamp_probability(*b) as f32);
            }
        }
    }

    #[test]
    fn agreement_is_a_fixed_point() {
        let imgs = vec![Image::from_rgb_fn(5, 5, |_, _| [90, 90, 90]).unwrap(); 3];
        let un = vec![ScoreMap::filled(5, 5, 1.0).unwrap(); 3];
        let out = crf_refine(&imgs, &un, &CrfParams::default()).unwrap();
        assert!(out.iter().all(|s| threshold(s, 0.5).count() == 25));
    }

    #[test]
    fn exact_map_examples() {
        let p = single_frame(&CrfParams::default());
        let one = [Image::from_rgb_fn(1, 1, |_, _| [0, 0, 0]).unwrap()];
        let m = crf_exact_map(&one, &[ScoreMap::filled(1, 1, 0.9).unwrap()], &p).unwrap();
        assert!(m[0].get(0, 0));

        let two = [Image::from_rgb_fn(2, 1, |_, _| [40, 40, 40]).unwrap()];
        let un = [ScoreMap::new(2, 1, vec![0.6, 0.45]).unwrap()];
        let strong = CrfParams { appearance_weight: 50.0, ..p.clone() };
        let m = crf_exact_map(&two, &un, &strong).unwrap();
        assert_eq!(m[0].count(), 2);
        // Enumerated energies: both foreground wins.
        let f = MeanField::new(&two, &un, &strong).unwrap();
        let both_fg = f.energy(&[true, true]);
        for l in [[false, false], [true, false], [false, true]] {
            assert!(both_fg < f.energy(&l));
        }

        let zero = CrfParams { appearance_weight: 0.0, smoothness_weight: 0.0, ..p };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (imgs, un) = random_instance(&mut rng, 4, 4, 1);
        let m = crf_exact_map(&imgs, &un, &zero).unwrap();
        assert_eq!(m[0], threshold(&un[0], 0.5));
    }

    #[test]
    fn exact_map_rejects_large_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (imgs, un) = random_instance(&mut rng, 5, 5, 1);
        assert!(crf_exact_map(&imgs, &un, &single_frame(&CrfParams::default())).is_err());
    }

    #[test]
    fn brute_force_energy_matches_pair_sum() {
        // Independent pairwise sum with the full kernel formula.
        let p = CrfParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (imgs, un) = random_instance(&mut rng, 3, 2, 3);
        let f = MeanField::new(&imgs, &un, &p).unwrap();
        let labels: Vec<bool> = (0..18).map(|_| rng.gen()).collect();
        let mut pts = Vec::new();
        for (t, (img, u)) in imgs.iter().zip(&un).enumerate() {
            for y in 0..2 {
                for x in 0..3 {
                    pts.push((x as f64, y as f64, t as f64, img.rgb(x, y), clamp_probability(u.get(x, y))));
                }
            }
        }
        let mut e = 0.0;
        for (i, a) in pts.iter().enumerate() {
            e += if labels[i] { -a.4.ln() } else { -(1.0 - a.4).ln() };
            for (j, b) in pts.iter().enumerate().skip(i + 1) {
                if labels[i] == labels[j] {
                    continue;
                }
                let d2 = (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2);
                let dt2 = (a.2 - b.2).powi(2);
                let c2: f64 = (0..3).map(|c| (a.3[c] as f64 - b.3[c] as f64).powi(2)).sum();
                e += 5.0 * (-c2 / 200.0 - (d2 + dt2) / 50.0).exp();
                if dt2 == 0.0 && d2 <= 9.0 {
                    e += (-d2 / 2.0).exp();
                }
            }
        }
        assert!((f.energy(&labels) - e).abs() < 1e-9, "{} vs {e}", f.energy(&labels));
    }

    #[test]
    fn marginals_normalized_and_free_energy_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..3 {
            let (imgs, un) = random_instance(&mut rng, 16, 16, 3);
            let mut f = MeanField::new(&imgs, &un, &CrfParams::default()).unwrap();
            let mut prev = f.free_energy();
            for sweep in 0..10 {
                f.sweep();
                assert!(f.marginals().iter().all(|q| (q[0] + q[1] - 1.0).abs() <= 1e-6));
                let fe = f.free_energy();
                assert!(fe <= prev + 1e-9 * prev.abs().max(1.0), "trial {trial} sweep {sweep}: {prev} -> {fe}");
                prev = fe;
            }
        }
    }

    #[test]
    fn label_swap_gives_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (imgs, un) = random_instance(&mut rng, 7, 6, 3);
        let flipped: Vec<ScoreMap> = un
            .iter()
            .map(|s| ScoreMap::new(7, 6, s.data().iter().map(|v| 1.0 - v).collect()).unwrap())
            .collect();
        let a = crf_refine(&imgs, &un, &CrfParams::default()).unwrap();
        let b = crf_refine(&imgs, &flipped, &CrfParams::default()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert!((u + v - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn window_and_dimension_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (imgs, un) = random_instance(&mut rng, 4, 4, 2);
        assert!(crf_refine(&imgs, &un, &CrfParams::default()).is_err());
        let (imgs3, un3) = random_instance(&mut rng, 4, 4, 3);
        assert!(crf_refine(&imgs3, &un3[..2], &CrfParams::default()).is_err());
        let mut bad = un3.clone();
        bad[2] = ScoreMap::filled(3, 4, 0.5).unwrap();
        assert!(crf_refine(&imgs3, &bad, &CrfParams::default()).is_err());
        assert!(CrfParams { temporal_window: 2, ..Default::default() }.validate().is_err());
        assert!(CrfParams { iterations: 0, ..Default::default() }.validate().is_err());
        assert!(CrfParams { smoothness_xy_sigma: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn single_frame_sequence_is_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (imgs, un) = random_instance(&mut rng, 6, 6, 1);
        let out = postprocess_sequence(&imgs, &un, &CrfParams::default(), 0.5).unwrap();
        let tripled = crf_refine(&vec![imgs[0].clone(); 3], &vec![un[0].clone(); 3], &CrfParams::default()).unwrap();
        assert_eq!(out, vec![threshold(&tripled[1], 0.5)]);
    }

    #[test]
    fn zero_weights_postprocess_is_threshold() {
        let p = CrfParams { appearance_weight: 0.0, smoothness_weight: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (imgs, un) = random_instance(&mut rng, 6, 6, 4);
        let out = postprocess_sequence(&imgs, &un, &p, 0.5).unwrap();
        for (o, u) in out.iter().zip(&un) {
            assert_eq!(o, &threshold(u, 0.5));
        }
    }

    #[test]
    fn salt_noise_is_removed() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let imgs = vec![Image::from_rgb_fn(8, 8, |_, _| [120, 60, 30]).unwrap(); 4];
        let un: Vec<ScoreMap> = (0..4)
            .map(|_| ScoreMap::new(8, 8, (0..64).map(|_| if rng.gen_bool(0.1) { 0.2 } else { 0.8 }).collect()).unwrap())
            .collect();
        let out = postprocess_sequence(&imgs, &un, &CrfParams::default(), 0.5).unwrap();
        assert!(out.iter().all(|m| m.count() == 64));
    }
}
