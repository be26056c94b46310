//! Training-mask synthesis.
//!
//! A clean annotation is turned into a plausible "previous frame estimate" by
//! an affine jitter, a thin-plate-spline warp and a disc dilation, applied in
//! that order. The same recipe feeds the offline corpus (several synthetic
//! inputs per annotated image) and the online augmentation set (flipped and
//! rotated copies of the first-frame annotation).

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{round_half_up, BinaryMask, Image};
use crate::morphology::dilate;
use crate::tps::{is_degenerate, ThinPlateSpline};

/// Attempts at drawing a non-degenerate control configuration.
pub const TPS_MAX_ATTEMPTS: usize = 16;

/// Seeded generator used by every synthesis routine.
pub type SynthRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SynthRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformationParams {
    /// Scale factor drawn from `[1 - s, 1 + s]`.
    pub scale_jitter: f64,
    /// Shift drawn within `±t` of the object's bounding-box width/height.
    pub translate_jitter: f64,
    pub tps_control_points: usize,
    /// Control-point shift within `±j` of the bounding-box width/height.
    pub tps_point_jitter: f64,
    pub dilation_radius: u32,
    pub enable_affine: bool,
    pub enable_nonrigid: bool,
    pub enable_dilation: bool,
    /// Draw independent x/y scale factors.
    pub anisotropic_scale: bool,
    pub rng_seed: u64,
}

impl Default for DeformationParams {
    fn default() -> Self {
        DeformationParams {
            scale_jitter: 0.05,
            translate_jitter: 0.10,
            tps_control_points: 5,
            tps_point_jitter: 0.10,
            dilation_radius: 5,
            enable_affine: true,
            enable_nonrigid: true,
            enable_dilation: true,
            anisotropic_scale: false,
            rng_seed: 0,
        }
    }
}

impl DeformationParams {
    /// Every stage switched off: synthesis returns the annotation unchanged.
    pub fn disabled() -> Self {
        DeformationParams {
            enable_affine: false,
            enable_nonrigid: false,
            enable_dilation: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("scale_jitter", self.scale_jitter),
            ("translate_jitter", self.translate_jitter),
            ("tps_point_jitter", self.tps_point_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if self.scale_jitter >= 1.0 {
            return Err(Error::InvalidParameter(format!(
                "scale_jitter must be < 1, got {}",
                self.scale_jitter
            )));
        }
        if self.enable_nonrigid && self.tps_control_points < 3 {
            return Err(Error::InvalidParameter(format!(
                "tps_control_points must be >= 3, got {}",
                self.tps_control_points
            )));
        }
        Ok(())
    }
}

fn require_nonempty(mask: &BinaryMask, what: &str) -> Result<crate::model::BoundingBox> {
    mask.bbox().ok_or_else(|| Error::EmptyMask(what.to_string()))
}

/// One draw of the affine jitter, in pixels about the foreground centroid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineSample {
    pub scale_x: f64,
    pub scale_y: f64,
    pub dx: f64,
    pub dy: f64,
}

impl AffineSample {
    pub const IDENTITY: AffineSample = AffineSample {
        scale_x: 1.0,
        scale_y: 1.0,
        dx: 0.0,
        dy: 0.0,
    };

    pub fn draw(params: &DeformationParams, mask: &BinaryMask, rng: &mut impl Rng) -> Result<Self> {
        let bbox = require_nonempty(mask, "affine deformation input")?;
        let s = params.scale_jitter;
        let scale_x = rng.gen_range(1.0 - s..=1.0 + s);
        let scale_y = if params.anisotropic_scale {
            rng.gen_range(1.0 - s..=1.0 + s)
        } else {
            scale_x
        };
        let tx = params.translate_jitter * bbox.width() as f64;
        let ty = params.translate_jitter * bbox.height() as f64;
        Ok(AffineSample {
            scale_x,
            scale_y,
            dx: rng.gen_range(-tx..=tx),
            dy: rng.gen_range(-ty..=ty),
        })
    }
}

/// Scale about the centroid, then translate; nearest-neighbor backward
/// warp, clipped to the canvas.
pub fn apply_affine(mask: &BinaryMask, sample: &AffineSample) -> Result<BinaryMask> {
    let (cx, cy) = mask
        .centroid()
        .ok_or_else(|| Error::EmptyMask("affine deformation input".into()))?;
    if *sample == AffineSample::IDENTITY {
        return Ok(mask.clone());
    }
    Ok(BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
        let sx = (x as f64 - cx - sample.dx) / sample.scale_x + cx;
        let sy = (y as f64 - cy - sample.dy) / sample.scale_y + cy;
        mask.get_signed(round_half_up(sx), round_half_up(sy))
    }))
}

pub fn affine_deform(mask: &BinaryMask, params: &DeformationParams, rng: &mut impl Rng) -> Result<BinaryMask> {
    let sample = AffineSample::draw(params, mask, rng)?;
    apply_affine(mask, &sample)
}

/// Control points and their displaced positions for one thin-plate warp.
#[derive(Debug, Clone, PartialEq)]
pub struct TpsSample {
    pub points: Vec<[f64; 2]>,
    pub displaced: Vec<[f64; 2]>,
}

impl TpsSample {
    /// Control points uniform over the foreground bounding box (pixel
    /// extents included), each shifted within `±jitter` of the box size.
    pub fn draw(params: &DeformationParams, mask: &BinaryMask, rng: &mut impl Rng) -> Result<Self> {
        let bbox = require_nonempty(mask, "thin-plate deformation input")?;
        if params.tps_control_points < 3 {
            return Err(Error::InvalidParameter(format!(
                "tps_control_points must be >= 3, got {}",
                params.tps_control_points
            )));
        }
        let jx = params.tps_point_jitter * bbox.width() as f64;
        let jy = params.tps_point_jitter * bbox.height() as f64;
        let x_range = bbox.x_min as f64 - 0.5..bbox.x_max as f64 + 0.5;
        let y_range = bbox.y_min as f64 - 0.5..bbox.y_max as f64 + 0.5;
        for _ in 0..TPS_MAX_ATTEMPTS {
            let points: Vec<[f64; 2]> = (0..params.tps_control_points)
                .map(|_| [rng.gen_range(x_range.clone()), rng.gen_range(y_range.clone())])
                .collect();
            if is_degenerate(&points) {
                continue;
            }
            let displaced = points
                .iter()
                .map(|p| [p[0] + rng.gen_range(-jx..=jx), p[1] + rng.gen_range(-jy..=jy)])
                .collect::<Vec<_>>();
            if is_degenerate(&displaced) {
                continue;
            }
            return Ok(TpsSample { points, displaced });
        }
        Err(Error::DegenerateControlPoints {
            attempts: TPS_MAX_ATTEMPTS,
        })
    }

    /// The backward map: displaced positions back onto the original points.
    pub fn backward_spline(&self) -> Result<ThinPlateSpline> {
        ThinPlateSpline::fit(&self.displaced, &self.points)
    }
}

/// Move content at each control point onto its displaced position; every
/// output pixel samples the input at the backward-mapped location.
pub fn apply_tps(mask: &BinaryMask, sample: &TpsSample) -> Result<BinaryMask> {
    if sample.points == sample.displaced {
        return Ok(mask.clone());
    }
    let spline = sample.backward_spline()?;
    Ok(warp_backward(mask, &spline))
}

pub fn warp_backward(mask: &BinaryMask, spline: &ThinPlateSpline) -> BinaryMask {
    BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
        let [sx, sy] = spline.eval([x as f64, y as f64]);
        mask.get_signed(round_half_up(sx), round_half_up(sy))
    })
}

pub fn tps_deform(mask: &BinaryMask, params: &DeformationParams, rng: &mut impl Rng) -> Result<BinaryMask> {
    let sample = TpsSample::draw(params, mask, rng)?;
    apply_tps(mask, &sample)
}

/// Affine, then thin-plate, then dilation, each only when enabled.
///
/// A geometric stage whose output is empty (the object pushed off the
/// canvas) is dropped and its input carried forward.
pub fn synthesize_input_mask(
    annotation: &BinaryMask,
    params: &DeformationParams,
    rng: &mut impl Rng,
) -> Result<BinaryMask> {
    if annotation.is_empty() {
        return Err(Error::EmptyMask("annotation".into()));
    }
    let mut mask = annotation.clone();
    if params.enable_affine {
        let out = affine_deform(&mask, params, rng)?;
        if !out.is_empty() {
            mask = out;
        }
    }
    if params.enable_nonrigid {
        let out = tps_deform(&mask, params, rng)?;
        if !out.is_empty() {
            mask = out;
        }
    }
    if params.enable_dilation {
        mask = dilate(&mask, params.dilation_radius);
    }
    Ok(mask)
}

/// Image, synthesized guidance and clean target at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub id: String,
    pub image: Image,
    pub input_mask: BinaryMask,
    pub target_mask: BinaryMask,
}

/// A source image for the offline corpus; `mask: None` marks it unusable.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub id: String,
    pub image: Image,
    pub mask: Option<BinaryMask>,
}

/// Streams `masks_per_image` samples per source item. Item `i` draws from
/// its own generator seeded with `seed ^ i`, so the output does not depend
/// on how items are scheduled.
pub struct OfflineCorpus<I> {
    items: I,
    params: DeformationParams,
    masks_per_image: usize,
    index: u64,
    pending: VecDeque<TrainingSample>,
    skipped: Vec<String>,
}

pub fn build_offline_corpus<I>(
    items: I,
    params: &DeformationParams,
    masks_per_image: usize,
) -> Result<OfflineCorpus<I::IntoIter>>
where
    I: IntoIterator<Item = CorpusItem>,
{
    params.validate()?;
    Ok(OfflineCorpus {
        items: items.into_iter(),
        params: params.clone(),
        masks_per_image,
        index: 0,
        pending: VecDeque::new(),
        skipped: Vec::new(),
    })
}

impl<I> OfflineCorpus<I> {
    /// Ids of items skipped so far for lacking a usable mask.
    pub fn skipped(&self) -> &[String] {
        &self.skipped
    }
}

impl<I: Iterator<Item = CorpusItem>> Iterator for OfflineCorpus<I> {
    type Item = Result<TrainingSample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(s) = self.pending.pop_front() {
                return Some(Ok(s));
            }
            let item = self.items.next()?;
            let index = self.index;
            self.index += 1;
            let mask = match item.mask {
                Some(m) if !m.is_empty() => m,
                _ => {
                    log::warn!("corpus item {} has no usable mask; skipped", item.id);
                    self.skipped.push(item.id);
                    continue;
                }
            };
            if mask.dims() != item.image.dims() {
                return Some(Err(Error::DimensionMismatch {
                    context: format!("corpus item {}", item.id),
                    expected: item.image.dims(),
                    actual: mask.dims(),
                }));
            }
            let mut rng = rng_from_seed(self.params.rng_seed ^ index);
            for k in 0..self.masks_per_image {
                match synthesize_input_mask(&mask, &self.params, &mut rng) {
                    Ok(input_mask) => self.pending.push_back(TrainingSample {
                        id: format!("{}_{k}", item.id),
                        image: item.image.clone(),
                        input_mask,
                        target_mask: mask.clone(),
                    }),
                    Err(e) => return Some(Err(e)),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationParams {
    /// Include horizontally flipped copies.
    pub flips: bool,
    /// Rotation angles in degrees; empty means no rotation.
    pub rotations: Vec<f64>,
    pub samples_target: usize,
    pub deformation: DeformationParams,
}

impl Default for AugmentationParams {
    fn default() -> Self {
        AugmentationParams {
            flips: true,
            rotations: vec![0.0, -10.0, 10.0, -20.0, 20.0],
            samples_target: 1000,
            deformation: DeformationParams::default(),
        }
    }
}

/// Augmented samples from a single annotated frame.
pub fn build_online_set(
    first_frame: &Image,
    annotation: &BinaryMask,
    params: &AugmentationParams,
) -> Result<Vec<TrainingSample>> {
    build_online_set_multi(&[(first_frame.clone(), annotation.clone())], params)
}

/// Augmented samples cycling over every annotated frame, then over
/// `{flip states} × {rotations}`, with a fresh deformation per sample.
pub fn build_online_set_multi(
    sources: &[(Image, BinaryMask)],
    params: &AugmentationParams,
) -> Result<Vec<TrainingSample>> {
    if params.samples_target == 0 {
        return Err(Error::InvalidParameter("samples_target must be >= 1".into()));
    }
    params.deformation.validate()?;
    if sources.is_empty() {
        return Err(Error::EmptyMask("no annotated frames to augment".into()));
    }
    for (i, (img, m)) in sources.iter().enumerate() {
        if m.is_empty() {
            return Err(Error::EmptyMask(format!("annotation {i}")));
        }
        if m.dims() != img.dims() {
            return Err(Error::DimensionMismatch {
                context: format!("annotation {i}"),
                expected: img.dims(),
                actual: m.dims(),
            });
        }
    }

    let flips: &[bool] = if params.flips { &[false, true] } else { &[false] };
    let rotations: Vec<f64> = if params.rotations.is_empty() {
        vec![0.0]
    } else {
        params.rotations.clone()
    };
    let mut variants = Vec::new();
    for (s, (img, mask)) in sources.iter().enumerate() {
        for &flip in flips {
            for &angle in &rotations {
                let (mut img, mut mask) = if flip {
                    (img.flip_horizontal(), mask.flip_horizontal())
                } else {
                    (img.clone(), mask.clone())
                };
                if angle != 0.0 {
                    img = img.rotate(angle);
                    mask = mask.rotate(angle);
                }
                if mask.is_empty() {
                    continue;
                }
                let tag = format!("s{s}_{}r{angle}", if flip { "f" } else { "" });
                variants.push((tag, img, mask));
            }
        }
    }
    if variants.is_empty() {
        return Err(Error::EmptyMask("every augmented annotation is empty".into()));
    }

    let mut rng = rng_from_seed(params.deformation.rng_seed);
    let mut samples = Vec::with_capacity(params.samples_target);
    for i in 0..params.samples_target {
        let (tag, img, target) = &variants[i % variants.len()];
        let input_mask = synthesize_input_mask(target, &params.deformation, &mut rng)?;
        samples.push(TrainingSample {
            id: format!("{i:05}_{tag}"),
            image: img.clone(),
            input_mask,
            target_mask: target.clone(),
        });
    }
    Ok(samples)
}
