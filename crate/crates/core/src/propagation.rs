//! Frame-by-frame guided propagation.
//!
//! From an annotated frame, each next frame is refined with the dilated
//! previous estimate as guidance and the thresholded scores become the new
//! estimate. Annotated frames are fixed points.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{fuse_scores, magnitude_image};
use crate::model::{threshold, Annotation, AnnotationKind, BinaryMask, Image, ScoreMap, VideoSequence};
use crate::morphology::dilate;
use crate::refiner::{Refiner, RefinerRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmptyMaskPolicy {
    /// Keep the dilated previous estimate and mark the frame as a fallback.
    #[default]
    FallbackToDilatedPrevious,
    PropagateEmpty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    #[default]
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagationConfig {
    pub test_dilation_radius: u32,
    pub tau: f32,
    pub empty_mask_policy: EmptyMaskPolicy,
    pub direction: Direction,
    /// `false` refines without a mask channel.
    pub use_guidance: bool,
    /// Keep each frame's score map in the result.
    pub retain_scores: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            test_dilation_radius: 5,
            tau: 0.5,
            empty_mask_policy: EmptyMaskPolicy::default(),
            direction: Direction::Forward,
            use_guidance: true,
            retain_scores: false,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidParameter(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Annotated,
    PropagatedForward,
    PropagatedBackward,
    Fallback,
    /// Taken from the nearest annotation by the copy baseline.
    Copied,
    /// No run reached this frame; the mask is empty.
    Unreached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationResult {
    pub masks: Vec<BinaryMask>,
    /// Present when `retain_scores` was set.
    pub scores: Option<Vec<ScoreMap>>,
    pub provenance: Vec<Provenance>,
}

impl PropagationResult {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Produces the score map of one frame from guidance.
pub trait FramePredictor {
    fn predict(&mut self, frame: usize, guidance: Option<&BinaryMask>) -> Result<ScoreMap>;
}

/// Refines the RGB frames directly.
pub struct RgbPredictor<'a> {
    pub sequence: &'a VideoSequence,
    pub refiner: &'a mut Refiner,
}

impl FramePredictor for RgbPredictor<'_> {
    fn predict(&mut self, frame: usize, guidance: Option<&BinaryMask>) -> Result<ScoreMap> {
        self.refiner
            .refine(&RefinerRequest::new(&self.sequence.frames[frame], guidance, frame))
    }
}

/// Averages an RGB branch with a branch run on flow-magnitude images.
pub struct FusedPredictor<'a> {
    pub sequence: &'a VideoSequence,
    pub rgb: &'a mut Refiner,
    pub flow: &'a mut Refiner,
    magnitudes: Vec<Image>,
}

impl<'a> FusedPredictor<'a> {
    pub fn new(sequence: &'a VideoSequence, rgb: &'a mut Refiner, flow: &'a mut Refiner) -> Result<Self> {
        Ok(FusedPredictor {
            magnitudes: flow_magnitudes(sequence)?,
            sequence,
            rgb,
            flow,
        })
    }

    pub fn magnitudes(&self) -> &[Image] {
        &self.magnitudes
    }
}

/// One magnitude image per frame; the last frame reuses the last field.
pub fn flow_magnitudes(sequence: &VideoSequence) -> Result<Vec<Image>> {
    (0..sequence.len())
        .map(|t| {
            sequence
                .flow_at(t)
                .map(magnitude_image)
                .ok_or_else(|| Error::Manifest {
                    sequence: sequence.name.clone(),
                    message: "flow fusion requested but the sequence has no flow".into(),
                })
        })
        .collect()
}

impl FramePredictor for FusedPredictor<'_> {
    fn predict(&mut self, frame: usize, guidance: Option<&BinaryMask>) -> Result<ScoreMap> {
        let a = self
            .rgb
            .refine(&RefinerRequest::new(&self.sequence.frames[frame], guidance, frame))?;
        let b = self
            .flow
            .refine(&RefinerRequest::new(&self.magnitudes[frame], guidance, frame))?;
        fuse_scores(&a, &b)
    }
}

/// Validate annotations against the sequence and convert them to masks,
/// sorted by frame.
fn resolve_annotations(sequence: &VideoSequence, annotations: &[Annotation]) -> Result<Vec<(usize, BinaryMask)>> {
    if annotations.is_empty() {
        return Err(Error::InvalidParameter("at least one annotation is required".into()));
    }
    let (w, h) = sequence.dims();
    let mut out: Vec<(usize, BinaryMask)> = Vec::with_capacity(annotations.len());
    for a in annotations {
        if a.frame_index >= sequence.len() {
            return Err(Error::Frame {
                sequence: sequence.name.clone(),
                frame: a.frame_index,
                message: format!("annotation beyond the last frame {}", sequence.len() - 1),
            });
        }
        let mask = a.to_mask(w, h).map_err(|e| e.at_frame(&sequence.name, a.frame_index))?;
        out.push((a.frame_index, mask));
    }
    out.sort_by_key(|(f, _)| *f);
    if let Some(pair) = out.windows(2).find(|p| p[0].0 == p[1].0) {
        return Err(Error::Frame {
            sequence: sequence.name.clone(),
            frame: pair[0].0,
            message: "frame annotated twice".into(),
        });
    }
    Ok(out)
}

pub fn propagate(
    sequence: &VideoSequence,
    annotations: &[Annotation],
    refiner: &mut Refiner,
    config: &PropagationConfig,
) -> Result<PropagationResult> {
    propagate_with(sequence, annotations, &mut RgbPredictor { sequence, refiner }, config)
}

/// Single-direction propagation with an arbitrary predictor.
///
/// A box annotation may only start the run: the first annotated frame going
/// forward, the last going backward.
pub fn propagate_with(
    sequence: &VideoSequence,
    annotations: &[Annotation],
    predictor: &mut dyn FramePredictor,
    config: &PropagationConfig,
) -> Result<PropagationResult> {
    config.validate()?;
    let resolved = resolve_annotations(sequence, annotations)?;
    let start_frame = match config.direction {
        Direction::Forward => resolved[0].0,
        Direction::Backward => resolved[resolved.len() - 1].0,
    };
    if let Some(a) = annotations
        .iter()
        .find(|a| matches!(a.kind, AnnotationKind::Box(_)) && a.frame_index != start_frame)
    {
        return Err(Error::Frame {
            sequence: sequence.name.clone(),
            frame: a.frame_index,
            message: "box annotations may only start a propagation run".into(),
        });
    }
    let n = sequence.len();
    let mut out = Buffers::new(sequence, config);
    match config.direction {
        Direction::Forward => {
            for (i, (f, m)) in resolved.iter().enumerate() {
                let end = resolved.get(i + 1).map_or(n - 1, |next| next.0 - 1);
                chain(sequence, *f, m, end, predictor, config, &mut out)?;
            }
        }
        Direction::Backward => {
            for (i, (f, m)) in resolved.iter().enumerate().rev() {
                let end = if i == 0 { 0 } else { resolved[i - 1].0 + 1 };
                chain(sequence, *f, m, end, predictor, config, &mut out)?;
            }
        }
    }
    Ok(out.finish())
}

struct Buffers {
    masks: Vec<BinaryMask>,
    scores: Option<Vec<ScoreMap>>,
    provenance: Vec<Provenance>,
}

impl Buffers {
    fn new(sequence: &VideoSequence, config: &PropagationConfig) -> Self {
        let (w, h) = sequence.dims();
        let n = sequence.len();
        let empty = BinaryMask::new(w, h);
        Buffers {
            scores: config.retain_scores.then(|| vec![ScoreMap::from_mask(&empty); n]),
            masks: vec![empty; n],
            provenance: vec![Provenance::Unreached; n],
        }
    }

    fn put(&mut self, t: usize, mask: BinaryMask, score: ScoreMap, provenance: Provenance) {
        if let Some(s) = self.scores.as_mut() {
            s[t] = score;
        }
        self.masks[t] = mask;
        self.provenance[t] = provenance;
    }

    fn finish(self) -> PropagationResult {
        PropagationResult {
            masks: self.masks,
            scores: self.scores,
            provenance: self.provenance,
        }
    }
}

/// Propagate from the annotated frame `start` to `end` inclusive, in
/// whichever direction `end` lies.
fn chain(
    sequence: &VideoSequence,
    start: usize,
    annotation: &BinaryMask,
    end: usize,
    predictor: &mut dyn FramePredictor,
    config: &PropagationConfig,
    out: &mut Buffers,
) -> Result<()> {
    out.put(start, annotation.clone(), ScoreMap::from_mask(annotation), Provenance::Annotated);
    let (frames, step): (Vec<usize>, Provenance) = if end >= start {
        ((start + 1..=end).collect(), Provenance::PropagatedForward)
    } else {
        ((end..start).rev().collect(), Provenance::PropagatedBackward)
    };
    let mut previous = annotation.clone();
    for t in frames {
        let guidance = dilate(&previous, config.test_dilation_radius);
        let score = predictor
            .predict(t, config.use_guidance.then_some(&guidance))
            .map_err(|e| e.at_frame(&sequence.name, t))?;
        let estimate = threshold(&score, config.tau);
        if estimate.is_empty() && config.empty_mask_policy == EmptyMaskPolicy::FallbackToDilatedPrevious {
            let score = ScoreMap::from_mask(&guidance);
            out.put(t, guidance.clone(), score, Provenance::Fallback);
            previous = guidance;
        } else {
            out.put(t, estimate.clone(), score, step);
            previous = estimate;
        }
    }
    Ok(())
}

/// All-segment or all-box annotations (boxes filled in), sorted.
fn resolve_uniform(sequence: &VideoSequence, annotations: &[Annotation]) -> Result<Vec<(usize, BinaryMask)>> {
    let boxes = annotations
        .iter()
        .filter(|a| matches!(a.kind, AnnotationKind::Box(_)))
        .count();
    if boxes != 0 && boxes != annotations.len() {
        return Err(Error::InvalidParameter(format!(
            "sequence {}: mixing box and segment annotations is not supported",
            sequence.name
        )));
    }
    resolve_annotations(sequence, annotations)
}

pub fn propagate_multi(
    sequence: &VideoSequence,
    annotations: &[Annotation],
    refiner: &mut Refiner,
    config: &PropagationConfig,
) -> Result<PropagationResult> {
    propagate_multi_with(sequence, annotations, &mut RgbPredictor { sequence, refiner }, config)
}

/// Every frame takes the estimate propagated from its nearest annotated
/// frame; a frame equidistant from two takes the forward one.
///
/// Each gap between annotated frames is filled from both ends, forward up
/// to the midpoint and backward for the rest. The `direction` field of the
/// config is ignored.
pub fn propagate_multi_with(
    sequence: &VideoSequence,
    annotations: &[Annotation],
    predictor: &mut dyn FramePredictor,
    config: &PropagationConfig,
) -> Result<PropagationResult> {
    config.validate()?;
    let resolved = resolve_uniform(sequence, annotations)?;
    let n = sequence.len();
    let mut out = Buffers::new(sequence, config);
    let (first, first_mask) = &resolved[0];
    chain(sequence, *first, first_mask, 0, predictor, config, &mut out)?;
    for pair in resolved.windows(2) {
        let (a, mask_a) = &pair[0];
        let (b, mask_b) = &pair[1];
        let mid = a + (b - a) / 2;
        chain(sequence, *a, mask_a, mid, predictor, config, &mut out)?;
        chain(sequence, *b, mask_b, mid + 1, predictor, config, &mut out)?;
    }
    let (last, last_mask) = &resolved[resolved.len() - 1];
    chain(sequence, *last, last_mask, n - 1, predictor, config, &mut out)?;
    Ok(out.finish())
}

/// Every frame copies the nearest annotation; a frame equidistant from two
/// copies the earlier one. Boxes are copied as filled rectangles.
pub fn copy_baseline(sequence: &VideoSequence, annotations: &[Annotation]) -> Result<PropagationResult> {
    let resolved = resolve_annotations(sequence, annotations)?;
    let n = sequence.len();
    let mut masks = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    for t in 0..n {
        // Sorted scan with a strict comparison keeps the earlier of two
        // equidistant annotations.
        let mut pick = 0;
        for (i, (f, _)) in resolved.iter().enumerate() {
            if f.abs_diff(t) < resolved[pick].0.abs_diff(t) {
                pick = i;
            }
        }
        masks.push(resolved[pick].1.clone());
        provenance.push(if resolved[pick].0 == t {
            Provenance::Annotated
        } else {
            Provenance::Copied
        });
    }
    Ok(PropagationResult {
        masks,
        scores: None,
        provenance,
    })
}

pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub sequence: String,
    pub frames: Vec<Provenance>,
}

pub fn mask_path(out: &Path, sequence: &str, frame: usize) -> PathBuf {
    out.join(sequence).join(format!("{frame:05}.png"))
}

/// `<out>/<sequence>/<frame:05>.png` per frame plus a provenance sidecar.
pub fn write_result(result: &PropagationResult, sequence: &str, out: &Path) -> Result<()> {
    let dir = out.join(sequence);
    fs::create_dir_all(&dir)?;
    for (t, m) in result.masks.iter().enumerate() {
        m.save_png(&mask_path(out, sequence, t))?;
    }
    let record = ProvenanceRecord {
        sequence: sequence.to_string(),
        frames: result.provenance.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&record)?;
    json.push(b'\n');
    fs::write(dir.join(PROVENANCE_FILE), json)?;
    Ok(())
}

/// Load `count` per-frame masks written by [`write_result`].
pub fn read_result_masks(out: &Path, sequence: &str, count: usize) -> Result<Vec<BinaryMask>> {
    (0..count)
        .map(|t| {
            let path = mask_path(out, sequence, t);
            if !path.is_file() {
                return Err(Error::MissingFile(path));
            }
            BinaryMask::load_png(&path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BoundingBox;

    fn blank_sequence(n: usize, w: u32, h: u32) -> VideoSequence {
        let frames = (0..n)
            .map(|t| Image::from_rgb_fn(w, h, |x, y| [(x * 7) as u8, (y * 5) as u8, t as u8]).unwrap())
            .collect();
        VideoSequence::new("toy", frames).unwrap()
    }

    fn block(w: u32, h: u32, x0: u32, y0: u32, side: u32) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| x >= x0 && x < x0 + side && y >= y0 && y < y0 + side)
    }

    fn moving_gt(n: usize) -> Vec<BinaryMask> {
        (0..n).map(|t| block(24, 16, 2 + 2 * t as u32, 4, 5)).collect()
    }

    fn brute_dilate(m: &BinaryMask, r: u32) -> BinaryMask {
        let r = r as i64;
        BinaryMask::from_fn(m.width(), m.height(), |x, y| {
            (-r..=r).any(|dy| {
                (-r..=r).any(|dx| dx * dx + dy * dy <= r * r && m.get_signed(x as i64 + dx, y as i64 + dy))
            })
        })
    }

    struct Zero;

    impl FramePredictor for Zero {
        fn predict(&mut self, _: usize, g: Option<&BinaryMask>) -> Result<ScoreMap> {
            let (w, h) = g.unwrap().dims();
            ScoreMap::filled(w, h, 0.0)
        }
    }

    #[test]
    fn oracle_reproduces_ground_truth() {
        let gt = moving_gt(8);
        let seq = blank_sequence(8, 24, 16).with_ground_truth(gt.clone()).unwrap();
        let mut r = Refiner::oracle(&seq).unwrap();
        let res = propagate(&seq, &[Annotation::segment(0, gt[0].clone())], &mut r, &Default::default()).unwrap();
        assert_eq!(res.masks, gt);
        assert_eq!(res.provenance[0], Provenance::Annotated);
        assert!(res.provenance[1..].iter().all(|p| *p == Provenance::PropagatedForward));
    }

    #[test]
    fn identity_without_dilation_copies() {
        let seq = blank_sequence(5, 24, 16);
        let m = block(24, 16, 3, 3, 4);
        let cfg = PropagationConfig { test_dilation_radius: 0, ..Default::default() };
        let res = propagate(&seq, &[Annotation::segment(0, m.clone())], &mut Refiner::Identity, &cfg).unwrap();
        assert!(res.masks.iter().all(|x| *x == m));
    }

    #[test]
    fn identity_with_dilation_grows_by_iterated_dilation() {
        let seq = blank_sequence(3, 32, 32);
        let m = block(32, 32, 14, 15, 2);
        let res = propagate(&seq, &[Annotation::segment(0, m.clone())], &mut Refiner::Identity, &Default::default()).unwrap();
        let mut expected = m;
        for t in 0..3 {
            assert_eq!(res.masks[t], expected, "frame {t}");
            expected = brute_dilate(&expected, 5);
        }
    }

    #[test]
    fn frames_before_the_start_are_unreached() {
        let seq = blank_sequence(5, 24, 16);
        let m = block(24, 16, 3, 3, 4);
        let mut r = Refiner::Identity;
        let res = propagate(&seq, &[Annotation::segment(2, m.clone())], &mut r, &Default::default()).unwrap();
        assert_eq!(&res.provenance[..2], &[Provenance::Unreached; 2]);
        assert!(res.masks[0].is_empty());
        let back = PropagationConfig { direction: Direction::Backward, ..Default::default() };
        let res = propagate(&seq, &[Annotation::segment(2, m)], &mut r, &back).unwrap();
        assert_eq!(res.provenance[1], Provenance::PropagatedBackward);
        assert_eq!(&res.provenance[3..], &[Provenance::Unreached; 2]);
    }

    #[test]
    fn empty_estimates_follow_policy() {
        let seq = blank_sequence(3, 24, 16);
        let m = block(24, 16, 3, 3, 4);
        let ann = [Annotation::segment(0, m.clone())];
        let res = propagate_with(&seq, &ann, &mut Zero, &Default::default()).unwrap();
        assert_eq!(res.provenance[1..], [Provenance::Fallback; 2]);
        assert_eq!(res.masks[1], dilate(&m, 5));
        assert_eq!(res.masks[2], dilate(&dilate(&m, 5), 5));
        let cfg = PropagationConfig { empty_mask_policy: EmptyMaskPolicy::PropagateEmpty, ..Default::default() };
        let res = propagate_with(&seq, &ann, &mut Zero, &cfg).unwrap();
        assert!(res.masks[1].is_empty() && res.masks[2].is_empty());
    }

    #[test]
    fn boxes_only_start_a_run() {
        let seq = blank_sequence(4, 24, 16);
        let b = BoundingBox { x_min: 2, y_min: 2, x_max: 6, y_max: 5 };
        let mut r = Refiner::Identity;
        let cfg = PropagationConfig { test_dilation_radius: 0, ..Default::default() };
        let res = propagate(&seq, &[Annotation::bbox(0, b)], &mut r, &cfg).unwrap();
        assert_eq!(res.masks[3].count(), 20);
        let anns = [Annotation::segment(0, block(24, 16, 0, 0, 2)), Annotation::bbox(2, b)];
        assert!(propagate(&seq, &anns, &mut r, &cfg).is_err());
    }

    #[test]
    fn annotation_errors() {
        let seq = blank_sequence(3, 24, 16);
        let m = block(24, 16, 0, 0, 2);
        let mut r = Refiner::Identity;
        let cfg = PropagationConfig::default();
        assert!(propagate(&seq, &[], &mut r, &cfg).is_err());
        assert!(propagate(&seq, &[Annotation::segment(3, m.clone())], &mut r, &cfg).is_err());
        let dup = [Annotation::segment(1, m.clone()), Annotation::segment(1, m.clone())];
        assert!(propagate_multi(&seq, &dup, &mut r, &cfg).is_err());
        let mixed = [
            Annotation::segment(0, m),
            Annotation::bbox(2, BoundingBox { x_min: 0, y_min: 0, x_max: 1, y_max: 1 }),
        ];
        assert!(propagate_multi(&seq, &mixed, &mut r, &cfg).is_err());
        assert!(propagate(&seq, &[Annotation::segment(0, BinaryMask::new(4, 4))], &mut r, &cfg).is_err());
    }

    #[test]
    fn multi_splits_gaps_with_forward_tie() {
        let seq = blank_sequence(11, 24, 16);
        let a = block(24, 16, 1, 1, 3);
        let b = block(24, 16, 15, 9, 4);
        let cfg = PropagationConfig { test_dilation_radius: 0, ..Default::default() };
        let anns = [Annotation::segment(0, a.clone()), Annotation::segment(10, b.clone())];
        let res = propagate_multi(&seq, &anns, &mut Refiner::Identity, &cfg).unwrap();
        for t in 0..=5 {
            assert_eq!(res.masks[t], a, "frame {t}");
        }
        for t in 6..=10 {
            assert_eq!(res.masks[t], b, "frame {t}");
        }
        assert_eq!(res.provenance[5], Provenance::PropagatedForward);
        assert_eq!(res.provenance[6], Provenance::PropagatedBackward);
    }

    #[test]
    fn multi_with_every_frame_annotated_is_the_annotations() {
        let gt = moving_gt(6);
        let seq = blank_sequence(6, 24, 16);
        let anns: Vec<_> = gt.iter().enumerate().map(|(t, m)| Annotation::segment(t, m.clone())).collect();
        let res = propagate_multi(&seq, &anns, &mut Refiner::Identity, &Default::default()).unwrap();
        assert_eq!(res.masks, gt);
        assert!(res.provenance.iter().all(|p| *p == Provenance::Annotated));
    }

    #[test]
    fn multi_matches_two_full_passes() {
        // Distinct growth per side makes any misassignment visible.
        let seq = blank_sequence(17, 40, 40);
        let anns = [
            Annotation::segment(3, block(40, 40, 4, 4, 2)),
            Annotation::segment(8, block(40, 40, 30, 30, 3)),
            Annotation::segment(13, block(40, 40, 5, 28, 2)),
        ];
        let cfg = PropagationConfig { test_dilation_radius: 1, ..Default::default() };
        let mut r = Refiner::Identity;
        let multi = propagate_multi(&seq, &anns, &mut r, &cfg).unwrap();
        let fwd = propagate(&seq, &anns, &mut r, &cfg).unwrap();
        let back_cfg = PropagationConfig { direction: Direction::Backward, ..cfg.clone() };
        let bwd = propagate(&seq, &anns, &mut r, &back_cfg).unwrap();
        let annotated = [3usize, 8, 13];
        for t in 0..17 {
            let prev = annotated.iter().filter(|&&a| a <= t).max();
            let next = annotated.iter().filter(|&&a| a >= t).min();
            let use_forward = match (prev, next) {
                (Some(p), Some(n)) => t - p <= n - t,
                (Some(_), None) => true,
                _ => false,
            };
            let expected = if use_forward { &fwd.masks[t] } else { &bwd.masks[t] };
            assert_eq!(&multi.masks[t], expected, "frame {t}");
        }
    }

    #[test]
    fn oracle_multi_reproduces_ground_truth() {
        let gt = moving_gt(11);
        let seq = blank_sequence(11, 24, 16).with_ground_truth(gt.clone()).unwrap();
        let mut r = Refiner::oracle(&seq).unwrap();
        let anns = [Annotation::segment(0, gt[0].clone()), Annotation::segment(10, gt[10].clone())];
        assert_eq!(propagate_multi(&seq, &anns, &mut r, &Default::default()).unwrap().masks, gt);
    }

    #[test]
    fn backward_on_reversed_equals_reversed_forward() {
        let gt = moving_gt(7);
        let seq = blank_sequence(7, 24, 16);
        let mut rev = seq.clone();
        rev.frames.reverse();
        let mut r = Refiner::Identity;
        let cfg = PropagationConfig { test_dilation_radius: 1, ..Default::default() };
        let fwd = propagate(&seq, &[Annotation::segment(0, gt[0].clone())], &mut r, &cfg).unwrap();
        let back_cfg = PropagationConfig { direction: Direction::Backward, ..cfg };
        let bwd = propagate(&rev, &[Annotation::segment(6, gt[0].clone())], &mut r, &back_cfg).unwrap();
        let mut expected = fwd.masks.clone();
        expected.reverse();
        assert_eq!(bwd.masks, expected);
    }

    #[test]
    fn copy_baseline_picks_nearest_earlier_on_tie() {
        let seq = blank_sequence(5, 24, 16);
        let a = block(24, 16, 1, 1, 3);
        let b = block(24, 16, 10, 5, 3);
        let res = copy_baseline(&seq, &[Annotation::segment(4, b.clone()), Annotation::segment(0, a.clone())]).unwrap();
        assert_eq!(res.masks, vec![a.clone(), a.clone(), a, b.clone(), b]);
        assert_eq!(res.provenance[1], Provenance::Copied);
        assert_eq!(res.provenance[4], Provenance::Annotated);
        let single = copy_baseline(&seq, &[Annotation::segment(2, block(24, 16, 0, 0, 1))]).unwrap();
        assert!(single.masks.iter().all(|m| m.count() == 1));
    }

    #[test]
    fn retained_scores_line_up_with_masks() {
        let gt = moving_gt(4);
        let seq = blank_sequence(4, 24, 16).with_ground_truth(gt.clone()).unwrap();
        let mut r = Refiner::oracle(&seq).unwrap();
        let cfg = PropagationConfig { retain_scores: true, ..Default::default() };
        let res = propagate(&seq, &[Annotation::segment(0, gt[0].clone())], &mut r, &cfg).unwrap();
        let scores = res.scores.unwrap();
        for (s, m) in scores.iter().zip(&res.masks) {
            assert_eq!(&threshold(s, 0.5), m);
        }
    }

    #[test]
    fn results_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let gt = moving_gt(3);
        let res = PropagationResult {
            masks: gt.clone(),
            scores: None,
            provenance: vec![Provenance::Annotated, Provenance::PropagatedForward, Provenance::Fallback],
        };
        write_result(&res, "seq", dir.path()).unwrap();
        assert!(dir.path().join("seq/00002.png").is_file());
        assert_eq!(read_result_masks(dir.path(), "seq", 3).unwrap(), gt);
        let record: ProvenanceRecord =
            serde_json::from_slice(&fs::read(dir.path().join("seq").join(PROVENANCE_FILE)).unwrap()).unwrap();
        assert_eq!(record.frames, res.provenance);
        match read_result_masks(dir.path(), "seq", 4) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("seq/00003.png")),
            other => panic!("{other:?}"),
        }
    }
}
