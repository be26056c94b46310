//! Whole-dataset runs: online fitting, propagation, fusion, CRF
//! post-processing, scoring, the annotation-density sweep and training-set
//! export.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crf::{postprocess_sequence, CrfParams};
use crate::error::{Error, Result};
use crate::eval::{annotated_frames, dataset_report, score_sequence, DensityPoint, Report};
use crate::flow::magnitude_image;
use crate::manifest::{load_manifest, DatasetManifest};
use crate::model::{Annotation, BinaryMask, EvalProtocol, Image, VideoSequence};
use crate::propagation::{
    copy_baseline, propagate_multi_with, propagate_with, read_result_masks, write_result, FusedPredictor,
    PropagationConfig, PropagationResult, Provenance, RgbPredictor,
};
use crate::refiner::{ColorModelConfig, Refiner, RefinerSpec};
use crate::synth::{build_offline_corpus, build_online_set_multi, AugmentationParams, CorpusItem, DeformationParams};

pub const CONFIG_FILE: &str = "config.json";
pub const INDEX_FILE: &str = "index.json";

/// First-frame augmentation; the deformation comes from [`RunConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineParams {
    pub flips: bool,
    pub rotations: Vec<f64>,
    pub samples_target: usize,
}

impl Default for OnlineParams {
    fn default() -> Self {
        let a = AugmentationParams::default();
        OnlineParams {
            flips: a.flips,
            rotations: a.rotations,
            samples_target: a.samples_target,
        }
    }
}

/// Everything a command needs; archived as `config.json` next to its output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub refiner: RefinerSpec,
    pub color_model: ColorModelConfig,
    /// `rng_seed` is ignored; generators derive from `seed`.
    pub deformation: DeformationParams,
    pub online: OnlineParams,
    pub masks_per_image: usize,
    pub propagation: PropagationConfig,
    pub flow: bool,
    pub crf: Option<CrfParams>,
    /// Annotate with tight bounding boxes instead of masks.
    pub boxes: bool,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            refiner: RefinerSpec::ColorModel,
            color_model: ColorModelConfig::default(),
            deformation: DeformationParams::default(),
            online: OnlineParams::default(),
            masks_per_image: 2,
            propagation: PropagationConfig::default(),
            flow: false,
            crf: None,
            boxes: false,
            out: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.color_model.validate()?;
        self.deformation.validate()?;
        self.propagation.validate()?;
        if let Some(c) = &self.crf {
            c.validate()?;
        }
        if self.online.samples_target == 0 {
            return Err(Error::InvalidParameter("online.samples_target must be >= 1".into()));
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Error::InvalidParameter("no manifest given".into()))
    }

    /// Deformation parameters seeded for one generator stream.
    pub fn deformation_seeded(&self, seed: u64) -> DeformationParams {
        DeformationParams {
            rng_seed: seed,
            ..self.deformation.clone()
        }
    }

    fn augmentation(&self, seed: u64) -> AugmentationParams {
        AugmentationParams {
            flips: self.online.flips,
            rotations: self.online.rotations.clone(),
            samples_target: self.online.samples_target,
            deformation: self.deformation_seeded(seed),
        }
    }

    /// Write the config as pretty JSON to `<dir>/config.json`.
    pub fn archive(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        fs::write(dir.join(CONFIG_FILE), json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))
    }
}

/// Ground-truth annotations for the given frames; masks, or their tight
/// boxes in box mode.
pub fn annotations_from_gt(sequence: &VideoSequence, frames: &[usize], boxes: bool) -> Result<Vec<Annotation>> {
    let gt = sequence.ground_truth.as_ref().ok_or_else(|| Error::Manifest {
        sequence: sequence.name.clone(),
        message: "annotations are drawn from ground truth, which is missing".into(),
    })?;
    frames
        .iter()
        .map(|&t| {
            let mask = gt.get(t).ok_or_else(|| Error::Frame {
                sequence: sequence.name.clone(),
                frame: t,
                message: "no ground truth for this frame".into(),
            })?;
            if !boxes {
                return Ok(Annotation::segment(t, mask.clone()));
            }
            let bbox = mask.bbox().ok_or_else(|| Error::Frame {
                sequence: sequence.name.clone(),
                frame: t,
                message: "empty ground truth has no bounding box".into(),
            })?;
            Ok(Annotation::bbox(t, bbox))
        })
        .collect()
}

/// The refiner pair for one sequence, fine-tuned on its annotated frames
/// when the kind learns online. The second refiner reads flow magnitudes.
pub fn prepare_refiners(
    sequence: &VideoSequence,
    annotations: &[Annotation],
    config: &RunConfig,
    seed: u64,
) -> Result<(Refiner, Option<Refiner>)> {
    let mut rgb = Refiner::from_spec(&config.refiner, sequence, &config.color_model)?;
    let mut flow = if config.flow {
        Some(Refiner::from_spec(&config.refiner, sequence, &config.color_model)?)
    } else {
        None
    };
    if !rgb.learns_online() {
        return Ok((rgb, flow));
    }
    let (w, h) = sequence.dims();
    let mut sources = Vec::new();
    for a in annotations {
        let mask = a.to_mask(w, h).map_err(|e| e.at_frame(&sequence.name, a.frame_index))?;
        if !mask.is_empty() {
            sources.push((a.frame_index, mask));
        }
    }
    if sources.is_empty() {
        return Err(Error::Manifest {
            sequence: sequence.name.clone(),
            message: "every annotated frame is empty; nothing to fit the refiner on".into(),
        });
    }
    let params = config.augmentation(seed);
    let fit = |r: &mut Refiner, images: &dyn Fn(usize) -> Image| -> Result<()> {
        let pairs: Vec<(Image, BinaryMask)> = sources.iter().map(|(t, m)| (images(*t), m.clone())).collect();
        let samples = build_online_set_multi(&pairs, &params)?;
        r.fine_tune(&samples)
    };
    let in_sequence = |e: Error| match e {
        e @ Error::Frame { .. } => e,
        other => Error::Manifest {
            sequence: sequence.name.clone(),
            message: other.to_string(),
        },
    };
    fit(&mut rgb, &|t| sequence.frames[t].clone()).map_err(in_sequence)?;
    if let Some(f) = flow.as_mut() {
        let magnitude = |t: usize| -> Image {
            sequence
                .flow_at(t)
                .map(magnitude_image)
                .expect("checked by the flow predictor")
        };
        if (0..sequence.len()).any(|t| sequence.flow_at(t).is_none()) {
            return Err(Error::Manifest {
                sequence: sequence.name.clone(),
                message: "flow fusion requested but the sequence has no flow".into(),
            });
        }
        fit(f, &magnitude).map_err(in_sequence)?;
    }
    Ok((rgb, flow))
}

/// Propagate from the given annotations with the configured refiner,
/// optional flow fusion and optional CRF post-processing.
///
/// One annotation runs a single pass in the configured direction; several
/// fill each frame from its nearest annotation. After the CRF, segment
/// annotations overwrite their frames again.
pub fn predict_sequence(
    sequence: &VideoSequence,
    annotations: &[Annotation],
    config: &RunConfig,
    seed: u64,
) -> Result<PropagationResult> {
    let (mut rgb, mut flow) = prepare_refiners(sequence, annotations, config, seed)?;
    let mut prop = config.propagation.clone();
    prop.retain_scores |= config.crf.is_some();
    let multi = annotations.len() > 1;
    let mut result = match flow.as_mut() {
        Some(f) => {
            let mut p = FusedPredictor::new(sequence, &mut rgb, f)?;
            if multi {
                propagate_multi_with(sequence, annotations, &mut p, &prop)?
            } else {
                propagate_with(sequence, annotations, &mut p, &prop)?
            }
        }
        None => {
            let mut p = RgbPredictor {
                sequence,
                refiner: &mut rgb,
            };
            if multi {
                propagate_multi_with(sequence, annotations, &mut p, &prop)?
            } else {
                propagate_with(sequence, annotations, &mut p, &prop)?
            }
        }
    };
    if let Some(crf) = &config.crf {
        let scores = result.scores.as_ref().expect("scores retained for the crf");
        let masks = postprocess_sequence(&sequence.frames, scores, crf, prop.tau).map_err(|e| Error::Manifest {
            sequence: sequence.name.clone(),
            message: e.to_string(),
        })?;
        for (t, m) in masks.into_iter().enumerate() {
            if result.provenance[t] != Provenance::Annotated {
                result.masks[t] = m;
            }
        }
        if !config.propagation.retain_scores {
            result.scores = None;
        }
    }
    Ok(result)
}

/// First-frame annotated run of one sequence.
pub fn run_sequence(sequence: &VideoSequence, index: usize, config: &RunConfig) -> Result<PropagationResult> {
    let annotations = annotations_from_gt(sequence, &[0], config.boxes)?;
    predict_sequence(sequence, &annotations, config, config.seed ^ index as u64)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot start {jobs} workers: {e}")))
}

/// Apply `f` to every sequence of the manifest on `jobs` workers. Results
/// come back in manifest order; the first failing sequence wins.
fn for_each_sequence<T: Send>(
    manifest: &DatasetManifest,
    jobs: usize,
    f: impl Fn(usize, VideoSequence) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    pool(jobs)?.install(|| {
        (0..manifest.len())
            .into_par_iter()
            .map(|i| f(i, manifest.load_sequence(i)?))
            .collect()
    })
}

/// Names of the sequences written by [`run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub sequences: Vec<String>,
}

/// Run every sequence of the manifest and write masks under `config.out`.
pub fn run(config: &RunConfig, jobs: usize) -> Result<RunSummary> {
    config.validate()?;
    let manifest = load_manifest(config.manifest_path()?)?;
    config.archive(&config.out)?;
    let sequences = for_each_sequence(&manifest, jobs, |i, seq| {
        let result = run_sequence(&seq, i, config)?;
        write_result(&result, &seq.name, &config.out)?;
        Ok(seq.name)
    })?;
    Ok(RunSummary { sequences })
}

/// Score a result tree against the manifest's ground truth. `protocol`
/// overrides each sequence's own protocol.
pub fn evaluate(results: &Path, manifest: &DatasetManifest, protocol: Option<EvalProtocol>, jobs: usize) -> Result<Report> {
    let scores = for_each_sequence(manifest, jobs, |_, seq| {
        let masks = read_result_masks(results, &seq.name, seq.len())?;
        score_sequence(&masks, &seq, protocol.unwrap_or(seq.protocol))
    })?;
    Ok(dataset_report(&scores, &manifest.tags()))
}

/// Curve of propagated (or copied, with `baseline`) accuracy against
/// annotation stride. Per-frame IoUs are pooled across sequences; strides
/// come out sorted and deduplicated.
pub fn density_experiment(
    sequences: &[VideoSequence],
    strides: &[usize],
    config: &RunConfig,
    baseline: bool,
) -> Result<Vec<DensityPoint>> {
    config.validate()?;
    if strides.is_empty() {
        return Err(Error::InvalidParameter("no strides given".into()));
    }
    if let Some(s) = strides.iter().find(|&&s| s == 0) {
        return Err(Error::InvalidParameter(format!("stride must be >= 1, got {s}")));
    }
    let mut strides = strides.to_vec();
    strides.sort_unstable();
    strides.dedup();
    let mut points = Vec::with_capacity(strides.len());
    for stride in strides {
        let per_sequence: Vec<(usize, Vec<f64>)> = sequences
            .par_iter()
            .enumerate()
            .map(|(i, seq)| {
                let frames = annotated_frames(seq.len(), stride);
                let annotations = annotations_from_gt(seq, &frames, config.boxes)?;
                let result = if baseline {
                    copy_baseline(seq, &annotations)?
                } else {
                    predict_sequence(seq, &annotations, config, config.seed ^ i as u64)?
                };
                let score = score_sequence(&result.masks, seq, seq.protocol)?;
                Ok((frames.len(), score.frames.iter().map(|f| f.iou).collect()))
            })
            .collect::<Result<_>>()?;
        let annotated: usize = per_sequence.iter().map(|(a, _)| a).sum();
        let total: usize = sequences.iter().map(VideoSequence::len).sum();
        let pool: Vec<f64> = per_sequence.into_iter().flat_map(|(_, v)| v).collect();
        points.push(DensityPoint::from_pool(stride, annotated, total, &pool)?);
    }
    Ok(points)
}

/// Load every sequence of a manifest.
pub fn load_sequences(manifest: &DatasetManifest, jobs: usize) -> Result<Vec<VideoSequence>> {
    for_each_sequence(manifest, jobs, |_, seq| Ok(seq))
}

/// One corpus item per ground-truth frame, with id `<sequence>_<frame:05>`.
pub fn corpus_items(sequences: &[VideoSequence]) -> Vec<CorpusItem> {
    let mut items = Vec::new();
    for s in sequences {
        let Some(gt) = &s.ground_truth else { continue };
        for (t, (img, m)) in s.frames.iter().zip(gt).enumerate() {
            items.push(CorpusItem {
                id: format!("{}_{t:05}", s.name),
                image: img.clone(),
                mask: Some(m.clone()),
            });
        }
    }
    items
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportEntry {
    pub id: String,
    pub image: String,
    pub input: String,
    pub target: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportIndex {
    pub samples: Vec<ExportEntry>,
    /// Source items without a usable mask.
    pub skipped: Vec<String>,
}

/// Write the offline corpus as `<id>_img.png`, `<id>_in.png`,
/// `<id>_gt.png` triplets plus `index.json`.
pub fn export_train(
    items: Vec<CorpusItem>,
    params: &DeformationParams,
    masks_per_image: usize,
    out: &Path,
) -> Result<ExportIndex> {
    fs::create_dir_all(out)?;
    let mut corpus = build_offline_corpus(items, params, masks_per_image)?;
    let mut samples = Vec::new();
    for s in corpus.by_ref() {
        let s = s?;
        let entry = ExportEntry {
            image: format!("{}_img.png", s.id),
            input: format!("{}_in.png", s.id),
            target: format!("{}_gt.png", s.id),
            width: s.image.width(),
            height: s.image.height(),
            id: s.id,
        };
        s.image.save_png(&out.join(&entry.image))?;
        s.input_mask.save_png(&out.join(&entry.input))?;
        s.target_mask.save_png(&out.join(&entry.target))?;
        samples.push(entry);
    }
    let index = ExportIndex {
        samples,
        skipped: corpus.skipped().to_vec(),
    };
    let mut json = serde_json::to_vec_pretty(&index)?;
    json.push(b'\n');
    fs::write(out.join(INDEX_FILE), json)?;
    Ok(index)
}

/// Colors of the preview panels.
const AGREE: [u8; 3] = [255, 255, 255];
const ONLY_INPUT: [u8; 3] = [230, 60, 40];
const ONLY_TARGET: [u8; 3] = [40, 110, 230];

/// A row of panels: the image, the clean mask, then each deformed mask
/// (white where it agrees with the clean mask, red where it adds, blue
/// where it misses).
pub fn preview_grid(image: &Image, target: &BinaryMask, inputs: &[BinaryMask]) -> Result<Image> {
    let (w, h) = image.dims();
    let panels = 2 + inputs.len() as u32;
    let image = image.to_rgb();
    Image::from_rgb_fn(w * panels, h, |x, y| {
        let (p, px) = (x / w, x % w);
        match p {
            0 => image.rgb(px, y),
            1 if target.get(px, y) => AGREE,
            1 => [0, 0, 0],
            _ => match (inputs[p as usize - 2].get(px, y), target.get(px, y)) {
                (true, true) => AGREE,
                (true, false) => ONLY_INPUT,
                (false, true) => ONLY_TARGET,
                (false, false) => [0, 0, 0],
            },
        }
    })
}

/// One `<id>_grid.png` per usable source item. Returns the ids written.
pub fn write_previews(
    items: Vec<CorpusItem>,
    params: &DeformationParams,
    masks_per_image: usize,
    out: &Path,
) -> Result<Vec<String>> {
    fs::create_dir_all(out)?;
    let sources: Vec<(String, Image)> = items.iter().map(|i| (i.id.clone(), i.image.clone())).collect();
    let corpus = build_offline_corpus(items, params, masks_per_image)?;
    let samples = corpus.collect::<Result<Vec<_>>>()?;
    let mut written = Vec::new();
    for chunk in samples.chunks(masks_per_image.max(1)) {
        let Some(first) = chunk.first() else { continue };
        let id = first
            .id
            .rsplit_once('_')
            .map_or(first.id.as_str(), |(stem, _)| stem)
            .to_string();
        let image = &sources
            .iter()
            .find(|(i, _)| *i == id)
            .expect("sample ids derive from item ids")
            .1;
        let inputs: Vec<BinaryMask> = chunk.iter().map(|s| s.input_mask.clone()).collect();
        preview_grid(image, &first.target_mask, &inputs)?.save_png(&out.join(format!("{id}_grid.png")))?;
        written.push(id);
    }
    Ok(written)
}
