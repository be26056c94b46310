//! Jaccard scoring, dataset reports and the annotation-density experiment.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BinaryMask, EvalProtocol, VideoSequence};

/// Quantile levels reported for every density point.
pub const QUANTILE_LEVELS: [f64; 8] = [0.05, 0.10, 0.20, 0.30, 0.70, 0.80, 0.90, 0.95];

/// IoU assigned when both prediction and ground truth are empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EmptyConvention {
    #[default]
    One,
    Zero,
}

/// `|pred ∩ gt| / |pred ∪ gt|`, with both-empty scoring 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    iou_with(pred, gt, EmptyConvention::One)
}

pub fn iou_with(pred: &BinaryMask, gt: &BinaryMask, empty: EmptyConvention) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimensionMismatch {
            context: "iou".into(),
            expected: gt.dims(),
            actual: pred.dims(),
        });
    }
    let union = pred.union_count(gt);
    if union == 0 {
        return Ok(match empty {
            EmptyConvention::One => 1.0,
            EmptyConvention::Zero => 0.0,
        });
    }
    Ok(pred.intersection_count(gt) as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub name: String,
    pub frames: Vec<FrameScore>,
    pub mean: f64,
}

impl SequenceScore {
    pub fn frames_evaluated(&self) -> usize {
        self.frames.len()
    }
}

/// Score predicted masks against the sequence ground truth, skipping the
/// frames the protocol excludes. Annotated frames are scored like any other.
pub fn score_sequence(
    predictions: &[BinaryMask],
    sequence: &VideoSequence,
    protocol: EvalProtocol,
) -> Result<SequenceScore> {
    let gt = sequence
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::Eval(format!("sequence {} has no ground truth", sequence.name)))?;
    score_masks(&sequence.name, predictions, gt, protocol, EmptyConvention::One)
}

pub fn score_masks(
    name: &str,
    predictions: &[BinaryMask],
    gt: &[BinaryMask],
    protocol: EvalProtocol,
    empty: EmptyConvention,
) -> Result<SequenceScore> {
    if predictions.len() != gt.len() {
        return Err(Error::Eval(format!(
            "sequence {name}: {} predictions for {} ground-truth frames",
            predictions.len(),
            gt.len()
        )));
    }
    let n = gt.len();
    let mut frames = Vec::new();
    for (t, (p, g)) in predictions.iter().zip(gt).enumerate() {
        if protocol.is_evaluated(t, n) {
            let v = iou_with(p, g, empty).map_err(|e| e.at_frame(name, t))?;
            frames.push(FrameScore { frame: t, iou: v });
        }
    }
    if frames.is_empty() {
        return Err(Error::Eval(format!(
            "sequence {name}: no frames left to evaluate under the {} protocol",
            protocol.preset_name()
        )));
    }
    let mean = frames.iter().map(|f| f.iou).sum::<f64>() / frames.len() as f64;
    Ok(SequenceScore {
        name: name.to_string(),
        frames,
        mean,
    })
}

/// Sequence metadata consulted when grouping scores.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceTags {
    pub attributes: Vec<String>,
    pub category: Option<String>,
}

impl From<&VideoSequence> for SequenceTags {
    fn from(s: &VideoSequence) -> Self {
        SequenceTags {
            attributes: s.attributes.clone(),
            category: s.category.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMean {
    pub name: String,
    pub sequences: usize,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub sequences: Vec<SequenceScore>,
    /// Mean of per-sequence means ("mean per object").
    pub mean: Option<f64>,
    pub attributes: Vec<GroupMean>,
    /// Mean of per-category means ("mean per class"), when categories exist.
    pub mean_per_class: Option<f64>,
    pub classes: Vec<GroupMean>,
}

pub fn dataset_report(scores: &[SequenceScore], tags: &BTreeMap<String, SequenceTags>) -> Report {
    let mean = (!scores.is_empty()).then(|| scores.iter().map(|s| s.mean).sum::<f64>() / scores.len() as f64);

    let mut by_attr: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut by_class: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for s in scores {
        let Some(t) = tags.get(&s.name) else { continue };
        for a in &t.attributes {
            by_attr.entry(a).or_default().push(s.mean);
        }
        if let Some(c) = &t.category {
            by_class.entry(c).or_default().push(s.mean);
        }
    }
    let group = |m: BTreeMap<&str, Vec<f64>>| -> Vec<GroupMean> {
        m.into_iter()
            .map(|(k, v)| GroupMean {
                name: k.to_string(),
                sequences: v.len(),
                mean_iou: v.iter().sum::<f64>() / v.len() as f64,
            })
            .collect()
    };
    let classes = group(by_class);
    let mean_per_class =
        (!classes.is_empty()).then(|| classes.iter().map(|c| c.mean_iou).sum::<f64>() / classes.len() as f64);
    Report {
        sequences: scores.to_vec(),
        mean,
        attributes: group(by_attr),
        mean_per_class,
        classes,
    }
}

/// Linear-interpolation quantile (R type 7) of an ascending sample.
pub fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = (n - 1) as f64 * level.clamp(0.0, 1.0);
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityPoint {
    pub stride: usize,
    pub percent_annotated: f64,
    pub mean_iou: f64,
    /// Values at [`QUANTILE_LEVELS`], in order.
    pub quantiles: [f64; 8],
}

impl DensityPoint {
    /// Summarize pooled per-frame IoUs for one stride.
    pub fn from_pool(stride: usize, annotated: usize, total_frames: usize, pool: &[f64]) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Eval(format!("stride {stride}: no evaluated frames")));
        }
        let mut sorted = pool.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut quantiles = [0.0; 8];
        for (q, level) in quantiles.iter_mut().zip(QUANTILE_LEVELS) {
            *q = quantile_sorted(&sorted, level);
        }
        Ok(DensityPoint {
            stride,
            percent_annotated: 100.0 * annotated as f64 / total_frames as f64,
            mean_iou: pool.iter().sum::<f64>() / pool.len() as f64,
            quantiles,
        })
    }
}

/// Frames annotated at a given stride: `0, s, 2s, …` (a stride at or beyond
/// the sequence length annotates the first frame only).
pub fn annotated_frames(len: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    (0..len).step_by(stride).collect()
}

/// Serialize with a fixed precision so repeated runs are byte-identical.
fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Per-sequence table: `sequence,frames_evaluated,mean_iou`, followed by a
/// `mean` summary row when any sequence was scored.
pub fn emit_report(report: &Report, format: ReportFormat, path: &Path) -> Result<()> {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(["sequence", "frames_evaluated", "mean_iou"])?;
            for s in &report.sequences {
                w.write_record([s.name.clone(), s.frames_evaluated().to_string(), fmt(s.mean)])?;
            }
            if let Some(m) = report.mean {
                let total: usize = report.sequences.iter().map(|s| s.frames_evaluated()).sum();
                w.write_record(["mean".to_string(), total.to_string(), fmt(m)])?;
            }
            w.flush()?;
        }
        ReportFormat::Json => write_json(path, &report_json(report))?,
    }
    Ok(())
}

/// Attribute (and category) breakdown: `group,kind,sequences,mean_iou`.
pub fn emit_group_csv(report: &Report, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["group", "kind", "sequences", "mean_iou"])?;
    for (kind, groups) in [("attribute", &report.attributes), ("class", &report.classes)] {
        for g in groups {
            w.write_record([g.name.clone(), kind.to_string(), g.sequences.to_string(), fmt(g.mean_iou)])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn report_json(report: &Report) -> serde_json::Value {
    use serde_json::json;
    let round = |v: f64| (v * 1e6).round() / 1e6;
    let groups = |g: &[GroupMean]| -> Vec<serde_json::Value> {
        g.iter()
            .map(|g| json!({"name": g.name, "sequences": g.sequences, "mean_iou": round(g.mean_iou)}))
            .collect()
    };
    json!({
        "sequences": report.sequences.iter().map(|s| json!({
            "sequence": s.name,
            "frames_evaluated": s.frames_evaluated(),
            "mean_iou": round(s.mean),
            "per_frame": s.frames.iter().map(|f| json!({"frame": f.frame, "iou": round(f.iou)})).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
        "mean_iou": report.mean.map(round),
        "attributes": groups(&report.attributes),
        "classes": groups(&report.classes),
        "mean_per_class": report.mean_per_class.map(round),
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Density curve: `stride,percent,mean,q05,…,q95`.
pub fn emit_density(points: &[DensityPoint], format: ReportFormat, path: &Path) -> Result<()> {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(["stride", "percent", "mean", "q05", "q10", "q20", "q30", "q70", "q80", "q90", "q95"])?;
            for p in points {
                let mut row = vec![p.stride.to_string(), fmt(p.percent_annotated), fmt(p.mean_iou)];
                row.extend(p.quantiles.iter().map(|&q| fmt(q)));
                w.write_record(row)?;
            }
            w.flush()?;
        }
        ReportFormat::Json => {
            let round = |v: f64| (v * 1e6).round() / 1e6;
            let names = ["q05", "q10", "q20", "q30", "q70", "q80", "q90", "q95"];
            let rows: Vec<serde_json::Value> = points
                .iter()
                .map(|p| {
                    let mut obj = serde_json::Map::new();
                    obj.insert("stride".into(), p.stride.into());
                    obj.insert("percent".into(), round(p.percent_annotated).into());
                    obj.insert("mean".into(), round(p.mean_iou).into());
                    for (n, q) in names.iter().zip(p.quantiles) {
                        obj.insert((*n).into(), round(q).into());
                    }
                    serde_json::Value::Object(obj)
                })
                .collect();
            write_json(path, &serde_json::Value::Array(rows))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn block(x0: u32, y0: u32, w: u32, h: u32) -> BinaryMask {
        BinaryMask::from_fn(10, 10, |x, y| (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y))
    }

    #[test]
    fn iou_basic_cases() {
        let a = block(1, 1, 3, 3);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &block(6, 6, 3, 3)).unwrap(), 0.0);
        let empty = BinaryMask::new(10, 10);
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(iou_with(&empty, &empty, EmptyConvention::Zero).unwrap(), 0.0);
        assert!(iou(&a, &BinaryMask::new(3, 3)).is_err());
    }

    #[test]
    fn iou_enumerated_overlap() {
        // Two 3x3 blocks offset by one column share a 2-wide, 3-tall strip.
        let pred = block(2, 2, 3, 3);
        let gt = block(3, 2, 3, 3);
        let (mut inter, mut union) = (0, 0);
        for y in 0..10 {
            for x in 0..10 {
                let (p, g) = (pred.get(x, y), gt.get(x, y));
                inter += (p && g) as u32;
                union += (p || g) as u32;
            }
        }
        assert_eq!((inter, union), (6, 12));
        assert_eq!(iou(&pred, &gt).unwrap(), 0.5);
    }

    #[test]
    fn quantiles_type7() {
        let s = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.5), 2.0);
        assert!((quantile_sorted(&s, 0.05) - 0.2).abs() < 1e-12);
        assert!((quantile_sorted(&s, 0.95) - 3.8).abs() < 1e-12);
        assert_eq!(quantile_sorted(&[0.7], 0.3), 0.7);
    }

    #[test]
    fn report_groups() {
        let mk = |n: &str, m: f64| SequenceScore { name: n.into(), frames: vec![FrameScore { frame: 1, iou: m }], mean: m };
        let scores = vec![mk("a", 0.6), mk("b", 0.8), mk("c", 0.5), mk("d", 0.9)];
        let mut tags = BTreeMap::new();
        tags.insert("c".to_string(), SequenceTags { attributes: vec!["occ".into()], category: Some("car".into()) });
        tags.insert("d".to_string(), SequenceTags { attributes: vec!["occ".into()], category: Some("car".into()) });
        tags.insert("a".to_string(), SequenceTags { attributes: vec![], category: Some("cat".into()) });
        let two = dataset_report(&scores[..2], &tags);
        assert!((two.mean.unwrap() - 0.7).abs() < 1e-12);
        let all = dataset_report(&scores, &tags);
        assert_eq!(all.attributes.len(), 1);
        assert!((all.attributes[0].mean_iou - 0.7).abs() < 1e-12);
        assert_eq!(all.classes.len(), 2);
        // car = 0.7, cat = 0.6
        assert!((all.mean_per_class.unwrap() - 0.65).abs() < 1e-12);
    }

    #[test]
    fn annotated_frame_strides() {
        assert_eq!(annotated_frames(5, 1), vec![0, 1, 2, 3, 4]);
        assert_eq!(annotated_frames(11, 5), vec![0, 5, 10]);
        assert_eq!(annotated_frames(5, 40), vec![0]);
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(seed_a in any::<u64>(), seed_b in any::<u64>()) {
            let a = BinaryMask::from_fn(8, 8, |x, y| (seed_a >> ((x + 8 * y) % 64)) & 1 == 1);
            let b = BinaryMask::from_fn(8, 8, |x, y| (seed_b >> ((x * 8 + y) % 64)) & 1 == 1);
            let ab = iou(&a, &b).unwrap();
            prop_assert_eq!(ab, iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn quantiles_are_monotone(pool in proptest::collection::vec(0.0f64..=1.0, 1..60)) {
            let p = DensityPoint::from_pool(3, 1, 10, &pool).unwrap();
            for w in p.quantiles.windows(2) {
                prop_assert!(w[0] <= w[1]);
            }
        }
    }
}
