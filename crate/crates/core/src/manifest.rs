//! JSON dataset manifests.
//!
//! ```json
//! { "sequences": [ { "name": "car", "frames": ["car/00000.png", "..."],
//!                    "gt_masks": ["car/gt/00000.png", "..."] | null,
//!                    "attributes": ["fast-motion"], "category": "vehicle",
//!                    "flow": ["car/flow/00000.flo", "..."] | null,
//!                    "protocol": "davis" | "first-only" } ] }
//! ```
//!
//! Relative paths resolve against the manifest's directory. `flow` holds
//! the fields from each frame to the next, so one fewer than the frames
//! (a trailing field for the last frame is also accepted).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::SequenceTags;
use crate::flow::{read_flo, FLO_MAGIC};
use crate::model::{BinaryMask, EvalProtocol, Image, VideoSequence};

fn default_protocol() -> String {
    "davis".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub name: String,
    pub frames: Vec<PathBuf>,
    #[serde(default)]
    pub gt_masks: Option<Vec<PathBuf>>,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub category: Option<String>,
    #[serde(default)]
    pub flow: Option<Vec<PathBuf>>,
    #[serde(default = "default_protocol")]
    pub protocol: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDocument {
    pub sequences: Vec<SequenceEntry>,
}

/// A validated manifest with paths resolved to absolute locations.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub sequences: Vec<SequenceEntry>,
    /// Resolution of each sequence, read from file headers.
    pub dims: Vec<(u32, u32)>,
}

fn manifest_err(sequence: &str, message: impl Into<String>) -> Error {
    Error::Manifest {
        sequence: sequence.to_string(),
        message: message.into(),
    }
}

fn frame_err(sequence: &str, frame: usize, message: impl Into<String>) -> Error {
    Error::Frame {
        sequence: sequence.to_string(),
        frame,
        message: message.into(),
    }
}

fn image_dims(path: &Path) -> Result<(u32, u32)> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn flo_dims(path: &Path) -> Result<(u32, u32)> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut head = [0u8; 12];
    fs::File::open(path)?
        .read_exact(&mut head)
        .map_err(|_| Error::FlowFormat(format!("{}: truncated header", path.display())))?;
    let magic = f32::from_le_bytes(head[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(Error::FlowFormat(format!("{}: bad magic {magic}", path.display())));
    }
    let w = i32::from_le_bytes(head[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(head[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 {
        return Err(Error::FlowFormat(format!("{}: non-positive size {w}x{h}", path.display())));
    }
    Ok((w as u32, h as u32))
}

/// Names become directory names in result trees.
fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && !name.contains(['/', '\\'])
        && !name.chars().any(char::is_control);
    if ok {
        Ok(())
    } else {
        Err(manifest_err(name, "sequence names must be non-empty and usable as a directory name"))
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let doc: ManifestDocument = serde_json::from_str(&text)
        .map_err(|e| manifest_err("<manifest>", format!("{}: schema violation: {e}", path.display())))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    resolve(path, &root, doc)
}

/// Validate a parsed document, resolving relative paths against `root`.
pub fn resolve(path: &Path, root: &Path, doc: ManifestDocument) -> Result<DatasetManifest> {
    let mut names = BTreeSet::new();
    let mut sequences = Vec::with_capacity(doc.sequences.len());
    let mut all_dims = Vec::with_capacity(doc.sequences.len());
    for mut s in doc.sequences {
        check_name(&s.name)?;
        if !names.insert(s.name.clone()) {
            return Err(manifest_err(&s.name, "duplicate sequence name"));
        }
        if EvalProtocol::preset(&s.protocol).is_none() {
            return Err(manifest_err(
                &s.name,
                format!("unknown protocol {:?}; expected \"davis\" or \"first-only\"", s.protocol),
            ));
        }
        if s.frames.is_empty() {
            return Err(manifest_err(&s.name, "no frames listed"));
        }
        let abs = |p: &mut PathBuf| *p = root.join(&*p);
        s.frames.iter_mut().for_each(abs);
        s.gt_masks.iter_mut().flatten().for_each(abs);
        s.flow.iter_mut().flatten().for_each(abs);

        let n = s.frames.len();
        let dims = image_dims(&s.frames[0]).map_err(|e| e.at_frame(&s.name, 0))?;
        for (i, f) in s.frames.iter().enumerate().skip(1) {
            let d = image_dims(f).map_err(|e| e.at_frame(&s.name, i))?;
            if d != dims {
                return Err(frame_err(&s.name, i, format!("frame is {d:?}, first frame is {dims:?}")));
            }
        }
        if let Some(gt) = &s.gt_masks {
            if gt.len() != n {
                return Err(manifest_err(&s.name, format!("{} ground-truth masks for {n} frames", gt.len())));
            }
            for (i, m) in gt.iter().enumerate() {
                let d = image_dims(m).map_err(|e| e.at_frame(&s.name, i))?;
                if d != dims {
                    return Err(frame_err(
                        &s.name,
                        i,
                        format!("mask {} is {d:?}, image is {dims:?}", m.display()),
                    ));
                }
            }
        }
        if let Some(flow) = &s.flow {
            if flow.is_empty() || flow.len() + 1 < n || flow.len() > n {
                return Err(manifest_err(&s.name, format!("{} flow fields for {n} frames", flow.len())));
            }
            for (i, f) in flow.iter().enumerate() {
                let d = flo_dims(f).map_err(|e| e.at_frame(&s.name, i))?;
                if d != dims {
                    return Err(frame_err(&s.name, i, format!("flow {} is {d:?}, image is {dims:?}", f.display())));
                }
            }
        }
        sequences.push(s);
        all_dims.push(dims);
    }
    Ok(DatasetManifest {
        path: path.to_path_buf(),
        sequences,
        dims: all_dims,
    })
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.sequences.iter().position(|s| s.name == name)
    }

    pub fn tags(&self) -> BTreeMap<String, SequenceTags> {
        self.sequences
            .iter()
            .map(|s| {
                (
                    s.name.clone(),
                    SequenceTags {
                        attributes: s.attributes.clone(),
                        category: s.category.clone(),
                    },
                )
            })
            .collect()
    }

    /// Decode every file of sequence `index`.
    pub fn load_sequence(&self, index: usize) -> Result<VideoSequence> {
        let s = &self.sequences[index];
        let frames = s
            .frames
            .iter()
            .enumerate()
            .map(|(i, p)| Image::load(p).map_err(|e| e.at_frame(&s.name, i)))
            .collect::<Result<Vec<_>>>()?;
        let mut seq = VideoSequence::new(s.name.clone(), frames)?;
        if let Some(gt) = &s.gt_masks {
            let masks = gt
                .iter()
                .enumerate()
                .map(|(i, p)| BinaryMask::load_png(p).map_err(|e| e.at_frame(&s.name, i)))
                .collect::<Result<Vec<_>>>()?;
            seq = seq.with_ground_truth(masks)?;
        }
        if let Some(flow) = &s.flow {
            let fields = flow
                .iter()
                .enumerate()
                .map(|(i, p)| read_flo(p).map_err(|e| e.at_frame(&s.name, i)))
                .collect::<Result<Vec<_>>>()?;
            seq = seq.with_flow(fields)?;
        }
        seq.attributes = s.attributes.clone();
        seq.category = s.category.clone();
        seq.protocol = EvalProtocol::preset(&s.protocol).expect("validated at load");
        Ok(seq)
    }
}

/// Write a manifest document with paths relative to its own directory.
pub fn write_manifest(doc: &ManifestDocument, path: &Path) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(doc)?;
    json.push(b'\n');
    fs::write(path, json)?;
    Ok(())
}
