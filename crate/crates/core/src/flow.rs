//! Precomputed optical flow: Middlebury `.flo` I/O, flow-magnitude images and
//! fusion of the RGB-branch and flow-branch score maps.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Image, ScoreMap};

/// `"PIEH"` read as a little-endian float32.
pub const FLO_MAGIC: f32 = 202021.25;

/// Dense displacement field in pixels per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: u32,
    height: u32,
    /// Interleaved `(u, v)` pairs, row-major.
    uv: Vec<f32>,
}

impl FlowField {
    /// Builds a field from interleaved `(u, v)` pairs; rejects non-finite values.
    pub fn new(width: u32, height: u32, uv: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::FlowFormat(format!("non-positive dimensions {width}x{height}")));
        }
        if uv.len() != 2 * width as usize * height as usize {
            return Err(Error::FlowFormat(format!(
                "{} components for a {width}x{height} field",
                uv.len()
            )));
        }
        if let Some(i) = uv.iter().position(|v| !v.is_finite()) {
            return Err(Error::FlowFormat(format!(
                "non-finite component at pixel {}",
                i / 2
            )));
        }
        Ok(FlowField { width, height, uv })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> (f32, f32)) -> Result<Self> {
        let mut uv = Vec::with_capacity(2 * width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(x, y);
                uv.push(u);
                uv.push(v);
            }
        }
        FlowField::new(width, height, uv)
    }

    pub fn zeros(width: u32, height: u32) -> Result<Self> {
        FlowField::new(width, height, vec![0.0; 2 * width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn get(&self, x: u32, y: u32) -> (f32, f32) {
        let i = 2 * (y as usize * self.width as usize + x as usize);
        (self.uv[i], self.uv[i + 1])
    }

    pub fn components(&self) -> &[f32] {
        &self.uv
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::FlowFormat(format!("truncated header ({} bytes)", bytes.len())));
        }
        let magic = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
        if magic != FLO_MAGIC {
            return Err(Error::FlowFormat(format!("bad magic {magic}, expected {FLO_MAGIC}")));
        }
        let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if width <= 0 || height <= 0 {
            return Err(Error::FlowFormat(format!("non-positive dimensions {width}x{height}")));
        }
        let payload = &bytes[12..];
        let expected = 8 * width as usize * height as usize;
        if payload.len() < expected {
            return Err(Error::FlowFormat(format!(
                "truncated payload: {} of {expected} bytes",
                payload.len()
            )));
        }
        if payload.len() > expected {
            return Err(Error::FlowFormat(format!(
                "{} trailing bytes after payload",
                payload.len() - expected
            )));
        }
        let uv = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FlowField::new(width as u32, height as u32, uv)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.uv.len());
        out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        out.extend_from_slice(&(self.width as i32).to_le_bytes());
        out.extend_from_slice(&(self.height as i32).to_le_bytes());
        for v in &self.uv {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let mut file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    FlowField::decode(&bytes).map_err(|e| Error::FlowFormat(format!("{}: {e}", path.display())))
}

pub fn write_flo(flow: &FlowField, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&flow.encode())?;
    Ok(())
}

/// How flow magnitudes map onto 0..=255.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MagnitudeScaling {
    /// The largest magnitude in the frame maps to 255.
    #[default]
    PerFrameMax,
    /// A magnitude of `max` pixels maps to 255; larger values saturate.
    Fixed { max: f32 },
}

/// Flow magnitude rendered as a gray image replicated to three channels.
pub fn magnitude_image(flow: &FlowField) -> Image {
    magnitude_image_scaled(flow, MagnitudeScaling::PerFrameMax)
}

pub fn magnitude_image_scaled(flow: &FlowField, scaling: MagnitudeScaling) -> Image {
    let mags: Vec<f64> = flow
        .uv
        .chunks_exact(2)
        .map(|p| (p[0] as f64).hypot(p[1] as f64))
        .collect();
    let top = match scaling {
        MagnitudeScaling::PerFrameMax => mags.iter().copied().fold(0.0, f64::max),
        MagnitudeScaling::Fixed { max } => max as f64,
    };
    let data = mags
        .iter()
        .flat_map(|&m| {
            let v = if top > 0.0 {
                (255.0 * m / top + 0.5).floor().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            [v, v, v]
        })
        .collect();
    Image::new(flow.width, flow.height, 3, data).expect("flow dimensions are positive")
}

/// Per-pixel mean of the two branch scores.
pub fn fuse_scores(rgb: &ScoreMap, flow: &ScoreMap) -> Result<ScoreMap> {
    if rgb.dims() != flow.dims() {
        return Err(Error::DimensionMismatch {
            context: "score fusion".into(),
            expected: rgb.dims(),
            actual: flow.dims(),
        });
    }
    let data = rgb
        .data()
        .iter()
        .zip(flow.data())
        .map(|(&a, &b)| ((a as f64 + b as f64) / 2.0) as f32)
        .collect();
    ScoreMap::new(rgb.width(), rgb.height(), data)
}
