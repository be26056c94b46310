//! Shared data model: images, masks, score maps, boxes, annotations and sequences.
//!
//! Coordinates use a top-left origin with x growing rightward and y growing
//! downward. Buffers are row-major. Box bounds are inclusive.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;

/// An 8-bit raster with one (gray) or three (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidDimensions(format!(
                "image must be at least 1x1, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidDimensions(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(Error::InvalidDimensions(format!(
                "image buffer holds {} bytes, expected {expected}",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    /// Build an RGB image by evaluating `f(x, y)` at every pixel.
    pub fn from_rgb_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Image::new(width, height, 3, data)
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

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Channel samples of pixel `(x, y)`.
    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        &self.data[i..i + c]
    }

    /// The pixel as RGB, replicating gray images across the three channels.
    pub fn rgb(&self, x: u32, y: u32) -> [u8; 3] {
        let p = self.pixel(x, y);
        if self.channels == 1 {
            [p[0]; 3]
        } else {
            [p[0], p[1], p[2]]
        }
    }

    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        let c = self.channels as usize;
        let w = self.width as usize;
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(w * c) {
            for x in (0..w).rev() {
                data.extend_from_slice(&row[x * c..x * c + c]);
            }
        }
        Image { data, ..*self }
    }

    /// Rotate about the image center by `degrees` (counter-clockwise on screen),
    /// nearest-neighbor sampled. Pixels mapping outside the source are black.
    pub fn rotate(&self, degrees: f64) -> Image {
        let c = self.channels as usize;
        let mut data = vec![0u8; self.data.len()];
        for_each_rotated_source(self.width, self.height, degrees, |dst, src| {
            if let Some(s) = src {
                data[dst * c..dst * c + c].copy_from_slice(&self.data[s * c..s * c + c]);
            }
        });
        Image { data, ..*self }
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|source| image_error(path, source))?;
        let out = match img.color().channel_count() {
            1 | 2 => {
                let g = img.to_luma8();
                Image::new(g.width(), g.height(), 1, g.into_raw())?
            }
            _ => {
                let rgb = img.to_rgb8();
                Image::new(rgb.width(), rgb.height(), 3, rgb.into_raw())?
            }
        };
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width,
            self.height,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|source| image_error(path, source))
    }
}

fn image_error(path: &Path, source: image::ImageError) -> Error {
    match source {
        image::ImageError::IoError(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Error::MissingFile(path.to_path_buf())
        }
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    }
}

/// Backward-map every destination pixel of a rotation about the center and
/// report the nearest source index, if it lies on the canvas.
fn for_each_rotated_source(
    width: u32,
    height: u32,
    degrees: f64,
    mut f: impl FnMut(usize, Option<usize>),
) {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let (w, h) = (width as i64, height as i64);
    for y in 0..height {
        for x in 0..width {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            // Inverse of a screen-space counter-clockwise rotation (y points down).
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let (ix, iy) = (round_half_up(sx), round_half_up(sy));
            let dst = y as usize * width as usize + x as usize;
            let src = (ix >= 0 && iy >= 0 && ix < w && iy < h).then(|| (iy * w + ix) as usize);
            f(dst, src);
        }
    }
}

pub(crate) fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Per-pixel object/background labeling (foreground = `true`).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "BinaryMask {}x{} ({} fg)", self.width, self.height, self.count())?;
        if self.width <= 64 && self.height <= 64 {
            for row in self.data.chunks(self.width as usize) {
                let line: String = row.iter().map(|&b| if b { '#' } else { '.' }).collect();
                writeln!(f, "{line}")?;
            }
        }
        Ok(())
    }
}

impl BinaryMask {
    /// An all-background mask.
    pub fn new(width: u32, height: u32) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::InvalidDimensions(format!(
                "mask buffer holds {} pixels, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        BinaryMask {
            width,
            height,
            data,
        }
    }

    /// Decode 8-bit samples; any nonzero sample is foreground.
    pub fn from_bytes(width: u32, height: u32, bytes: &[u8]) -> Result<Self> {
        Self::from_vec(width, height, bytes.iter().map(|&b| b != 0).collect())
    }

    /// Encode as 8-bit samples, 0 = background, 255 = foreground.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&b| if b { 255 } else { 0 }).collect()
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

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    /// Like [`get`](Self::get) but treats out-of-canvas coordinates as background.
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && x < self.width as i64
            && y < self.height as i64
            && self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Tight bounding box of the foreground, `None` for an empty mask.
    pub fn bbox(&self) -> Option<BoundingBox> {
        let mut found: Option<BoundingBox> = None;
        for (i, &b) in self.data.iter().enumerate() {
            if !b {
                continue;
            }
            let x = (i % self.width as usize) as u32;
            let y = (i / self.width as usize) as u32;
            found = Some(match found {
                None => BoundingBox {
                    x_min: x,
                    y_min: y,
                    x_max: x,
                    y_max: y,
                },
                Some(b) => BoundingBox {
                    x_min: b.x_min.min(x),
                    y_min: b.y_min.min(y),
                    x_max: b.x_max.max(x),
                    y_max: b.y_max.max(y),
                },
            });
        }
        found
    }

    /// Mean foreground pixel position, `None` for an empty mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for (i, &b) in self.data.iter().enumerate() {
            if b {
                sx += (i % self.width as usize) as f64;
                sy += (i / self.width as usize) as f64;
                n += 1;
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn union_count(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a || b)
            .count()
    }

    pub fn flip_horizontal(&self) -> BinaryMask {
        let w = self.width as usize;
        let data = self
            .data
            .chunks_exact(w)
            .flat_map(|row| row.iter().rev().copied())
            .collect();
        BinaryMask { data, ..*self }
    }

    /// Same geometry as [`Image::rotate`]; uncovered pixels become background.
    pub fn rotate(&self, degrees: f64) -> BinaryMask {
        let mut data = vec![false; self.data.len()];
        for_each_rotated_source(self.width, self.height, degrees, |dst, src| {
            data[dst] = src.is_some_and(|s| self.data[s]);
        });
        BinaryMask { data, ..*self }
    }

    pub fn load_png(path: &Path) -> Result<BinaryMask> {
        let img = image::open(path).map_err(|source| image_error(path, source))?;
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        BinaryMask::from_bytes(w, h, gray.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer_with_format(
            path,
            &self.to_bytes(),
            self.width,
            self.height,
            image::ExtendedColorType::L8,
            image::ImageFormat::Png,
        )
        .map_err(|source| image_error(path, source))
    }
}

/// Per-pixel foreground probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl ScoreMap {
    /// Rejects any value outside `[0, 1]`, including NaN.
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::InvalidDimensions(format!(
                "score buffer holds {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::ScoreOutOfRange { index, value });
        }
        Ok(ScoreMap {
            width,
            height,
            data,
        })
    }

    /// 1.0 on foreground, 0.0 elsewhere.
    pub fn from_mask(mask: &BinaryMask) -> ScoreMap {
        ScoreMap {
            width: mask.width(),
            height: mask.height(),
            data: mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn filled(width: u32, height: u32, value: f32) -> Result<ScoreMap> {
        ScoreMap::new(width, height, vec![value; width as usize * height as usize])
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[y as usize * self.width as usize + x as usize]
    }
}

/// Foreground where `score > tau` (strict).
pub fn threshold(scores: &ScoreMap, tau: f32) -> BinaryMask {
    BinaryMask {
        width: scores.width,
        height: scores.height,
        data: scores.data.iter().map(|&v| v > tau).collect(),
    }
}

/// Axis-aligned box with inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoundingBox {
    pub fn width(&self) -> u32 {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min + 1
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    fn check(&self, width: u32, height: u32) -> Result<()> {
        if self.x_min > self.x_max || self.y_min > self.y_max || self.x_max >= width || self.y_max >= height {
            return Err(Error::BoxOutOfBounds {
                x_min: self.x_min,
                y_min: self.y_min,
                x_max: self.x_max,
                y_max: self.y_max,
                width,
                height,
            });
        }
        Ok(())
    }
}

/// Rasterize a box: exactly the pixels inside the inclusive bounds are foreground.
pub fn mask_from_box(bbox: &BoundingBox, width: u32, height: u32) -> Result<BinaryMask> {
    bbox.check(width, height)?;
    Ok(BinaryMask::from_fn(width, height, |x, y| {
        (bbox.x_min..=bbox.x_max).contains(&x) && (bbox.y_min..=bbox.y_max).contains(&y)
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnnotationKind {
    Segment(BinaryMask),
    Box(BoundingBox),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub frame_index: usize,
    pub kind: AnnotationKind,
}

impl Annotation {
    pub fn segment(frame_index: usize, mask: BinaryMask) -> Self {
        Annotation {
            frame_index,
            kind: AnnotationKind::Segment(mask),
        }
    }

    pub fn bbox(frame_index: usize, bbox: BoundingBox) -> Self {
        Annotation {
            frame_index,
            kind: AnnotationKind::Box(bbox),
        }
    }

    /// The annotation as a mask; boxes are filled.
    pub fn to_mask(&self, width: u32, height: u32) -> Result<BinaryMask> {
        match &self.kind {
            AnnotationKind::Segment(m) => {
                if m.dims() != (width, height) {
                    return Err(Error::DimensionMismatch {
                        context: format!("annotation on frame {}", self.frame_index),
                        expected: (width, height),
                        actual: m.dims(),
                    });
                }
                Ok(m.clone())
            }
            AnnotationKind::Box(b) => mask_from_box(b, width, height),
        }
    }
}

/// Which frames are excluded from scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub exclude_first: bool,
    pub exclude_last: bool,
}

impl EvalProtocol {
    /// First and last frames excluded.
    pub const DAVIS: EvalProtocol = EvalProtocol {
        exclude_first: true,
        exclude_last: true,
    };
    /// Only the first frame excluded (YoutubeObjects / SegTrack convention).
    pub const FIRST_ONLY: EvalProtocol = EvalProtocol {
        exclude_first: true,
        exclude_last: false,
    };

    pub fn preset(name: &str) -> Option<EvalProtocol> {
        match name {
            "davis" => Some(Self::DAVIS),
            "first-only" => Some(Self::FIRST_ONLY),
            _ => None,
        }
    }

    pub fn preset_name(&self) -> &'static str {
        match (self.exclude_first, self.exclude_last) {
            (true, true) => "davis",
            (true, false) => "first-only",
            (false, true) => "last-only",
            (false, false) => "all",
        }
    }

    pub fn is_evaluated(&self, frame: usize, frame_count: usize) -> bool {
        !(self.exclude_first && frame == 0 || self.exclude_last && frame + 1 == frame_count)
    }
}

/// An ordered, fully loaded frame sequence for one object instance.
#[derive(Debug, Clone)]
pub struct VideoSequence {
    pub name: String,
    pub frames: Vec<Image>,
    pub ground_truth: Option<Vec<BinaryMask>>,
    pub attributes: Vec<String>,
    pub category: Option<String>,
    /// `flow[t]` is the displacement field from frame `t` to frame `t + 1`.
    pub flow: Option<Vec<FlowField>>,
    pub protocol: EvalProtocol,
}

impl VideoSequence {
    pub fn new(name: impl Into<String>, frames: Vec<Image>) -> Result<Self> {
        let seq = VideoSequence {
            name: name.into(),
            frames,
            ground_truth: None,
            attributes: Vec::new(),
            category: None,
            flow: None,
            protocol: EvalProtocol::DAVIS,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn with_ground_truth(mut self, gt: Vec<BinaryMask>) -> Result<Self> {
        self.ground_truth = Some(gt);
        self.validate()?;
        Ok(self)
    }

    pub fn with_flow(mut self, flow: Vec<FlowField>) -> Result<Self> {
        self.flow = Some(flow);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (u32, u32) {
        self.frames[0].dims()
    }

    /// Check shared resolution across frames, masks and flow fields.
    pub fn validate(&self) -> Result<()> {
        let err = |frame: usize, message: String| Error::Frame {
            sequence: self.name.clone(),
            frame,
            message,
        };
        let Some(first) = self.frames.first() else {
            return Err(Error::Manifest {
                sequence: self.name.clone(),
                message: "sequence has no frames".into(),
            });
        };
        let dims = first.dims();
        for (i, f) in self.frames.iter().enumerate() {
            if f.dims() != dims {
                return Err(err(i, format!("frame is {:?}, sequence is {:?}", f.dims(), dims)));
            }
        }
        if let Some(gt) = &self.ground_truth {
            if gt.len() != self.frames.len() {
                return Err(Error::Manifest {
                    sequence: self.name.clone(),
                    message: format!("{} ground-truth masks for {} frames", gt.len(), self.frames.len()),
                });
            }
            for (i, m) in gt.iter().enumerate() {
                if m.dims() != dims {
                    return Err(err(i, format!("mask is {:?}, image is {:?}", m.dims(), dims)));
                }
            }
        }
        if let Some(flow) = &self.flow {
            let n = self.frames.len();
            if flow.is_empty() || flow.len() + 1 < n || flow.len() > n {
                return Err(Error::Manifest {
                    sequence: self.name.clone(),
                    message: format!("{} flow fields for {} frames", flow.len(), n),
                });
            }
            for (i, f) in flow.iter().enumerate() {
                if f.dims() != dims {
                    return Err(err(i, format!("flow is {:?}, image is {:?}", f.dims(), dims)));
                }
            }
        }
        Ok(())
    }

    /// Flow field describing motion at frame `t`: the forward field out of
    /// `t`, or for the final frame the field that arrived at it.
    pub fn flow_at(&self, t: usize) -> Option<&FlowField> {
        let flow = self.flow.as_ref()?;
        flow.get(t).or_else(|| flow.last())
    }
}
