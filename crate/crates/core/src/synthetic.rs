//! Procedural video dataset: colored discs and squares moving over a
//! textured background, bouncing off the borders, sometimes passing behind
//! a static occluder bar. Ground truth and flow are exact.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{write_flo, FlowField};
use crate::manifest::{write_manifest, ManifestDocument, SequenceEntry};
use crate::model::{BinaryMask, Image, VideoSequence};
use crate::synth::rng_from_seed;

/// Speed at or above which a sequence is tagged `fast-motion`.
pub const FAST_MOTION_PX: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shape {
    Disc { radius: f64 },
    Square { half_side: f64 },
}

impl Shape {
    fn contains(&self, dx: f64, dy: f64) -> bool {
        match *self {
            Shape::Disc { radius } => dx * dx + dy * dy <= radius * radius,
            Shape::Square { half_side } => dx.abs() <= half_side && dy.abs() <= half_side,
        }
    }

    fn extent(&self) -> f64 {
        match *self {
            Shape::Disc { radius } => radius,
            Shape::Square { half_side } => half_side,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Shape::Disc { .. } => "disc",
            Shape::Square { .. } => "square",
        }
    }
}

/// Inclusive pixel rectangle drawn over the object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    pub color: [u8; 3],
}

impl Occluder {
    fn covers(&self, x: u32, y: u32) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub shape: Shape,
    pub color: [u8; 3],
    pub background: [u8; 3],
    pub start: [f64; 2],
    /// Pixels per frame before any bounce.
    pub velocity: [f64; 2],
    pub occluder: Option<Occluder>,
}

impl SceneSpec {
    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }

    pub fn attributes(&self) -> Vec<String> {
        let mut a = Vec::new();
        if self.speed() >= FAST_MOTION_PX {
            a.push("fast-motion".to_string());
        }
        if self.occluder.is_some() {
            a.push("occlusion".to_string());
        }
        a
    }

    /// Object centers, reflecting off the borders.
    pub fn trajectory(&self, frames: usize, width: u32, height: u32) -> Vec<[f64; 2]> {
        let e = self.shape.extent();
        let lo = [e, e];
        let hi = [width as f64 - 1.0 - e, height as f64 - 1.0 - e];
        let mut p = self.start;
        let mut v = self.velocity;
        let mut out = Vec::with_capacity(frames);
        for _ in 0..frames {
            out.push(p);
            for d in 0..2 {
                p[d] += v[d];
                if p[d] < lo[d] {
                    p[d] = 2.0 * lo[d] - p[d];
                    v[d] = -v[d];
                }
                if p[d] > hi[d] {
                    p[d] = 2.0 * hi[d] - p[d];
                    v[d] = -v[d];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    /// Peak amplitude of the static background texture.
    pub texture_amplitude: u8,
    /// Peak amplitude of per-frame noise on every pixel.
    pub noise_amplitude: u8,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            frames: 24,
            width: 64,
            height: 64,
            seed: 7,
            texture_amplitude: 14,
            noise_amplitude: 4,
        }
    }
}

/// The bundled scenes. Object, background and occluder colors never share
/// a channel-wise neighborhood, so appearance alone separates them.
pub fn default_scenes() -> Vec<SceneSpec> {
    let green = [50, 120, 60];
    let gray = [110, 110, 120];
    vec![
        SceneSpec {
            name: "red-disc".into(),
            shape: Shape::Disc { radius: 9.0 },
            color: [220, 40, 40],
            background: green,
            start: [16.0, 20.0],
            velocity: [2.0, 1.0],
            occluder: None,
        },
        SceneSpec {
            name: "blue-square-fast".into(),
            shape: Shape::Square { half_side: 8.0 },
            color: [40, 60, 230],
            background: green,
            start: [14.0, 40.0],
            velocity: [6.0, -3.0],
            occluder: None,
        },
        SceneSpec {
            name: "yellow-disc-occluded".into(),
            shape: Shape::Disc { radius: 10.0 },
            color: [235, 215, 40],
            background: gray,
            start: [13.0, 32.0],
            velocity: [3.0, 0.5],
            occluder: Some(Occluder {
                x0: 30,
                y0: 0,
                x1: 34,
                y1: 63,
                color: [150, 40, 170],
            }),
        },
        SceneSpec {
            name: "magenta-disc-fast".into(),
            shape: Shape::Disc { radius: 8.0 },
            color: [230, 50, 200],
            background: green,
            start: [40.0, 14.0],
            velocity: [5.0, 6.0],
            occluder: None,
        },
        SceneSpec {
            name: "cyan-square-occluded-fast".into(),
            shape: Shape::Square { half_side: 7.0 },
            color: [40, 220, 230],
            background: gray,
            start: [12.0, 24.0],
            velocity: [7.0, 2.0],
            occluder: Some(Occluder {
                x0: 0,
                y0: 44,
                x1: 63,
                y1: 48,
                color: [200, 110, 30],
            }),
        },
        SceneSpec {
            name: "white-square-drift".into(),
            shape: Shape::Square { half_side: 6.0 },
            color: [240, 240, 240],
            background: [60, 40, 110],
            start: [48.0, 48.0],
            velocity: [-1.5, -2.0],
            occluder: None,
        },
    ]
}

fn add_noise(v: u8, n: i32) -> u8 {
    (v as i32 + n).clamp(0, 255) as u8
}

/// Render one scene into a fully populated sequence.
pub fn render_scene(scene: &SceneSpec, config: &SyntheticConfig, scene_index: usize) -> Result<VideoSequence> {
    if config.frames < 2 {
        return Err(Error::InvalidParameter("synthetic sequences need at least 2 frames".into()));
    }
    let (w, h) = (config.width, config.height);
    let e = scene.shape.extent();
    if 2.0 * e + 1.0 >= w.min(h) as f64 {
        return Err(Error::InvalidParameter(format!("scene {} does not fit a {w}x{h} frame", scene.name)));
    }
    let centers = scene.trajectory(config.frames, w, h);
    let mut rng = rng_from_seed(config.seed ^ scene_index as u64);
    let ta = config.texture_amplitude as i32;
    let texture: Vec<[i32; 3]> = (0..w * h)
        .map(|_| {
            let n = rng.gen_range(-ta..=ta);
            [n, n / 2, -n]
        })
        .collect();

    let object_at = |t: usize| {
        let c = centers[t];
        BinaryMask::from_fn(w, h, |x, y| scene.shape.contains(x as f64 - c[0], y as f64 - c[1]))
    };
    let na = config.noise_amplitude as i32;
    let mut frames = Vec::with_capacity(config.frames);
    let mut gt = Vec::with_capacity(config.frames);
    let mut flow = Vec::with_capacity(config.frames - 1);
    for t in 0..config.frames {
        let obj = object_at(t);
        let visible = BinaryMask::from_fn(w, h, |x, y| {
            obj.get(x, y) && !scene.occluder.is_some_and(|o| o.covers(x, y))
        });
        let mut data = Vec::with_capacity((w * h * 3) as usize);
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                let (base, tex) = match scene.occluder {
                    Some(o) if o.covers(x, y) => (o.color, [0; 3]),
                    _ if obj.get(x, y) => (scene.color, [0; 3]),
                    _ => (scene.background, texture[i]),
                };
                for c in 0..3 {
                    data.push(add_noise(base[c], tex[c] + rng.gen_range(-na..=na)));
                }
            }
        }
        frames.push(Image::new(w, h, 3, data)?);
        if t + 1 < config.frames {
            let d = [
                (centers[t + 1][0] - centers[t][0]) as f32,
                (centers[t + 1][1] - centers[t][1]) as f32,
            ];
            flow.push(FlowField::from_fn(w, h, |x, y| if visible.get(x, y) { (d[0], d[1]) } else { (0.0, 0.0) })?);
        }
        gt.push(visible);
    }
    let mut seq = VideoSequence::new(scene.name.clone(), frames)?
        .with_ground_truth(gt)?
        .with_flow(flow)?;
    seq.attributes = scene.attributes();
    seq.category = Some(scene.shape.category().to_string());
    Ok(seq)
}

pub fn synthetic_sequences(config: &SyntheticConfig) -> Result<Vec<VideoSequence>> {
    default_scenes()
        .iter()
        .enumerate()
        .map(|(i, s)| render_scene(s, config, i))
        .collect()
}

/// Write frames, masks, flow and `manifest.json` under `out`; returns the
/// manifest path.
pub fn write_dataset(sequences: &[VideoSequence], out: &Path) -> Result<PathBuf> {
    let mut entries = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let rel = |kind: &str, t: usize, ext: &str| PathBuf::from(format!("{}/{kind}/{t:05}.{ext}", seq.name));
        for kind in ["frames", "gt", "flow"] {
            fs::create_dir_all(out.join(&seq.name).join(kind))?;
        }
        let mut frames = Vec::new();
        for (t, f) in seq.frames.iter().enumerate() {
            let p = rel("frames", t, "png");
            f.save_png(&out.join(&p))?;
            frames.push(p);
        }
        let gt_masks = match &seq.ground_truth {
            Some(gt) => {
                let mut v = Vec::new();
                for (t, m) in gt.iter().enumerate() {
                    let p = rel("gt", t, "png");
                    m.save_png(&out.join(&p))?;
                    v.push(p);
                }
                Some(v)
            }
            None => None,
        };
        let flow = match &seq.flow {
            Some(fields) => {
                let mut v = Vec::new();
                for (t, f) in fields.iter().enumerate() {
                    let p = rel("flow", t, "flo");
                    write_flo(f, &out.join(&p))?;
                    v.push(p);
                }
                Some(v)
            }
            None => None,
        };
        entries.push(SequenceEntry {
            name: seq.name.clone(),
            frames,
            gt_masks,
            attributes: seq.attributes.clone(),
            category: seq.category.clone(),
            flow,
            protocol: seq.protocol.preset_name().to_string(),
        });
    }
    let path = out.join("manifest.json");
    write_manifest(&ManifestDocument { sequences: entries }, &path)?;
    Ok(path)
}

pub fn generate_dataset(config: &SyntheticConfig, out: &Path) -> Result<PathBuf> {
    write_dataset(&synthetic_sequences(config)?, out)
}
