//! Binary protocol spoken with out-of-process refiners.
//!
//! All integers are little-endian `u32`.
//!
//! ```text
//! request   "MTRQ" len header{"w","h","channels","has_mask"} image[w·h·c] mask[w·h]?
//! response  "MTRS" w h scores[w·h]:f32
//! error     "MTER" len utf8
//! fine-tune "MTFT" len {"n_samples"} then per sample:
//!           len header{"w","h","channels","has_mask":true} image input[w·h] target[w·h]
//! ack       "MTOK"                    (reply to a completed fine-tune)
//! bye       "MTBY"
//! ```
//!
//! Mask bytes are 0 for background and 255 for foreground; readers treat
//! any nonzero byte as foreground.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BinaryMask, Image, ScoreMap};
use crate::synth::TrainingSample;

pub const MAGIC_REQUEST: &[u8; 4] = b"MTRQ";
pub const MAGIC_RESPONSE: &[u8; 4] = b"MTRS";
pub const MAGIC_ERROR: &[u8; 4] = b"MTER";
pub const MAGIC_FINETUNE: &[u8; 4] = b"MTFT";
pub const MAGIC_ACK: &[u8; 4] = b"MTOK";
pub const MAGIC_BYE: &[u8; 4] = b"MTBY";

const MAX_HEADER_LEN: u32 = 1 << 16;
const MAX_PIXELS: u64 = 1 << 26;
const MAX_MESSAGE_LEN: u32 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameHeader {
    pub w: u32,
    pub h: u32,
    pub channels: u8,
    pub has_mask: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct FineTuneHeader {
    n_samples: u32,
}

/// A message arriving at a backend.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientMessage {
    Refine { image: Image, mask: Option<BinaryMask> },
    FineTune(Vec<TrainingSample>),
    Bye,
}

/// A backend's answer to a refine or fine-tune message.
#[derive(Debug, Clone, PartialEq)]
pub enum ServerMessage {
    Scores(ScoreMap),
    Ack,
    Error(String),
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Read a magic, or `None` on a clean end of stream before its first byte.
fn read_magic(r: &mut impl Read) -> Result<Option<[u8; 4]>> {
    let mut m = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut m[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Protocol("stream ended inside a magic".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Some(m))
}

fn write_json_block<T: Serialize>(w: &mut impl Write, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec(value)?;
    write_u32(w, bytes.len() as u32)?;
    w.write_all(&bytes)?;
    Ok(())
}

fn read_json_block<T: for<'de> Deserialize<'de>>(r: &mut impl Read) -> Result<T> {
    let len = read_u32(r)?;
    if len > MAX_HEADER_LEN {
        return Err(Error::Protocol(format!("header of {len} bytes exceeds limit")));
    }
    let bytes = read_bytes(r, len as usize)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Protocol(format!("bad header: {e}")))
}

fn check_header(h: &FrameHeader) -> Result<()> {
    if h.w == 0 || h.h == 0 || h.w as u64 * h.h as u64 > MAX_PIXELS {
        return Err(Error::Protocol(format!("unsupported frame size {}x{}", h.w, h.h)));
    }
    if h.channels != 1 && h.channels != 3 {
        return Err(Error::Protocol(format!("unsupported channel count {}", h.channels)));
    }
    Ok(())
}

fn write_frame(w: &mut impl Write, image: &Image, masks: &[&BinaryMask]) -> Result<()> {
    for m in masks {
        if m.dims() != image.dims() {
            return Err(Error::DimensionMismatch {
                context: "wire frame".into(),
                expected: image.dims(),
                actual: m.dims(),
            });
        }
    }
    let header = FrameHeader {
        w: image.width(),
        h: image.height(),
        channels: image.channels(),
        has_mask: !masks.is_empty(),
    };
    write_json_block(w, &header)?;
    w.write_all(image.data())?;
    for m in masks {
        w.write_all(&m.to_bytes())?;
    }
    Ok(())
}

fn read_frame(r: &mut impl Read, extra_masks: usize) -> Result<(Image, Vec<BinaryMask>)> {
    let header: FrameHeader = read_json_block(r)?;
    check_header(&header)?;
    let n = header.w as usize * header.h as usize;
    let image = Image::new(
        header.w,
        header.h,
        header.channels,
        read_bytes(r, n * header.channels as usize)?,
    )?;
    let count = header.has_mask as usize + extra_masks;
    let mut masks = Vec::with_capacity(count);
    for _ in 0..count {
        masks.push(BinaryMask::from_bytes(header.w, header.h, &read_bytes(r, n)?)?);
    }
    Ok((image, masks))
}

pub fn write_refine_request(w: &mut impl Write, image: &Image, mask: Option<&BinaryMask>) -> Result<()> {
    w.write_all(MAGIC_REQUEST)?;
    write_frame(w, image, mask.as_slice())?;
    w.flush()?;
    Ok(())
}

pub fn write_fine_tune(w: &mut impl Write, samples: &[TrainingSample]) -> Result<()> {
    w.write_all(MAGIC_FINETUNE)?;
    write_json_block(w, &FineTuneHeader {
        n_samples: samples.len() as u32,
    })?;
    for s in samples {
        write_frame(w, &s.image, &[&s.input_mask, &s.target_mask])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_bye(w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC_BYE)?;
    w.flush()?;
    Ok(())
}

pub fn write_scores(w: &mut impl Write, scores: &ScoreMap) -> Result<()> {
    w.write_all(MAGIC_RESPONSE)?;
    write_u32(w, scores.width())?;
    write_u32(w, scores.height())?;
    let mut buf = Vec::with_capacity(4 * scores.data().len());
    for v in scores.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn write_ack(w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC_ACK)?;
    w.flush()?;
    Ok(())
}

pub fn write_error(w: &mut impl Write, message: &str) -> Result<()> {
    w.write_all(MAGIC_ERROR)?;
    write_u32(w, message.len() as u32)?;
    w.write_all(message.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Backend side: the next client message, `None` on clean end of stream.
pub fn read_client_message(r: &mut impl Read) -> Result<Option<ClientMessage>> {
    let Some(magic) = read_magic(r)? else {
        return Ok(None);
    };
    let msg = match &magic {
        MAGIC_REQUEST => {
            let (image, mut masks) = read_frame(r, 0)?;
            ClientMessage::Refine {
                image,
                mask: masks.pop(),
            }
        }
        MAGIC_FINETUNE => {
            let header: FineTuneHeader = read_json_block(r)?;
            let mut samples = Vec::with_capacity(header.n_samples.min(4096) as usize);
            for i in 0..header.n_samples {
                let (image, masks) = read_frame(r, 1)?;
                let [input_mask, target_mask]: [BinaryMask; 2] = masks
                    .try_into()
                    .map_err(|_| Error::Protocol(format!("fine-tune sample {i} lacks an input mask")))?;
                samples.push(TrainingSample {
                    id: format!("wire_{i:05}"),
                    image,
                    input_mask,
                    target_mask,
                });
            }
            ClientMessage::FineTune(samples)
        }
        MAGIC_BYE => ClientMessage::Bye,
        other => {
            return Err(Error::Protocol(format!(
                "unexpected client magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    Ok(Some(msg))
}

/// Client side: the backend's reply.
pub fn read_server_message(r: &mut impl Read) -> Result<ServerMessage> {
    let magic = read_magic(r)?.ok_or_else(|| Error::Protocol("backend closed the stream".into()))?;
    match &magic {
        MAGIC_RESPONSE => {
            let w = read_u32(r)?;
            let h = read_u32(r)?;
            if w == 0 || h == 0 || w as u64 * h as u64 > MAX_PIXELS {
                return Err(Error::Protocol(format!("unsupported response size {w}x{h}")));
            }
            let raw = read_bytes(r, 4 * w as usize * h as usize)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let scores = ScoreMap::new(w, h, data).map_err(|e| Error::Protocol(format!("invalid scores: {e}")))?;
            Ok(ServerMessage::Scores(scores))
        }
        MAGIC_ACK => Ok(ServerMessage::Ack),
        MAGIC_ERROR => {
            let len = read_u32(r)?;
            if len > MAX_MESSAGE_LEN {
                return Err(Error::Protocol(format!("error message of {len} bytes exceeds limit")));
            }
            let bytes = read_bytes(r, len as usize)?;
            Ok(ServerMessage::Error(String::from_utf8_lossy(&bytes).into_owned()))
        }
        other => Err(Error::Protocol(format!(
            "unexpected backend magic {:?}",
            String::from_utf8_lossy(other)
        ))),
    }
}
