//! Mask refiners: given a frame and an optional coarse guidance mask,
//! produce per-pixel foreground scores.

pub mod color_model;
pub mod wire;

use std::fmt;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BinaryMask, Image, ScoreMap, VideoSequence};
use crate::synth::TrainingSample;

pub use color_model::{fit_online, ColorModelConfig, ColorModelState};
use wire::{ClientMessage, ServerMessage};

#[derive(Debug, Clone, Copy)]
pub struct RefinerRequest<'a> {
    pub image: &'a Image,
    /// `None` runs the refiner without a mask channel.
    pub guidance: Option<&'a BinaryMask>,
    /// Only the oracle looks at this.
    pub frame_index: usize,
}

impl<'a> RefinerRequest<'a> {
    pub fn new(image: &'a Image, guidance: Option<&'a BinaryMask>, frame_index: usize) -> Self {
        RefinerRequest {
            image,
            guidance,
            frame_index,
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(g) = self.guidance {
            if g.dims() != self.image.dims() {
                return Err(Error::DimensionMismatch {
                    context: "guidance mask".into(),
                    expected: self.image.dims(),
                    actual: g.dims(),
                });
            }
        }
        Ok(())
    }
}

/// Which refiner to build; parsed from `identity`, `oracle`, `colormodel`
/// or `external:<addr>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RefinerSpec {
    Identity,
    Oracle,
    ColorModel,
    /// `host:port`, `tcp:host:port` or `exec:<shell command>`.
    External(String),
}

impl FromStr for RefinerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(RefinerSpec::Identity),
            "oracle" => Ok(RefinerSpec::Oracle),
            "colormodel" => Ok(RefinerSpec::ColorModel),
            _ => match s.strip_prefix("external:") {
                Some(addr) if !addr.is_empty() => Ok(RefinerSpec::External(addr.to_string())),
                _ => Err(Error::InvalidParameter(format!(
                    "unknown refiner {s:?}; expected identity, oracle, colormodel or external:<addr>"
                ))),
            },
        }
    }
}

impl TryFrom<String> for RefinerSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RefinerSpec> for String {
    fn from(spec: RefinerSpec) -> String {
        spec.to_string()
    }
}

impl fmt::Display for RefinerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RefinerSpec::Identity => f.write_str("identity"),
            RefinerSpec::Oracle => f.write_str("oracle"),
            RefinerSpec::ColorModel => f.write_str("colormodel"),
            RefinerSpec::External(addr) => write!(f, "external:{addr}"),
        }
    }
}

#[derive(Debug)]
pub enum Refiner {
    /// Echoes the guidance mask.
    Identity,
    /// Answers with the ground truth of the requested frame.
    Oracle(Vec<BinaryMask>),
    ColorModel {
        config: ColorModelConfig,
        state: Option<ColorModelState>,
    },
    External(ExternalRefiner),
}

impl Refiner {
    pub fn oracle(sequence: &VideoSequence) -> Result<Refiner> {
        match &sequence.ground_truth {
            Some(gt) => Ok(Refiner::Oracle(gt.clone())),
            None => Err(Error::Refiner(format!(
                "oracle refiner needs ground truth, sequence {:?} has none",
                sequence.name
            ))),
        }
    }

    pub fn color_model(config: ColorModelConfig) -> Result<Refiner> {
        config.validate()?;
        Ok(Refiner::ColorModel { config, state: None })
    }

    pub fn external(addr: &str) -> Result<Refiner> {
        Ok(Refiner::External(ExternalRefiner::connect(addr)?))
    }

    /// Build the refiner named by `spec` for one sequence.
    pub fn from_spec(spec: &RefinerSpec, sequence: &VideoSequence, color: &ColorModelConfig) -> Result<Refiner> {
        match spec {
            RefinerSpec::Identity => Ok(Refiner::Identity),
            RefinerSpec::Oracle => Refiner::oracle(sequence),
            RefinerSpec::ColorModel => Refiner::color_model(color.clone()),
            RefinerSpec::External(addr) => Refiner::external(addr),
        }
    }

    /// Whether `fine_tune` does anything for this kind.
    pub fn learns_online(&self) -> bool {
        matches!(self, Refiner::ColorModel { .. } | Refiner::External(_))
    }

    pub fn fine_tune(&mut self, samples: &[TrainingSample]) -> Result<()> {
        match self {
            Refiner::Identity | Refiner::Oracle(_) => Ok(()),
            Refiner::ColorModel { config, state } => {
                *state = Some(fit_online(config, samples)?);
                Ok(())
            }
            Refiner::External(ext) => ext.fine_tune(samples),
        }
    }

    pub fn refine(&mut self, request: &RefinerRequest) -> Result<ScoreMap> {
        request.validate()?;
        let (w, h) = request.image.dims();
        match self {
            Refiner::Identity => match request.guidance {
                Some(g) => Ok(ScoreMap::from_mask(g)),
                None => Err(Error::Refiner("identity refiner needs a guidance mask".into())),
            },
            Refiner::Oracle(gt) => {
                let mask = gt.get(request.frame_index).ok_or_else(|| {
                    Error::Refiner(format!("oracle has no ground truth for frame {}", request.frame_index))
                })?;
                if mask.dims() != (w, h) {
                    return Err(Error::DimensionMismatch {
                        context: "oracle ground truth".into(),
                        expected: (w, h),
                        actual: mask.dims(),
                    });
                }
                Ok(ScoreMap::from_mask(mask))
            }
            Refiner::ColorModel { state, .. } => {
                let state = state
                    .as_ref()
                    .ok_or_else(|| Error::Refiner("color model used before fitting".into()))?;
                state.score(request.image, request.guidance)
            }
            Refiner::External(ext) => ext.refine(request.image, request.guidance),
        }
    }
}

/// Client for a refiner living in another process, reached over TCP or
/// the stdio of a spawned command.
pub struct ExternalRefiner {
    endpoint: String,
    reader: Box<dyn Read + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
}

impl fmt::Debug for ExternalRefiner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExternalRefiner").field("endpoint", &self.endpoint).finish()
    }
}

impl ExternalRefiner {
    pub fn connect(addr: &str) -> Result<ExternalRefiner> {
        let unreachable = |e: std::io::Error| Error::Refiner(format!("cannot reach refiner at {addr:?}: {e}"));
        if let Some(cmd) = addr.strip_prefix("exec:") {
            let mut child = Command::new("sh")
                .arg("-c")
                .arg(cmd)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .spawn()
                .map_err(unreachable)?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            return Ok(ExternalRefiner {
                endpoint: addr.to_string(),
                reader: Box::new(BufReader::new(stdout)),
                writer: Box::new(BufWriter::new(stdin)),
                child: Some(child),
            });
        }
        let host = addr.strip_prefix("tcp:").unwrap_or(addr);
        let stream = TcpStream::connect(host).map_err(unreachable)?;
        stream.set_nodelay(true).ok();
        let reader = stream.try_clone().map_err(unreachable)?;
        Ok(ExternalRefiner::from_streams(addr, reader, stream))
    }

    /// Wrap an already-open byte stream pair.
    pub fn from_streams(
        endpoint: &str,
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
    ) -> ExternalRefiner {
        ExternalRefiner {
            endpoint: endpoint.to_string(),
            reader: Box::new(BufReader::new(reader)),
            writer: Box::new(BufWriter::new(writer)),
            child: None,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn remote(&self, message: String) -> Error {
        Error::Remote(format!("{}: {message}", self.endpoint))
    }

    pub fn refine(&mut self, image: &Image, guidance: Option<&BinaryMask>) -> Result<ScoreMap> {
        wire::write_refine_request(&mut self.writer, image, guidance)?;
        match wire::read_server_message(&mut self.reader)? {
            ServerMessage::Scores(s) if s.dims() == image.dims() => Ok(s),
            ServerMessage::Scores(s) => Err(Error::Protocol(format!(
                "backend answered {}x{} for a {}x{} frame",
                s.width(),
                s.height(),
                image.width(),
                image.height()
            ))),
            ServerMessage::Error(m) => Err(self.remote(m)),
            ServerMessage::Ack => Err(Error::Protocol("acknowledgement where scores were expected".into())),
        }
    }

    pub fn fine_tune(&mut self, samples: &[TrainingSample]) -> Result<()> {
        wire::write_fine_tune(&mut self.writer, samples)?;
        match wire::read_server_message(&mut self.reader)? {
            ServerMessage::Ack => Ok(()),
            ServerMessage::Error(m) => Err(self.remote(m)),
            ServerMessage::Scores(_) => Err(Error::Protocol("scores where an acknowledgement was expected".into())),
        }
    }
}

impl Drop for ExternalRefiner {
    fn drop(&mut self) {
        let _ = wire::write_bye(&mut self.writer);
        if let Some(child) = &mut self.child {
            // Closing stdin lets a well-behaved backend exit even if it
            // missed the goodbye.
            self.writer = Box::new(std::io::sink());
            let _ = child.wait();
        }
    }
}

/// Answer wire requests with a local refiner until the client says goodbye
/// or closes the stream.
pub fn serve(reader: &mut impl Read, writer: &mut impl Write, refiner: &mut Refiner) -> Result<()> {
    loop {
        let msg = match wire::read_client_message(reader) {
            Ok(Some(msg)) => msg,
            Ok(None) => return Ok(()),
            Err(e) => {
                let _ = wire::write_error(writer, &e.to_string());
                return Err(e);
            }
        };
        match msg {
            ClientMessage::Refine { image, mask } => {
                match refiner.refine(&RefinerRequest::new(&image, mask.as_ref(), 0)) {
                    Ok(scores) => wire::write_scores(writer, &scores)?,
                    Err(e) => wire::write_error(writer, &e.to_string())?,
                }
            }
            ClientMessage::FineTune(samples) => match refiner.fine_tune(&samples) {
                Ok(()) => wire::write_ack(writer)?,
                Err(e) => wire::write_error(writer, &e.to_string())?,
            },
            ClientMessage::Bye => return Ok(()),
        }
    }
}
