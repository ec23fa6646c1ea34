use std::path::PathBuf;

use crate::{FrameId, InstanceId, TrackId};

/// Crate-wide error type. Every fallible path reports a typed variant; no
/// stage is allowed to panic on malformed input.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("pixel ({u:.3}, {v:.3}) outside {width}x{height} image")]
    PixelOutOfBounds { u: f64, v: f64, width: u32, height: u32 },

    #[error("depth {0} is not a positive finite value")]
    InvalidDepth(f64),

    #[error("invalid camera model: {0}")]
    InvalidCamera(String),

    #[error("invalid similarity transform: {0}")]
    InvalidTransform(String),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("{context}: need at least {need} points, got {got}")]
    TooFewPoints { context: &'static str, got: usize, need: usize },

    #[error("point sets differ in length ({source_len} vs {target_len})")]
    PointCountMismatch { source_len: usize, target_len: usize },

    #[error("degenerate point configuration: {0}")]
    DegenerateGeometry(String),

    #[error("{0}: point cloud is empty")]
    EmptyCloud(&'static str),

    #[error("density undefined for cloud with {points} point(s)")]
    DensityUndefined { points: usize },

    #[error("cloud is missing per-point normals")]
    MissingNormals,

    #[error("raster size mismatch: expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    RasterSizeMismatch { expected_w: u32, expected_h: u32, got_w: u32, got_h: u32 },

    #[error("track {0} has no observations")]
    EmptyTrack(TrackId),

    #[error("frame {frame}: mask contains no valid-depth pixels")]
    EmptySurface { frame: FrameId },

    #[error("instance {0}: every observation lifts to an empty surface")]
    NoViableView(InstanceId),

    #[error("instance {instance}: {detail}")]
    AssetRejected { instance: InstanceId, detail: String },

    #[error("instance {instance}: alignment failed: {detail}")]
    AlignmentFailed { instance: InstanceId, detail: String },

    #[error("support relations form a cycle: {}", format_cycle(.0))]
    SupportCycle(Vec<InstanceId>),

    #[error("relation references unknown {kind} '{name}'")]
    UnknownReference { kind: &'static str, name: String },

    #[error("ground-truth category set is empty; recall undefined")]
    EmptyGroundTruth,

    #[error("{provider} provider failed: {detail}")]
    Provider { provider: &'static str, detail: String },

    #[error("cannot satisfy layout: {0}")]
    UnsatisfiableLayout(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{file}: {detail}")]
    FileFormat { file: PathBuf, detail: String },

    #[error("{file} line {line}: {detail}")]
    Parse { file: PathBuf, line: usize, detail: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Wraps an io error with the path (and operation) it came from.
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub fn file_format(file: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::FileFormat { file: file.into(), detail: detail.into() }
    }

    pub fn parse(file: impl Into<PathBuf>, line: usize, detail: impl Into<String>) -> Self {
        Error::Parse { file: file.into(), line, detail: detail.into() }
    }
}

fn format_cycle(ids: &[InstanceId]) -> String {
    let mut s = String::new();
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            s.push_str(" -> ");
        }
        s.push_str(&id.to_string());
    }
    s
}
