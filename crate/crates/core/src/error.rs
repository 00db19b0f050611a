use std::io;

use thiserror::Error;

/// Everything that can go wrong inside the engine.
///
/// Variants are grouped into input errors (bad files, bad configuration,
/// unsupported models) and compute errors (misuse of a graph, numerically
/// degenerate data). [`Error::is_input_error`] draws that line for callers
/// that need to map errors to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op}: output extent is not integral ({detail})")]
    NonIntegralExtent { op: &'static str, detail: String },

    #[error("layer `{layer}`: {reason}")]
    Layer { layer: String, reason: String },

    #[error("layer `{layer}` breaks the shape chain: {reason}")]
    ShapeChain { layer: String, reason: String },

    #[error("model spec parse error: {0}")]
    Parse(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("orphan parameter `{0}` has no matching layer")]
    OrphanParameter(String),

    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("weight file: {0}")]
    WeightFormat(String),

    #[error("image: {0}")]
    ImageFormat(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("NotCamCompatible: {0}")]
    NotCamCompatible(String),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("backward called before forward")]
    NotForwarded,

    #[error("node {target} is not an ancestor of seed node {seed}")]
    NotAncestor { target: usize, seed: usize },

    #[error("seed index {index} out of range for node output of {len} elements")]
    SeedOutOfRange { index: usize, len: usize },

    #[error("DegenerateRanks: rank correlation undefined for a constant input")]
    DegenerateRanks,

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short category name, stable for use in CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::InvalidShape { .. } => "InvalidShape",
            Error::NonIntegralExtent { .. } => "NonIntegralExtent",
            Error::Layer { .. } => "Layer",
            Error::ShapeChain { .. } => "ShapeChain",
            Error::Parse(_) => "Parse",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::MissingParameter(_) => "MissingParameter",
            Error::OrphanParameter(_) => "OrphanParameter",
            Error::ParameterShape { .. } => "ParameterShape",
            Error::WeightFormat(_) => "WeightFormat",
            Error::ImageFormat(_) => "ImageFormat",
            Error::UnknownLayer(_) => "UnknownLayer",
            Error::ClassOutOfRange { .. } => "ClassOutOfRange",
            Error::NotCamCompatible(_) => "NotCamCompatible",
            Error::Geometry(_) => "Geometry",
            Error::NotForwarded => "NotForwarded",
            Error::NotAncestor { .. } => "NotAncestor",
            Error::SeedOutOfRange { .. } => "SeedOutOfRange",
            Error::DegenerateRanks => "DegenerateRanks",
            Error::Io(_) => "Io",
        }
    }

    /// True for errors caused by what the caller supplied (files, flags,
    /// model choice) rather than by the computation itself.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::ShapeChain { .. }
                | Error::Parse(_)
                | Error::InvalidSpec(_)
                | Error::MissingParameter(_)
                | Error::OrphanParameter(_)
                | Error::ParameterShape { .. }
                | Error::WeightFormat(_)
                | Error::ImageFormat(_)
                | Error::UnknownLayer(_)
                | Error::ClassOutOfRange { .. }
                | Error::NotCamCompatible(_)
                | Error::Geometry(_)
                | Error::Io(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
