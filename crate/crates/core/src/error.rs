use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot open {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed delimited input: {0}")]
    Csv(#[from] csv::Error),
    #[error("column {0:?} not found in header")]
    MissingColumn(String),
    #[error("non-numeric value at row {row}, column {column}")]
    NonNumeric { row: usize, column: String },
    #[error("missing value at row {row}, column {column}")]
    MissingValue { row: usize, column: String },
    #[error("unknown cohort value {value:?} at row {row}")]
    UnknownCohort { row: usize, value: String },
    #[error("cohort {0} has no rows")]
    EmptyCohort(u8),
    #[error("matrix shape mismatch: {0}")]
    Shape(String),
    #[error("no sample identifiers to group by")]
    MissingSampleId,
    #[error("too few points: {points} rows cannot fill {leaves} leaves")]
    TooFewPoints { points: usize, leaves: usize },
    #[error("invalid partition spec: {0}")]
    InvalidSpec(String),
    #[error("cannot split cell: dimension {dim} is constant within it")]
    ConstantDimension { dim: usize },
    #[error("row {row} lies outside every leaf region")]
    Unassigned { row: usize },
    #[error("malformed leaf table: {0}")]
    LeafTable(String),
    #[error("probability {0} is outside (0, 1)")]
    InvalidProbability(f64),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("conditioning event has probability zero (b-hat = -1)")]
    EmptyConditioning,
    #[error("layer {layer} has {nodes} node(s); at least 2 are needed")]
    TooFewNodes { layer: usize, nodes: usize },
    #[error("degenerate cohorts: N1 = {n1}, N2 = {n2}")]
    DegenerateCohorts { n1: u64, n2: u64 },
    #[error("invalid simulation setting: {0}")]
    InvalidSetting(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
