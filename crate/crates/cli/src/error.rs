use std::fmt;

use thiserror::Error;

/// Pipeline stage an error is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    U1,
    U2,
    U3,
    Baseline,
    Copula,
    Oracle,
    Scoring,
    Diagnostics,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Data => "data",
            Stage::U1 => "U1",
            Stage::U2 => "U2",
            Stage::U3 => "U3",
            Stage::Baseline => "baseline",
            Stage::Copula => "copula",
            Stage::Oracle => "oracle",
            Stage::Scoring => "scoring",
            Stage::Diagnostics => "diagnostics",
            Stage::Output => "output",
        })
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: cfdist::Error,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{failed} of {total} benchmark replications failed")]
    Partial { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Stage { source: cfdist::Error::Config(_) | cfdist::Error::Role(_), .. } => 1,
            CliError::Stage { .. } | CliError::Io(_) => 2,
            CliError::Partial { failed, total } if failed == total => 2,
            CliError::Partial { .. } => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Attaches a stage to a library result.
pub trait AtStage<T> {
    fn at(self, stage: Stage) -> CliResult<T>;
}

impl<T> AtStage<T> for cfdist::Result<T> {
    fn at(self, stage: Stage) -> CliResult<T> {
        self.map_err(|source| CliError::Stage { stage, source })
    }
}
