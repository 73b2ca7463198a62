//! Multiple contrast tests for graded severity (ordinal) dose-response data.
//!
//! The central method is a permutation max(max) test over cut-point
//! binarizations of the severity score ([`perm`]). Parametric and rank-based
//! comparators live in [`fit`], [`simult`], [`releff`] and [`trend`];
//! [`sim`] estimates error rates by simulation and [`analysis`] ties the
//! pieces into report-producing pipelines.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use serde::{Deserialize, Serialize};

pub mod analysis;
pub mod contrasts;
pub mod data;
pub mod error;
pub mod fit;
pub mod mvn;
pub mod perm;
pub mod releff;
pub mod sim;
pub mod simult;
pub mod trend;

pub use error::{Error, Result};

/// Direction of the alternative hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    #[default]
    Greater,
    Less,
    TwoSided,
}

impl Alternative {
    /// Maps a statistic so that large values are evidence against the null.
    #[inline]
    pub fn orient(self, z: f64) -> f64 {
        match self {
            Alternative::Greater => z,
            Alternative::Less => -z,
            Alternative::TwoSided => z.abs(),
        }
    }
}

impl std::str::FromStr for Alternative {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greater" => Ok(Alternative::Greater),
            "less" => Ok(Alternative::Less),
            "two-sided" | "two.sided" => Ok(Alternative::TwoSided),
            other => Err(Error::Invalid(format!("unknown alternative `{other}`"))),
        }
    }
}
