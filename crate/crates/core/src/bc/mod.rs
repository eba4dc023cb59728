//! Engineered behavioral characterizations.
//!
//! Each pipeline maps a final pattern to a feature vector which a fitted
//! [`BcProjection`] reduces to an 8-D descriptor normalized against a
//! reference population.

mod contour;
mod efd;
mod projection;
mod spectrum;
mod stats;

use serde::{Deserialize, Serialize};

pub use contour::{extract_contour, Contour, BINARIZE_THRESHOLD};
pub use efd::{efd_coefficients, elliptical_fourier_fv, standardize_efd, EfdCoefficients, HARMONICS};
pub use projection::{fit_projection, percentile, BcProjection, DESCRIPTOR_DIM};
pub use spectrum::{spectrum_fourier_fv, SPECTRUM_RINGS};
pub use stats::{lenia_statistics_fv, toroidal_centroid, ACTIVE_EPSILON};

use crate::error::Result;
use crate::grid::Grid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Spectrum,
    Elliptical,
    Statistics,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [FeatureKind::Spectrum, FeatureKind::Elliptical, FeatureKind::Statistics];

    pub fn dim(self) -> usize {
        match self {
            FeatureKind::Spectrum => 2 * SPECTRUM_RINGS,
            FeatureKind::Elliptical => 4 * HARMONICS,
            FeatureKind::Statistics => 17,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Spectrum => "spectrum",
            FeatureKind::Elliptical => "elliptical",
            FeatureKind::Statistics => "statistics",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            FeatureKind::Spectrum => 0,
            FeatureKind::Elliptical => 1,
            FeatureKind::Statistics => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub kind: FeatureKind,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(kind: FeatureKind, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), kind.dim());
        Self { kind, values }
    }
}

pub fn feature_vector(kind: FeatureKind, o: &Grid) -> Result<FeatureVector> {
    match kind {
        FeatureKind::Spectrum => spectrum_fourier_fv(o),
        FeatureKind::Elliptical => Ok(elliptical_fourier_fv(o)),
        FeatureKind::Statistics => Ok(lenia_statistics_fv(o)),
    }
}

/// A feature pipeline together with its fitted projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticBc {
    pub projection: BcProjection,
}

impl AnalyticBc {
    pub fn kind(&self) -> FeatureKind {
        self.projection.kind
    }

    pub fn describe(&self, o: &Grid) -> Result<Vec<f64>> {
        let fv = feature_vector(self.kind(), o)?;
        self.projection.project(&fv)
    }
}
