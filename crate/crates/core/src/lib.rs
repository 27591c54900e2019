//! Building blocks for desk-scale 3D CT radiology report generation
//! experiments: volume preprocessing, report curation and splitting, 3D token
//! geometry, a micro 3D vision transformer with analytic gradients, and the
//! NLP report metrics.

pub mod volume;
pub mod curation;
pub mod geometry;
pub mod vit;
pub mod metrics;
