//! End-to-end 3D MRI binary classification pipeline: DICOM/NIfTI ingestion,
//! volumetric preprocessing, patient-disjoint splitting with minority
//! oversampling, a six-architecture 3D model zoo centered on a hybrid
//! DenseNet121-ViT, training with best-checkpoint selection, evaluation and
//! repeated-measures model comparison statistics.

pub mod datamodule;
pub mod dicom;
pub mod error;
pub mod evaluation;
pub mod manifest;
pub mod models;
pub mod nifti;
pub mod preprocess;
pub mod stats;
pub mod synthdata;
pub mod training;

pub use tch::Device;
pub mod volume;

pub use error::{Error, Result};
pub use evaluation::{ConfusionMatrix, MetricReport, RocCurve};
pub use manifest::{CaseRecord, Manifest, Provenance, Split};
pub use stats::RunMatrix;
pub use volume::{Axis, AxisDir, Orientation, Volume};
