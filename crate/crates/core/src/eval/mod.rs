//! Text quality, style adaptation and writer-style evaluation.

pub mod classifier;
pub mod metrics;
pub mod protocol;
pub mod recognizer;

pub use classifier::{ClassifierConfig, StyleClassifier};
pub use metrics::{cer, edit_distance, CerReport, StyleReport};
pub use protocol::{ProtocolKind, ProtocolReport, ReportRow};
pub use recognizer::Recognizer;
