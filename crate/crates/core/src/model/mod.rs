//! Learned models: the shared ViT image encoder, the single-image Stage-1
//! classifiers and the multimodal sequence classifier.

mod check;
mod config;
mod muisc;
mod vit;

pub use check::grad_check_report;
pub use config::{MuiscConfig, DESK_INIT_STD};
pub use muisc::{total_loss, DecoderInput, ForwardOutput, LossParts, Muisc, Prediction, SequenceSample};
pub use vit::{ClassifierConfig, ImageClassifier, VitConfig, VitWeights};
