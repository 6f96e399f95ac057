//! Desk-scale multi-modal (RGB + thermal-infrared) object tracking:
//! a discriminative-filter tracker with pixel-, feature- and response-level
//! fusion, a synthetic paired-data generator, end-to-end training, and the
//! two standard benchmark protocols (re-initialization with EAO, one-pass
//! evaluation with precision/success curves).

pub mod autodiff;
pub mod backbone;
pub mod data_model;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod iou_net;
pub mod checkpoint;
pub mod model;
pub mod tracker;
pub mod trainer;
pub mod model_predictor;
pub mod synth_data;

pub use error::{Error, Result};
