pub mod error;
pub mod image;
pub mod kv;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod stage1;
pub mod tensor;
pub mod train;
pub mod vocab;
pub mod world;

pub use error::{AbortReason, Error, Result};
pub use image::Image;
