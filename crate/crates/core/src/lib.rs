//! Event-guided multi-bracket HDR imaging.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod events;
pub mod gradsuite;
pub mod hdr;
pub mod image;
pub mod io;
pub mod metrics;
pub mod model;
pub mod scene;
pub mod sim;
pub mod training;

pub use error::{EhdrError, Result};
pub use image::{HdrImage, LdrImage};
