//! Sub-footprint modelling and correction of full-waveform LiDAR intensity.

pub mod beam;
pub mod cli;
pub mod deconv;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod io;
pub mod radiometry;
pub mod scene;
pub mod unmix;

pub use error::{Error, Result};
