//! Spatial calibration of wide-field diffuse LiDAR pixels against a
//! co-located RGB camera.
//!
//! A small retroreflective patch is scanned across the shared field of view
//! twice: once present, once removed. For every LiDAR pixel the
//! background-subtracted, depth-windowed histogram peak at each scan point is
//! placed at the patch's RGB position, giving a response map whose support is
//! the pixel's footprint and whose magnitudes are its relative sensitivity.
//!
//! Modules:
//! - [`config`]: sensor, scan grid and frame descriptions, snake ordering
//! - [`histogram`]: histogram cubes, patch response, window selection
//! - [`detect`]: Hough-based patch localisation
//! - [`response`]: map assembly, support masks and consistency metrics
//! - [`sim`]: forward-model simulator for synthetic datasets
//! - [`io`]: dataset, map, report and overlay files
//! - [`pipeline`]: end-to-end calibration

pub mod config;
pub mod detect;
pub mod error;
pub mod histogram;
pub mod io;
pub mod pipeline;
pub mod response;
pub mod sim;

pub use error::{Error, ErrorClass, Result};
