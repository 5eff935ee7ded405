//! Simulated robot-assisted tactile-imaging workcell.
//!
//! The crate covers everything up to a labelled image corpus:
//!
//! - [`geometry`]: rigid transforms and the R/B/C/T/H frame graph.
//! - [`camera`]: pinhole + Brown distortion, planar calibration, target pose.
//! - [`handeye`]: separable `AX = XB` registration.
//! - [`phantom`]: procedural Borrmann type I–IV tumor phantoms.
//! - [`tactile`]: gel contact and photometric rendering.
//! - [`collection`]: force-limited view collection, manifest and split.
//! - [`augment`]: resize and stochastic augmentation.
//! - [`workcell`]: synthetic calibration sessions with known ground truth.

pub mod augment;
pub mod camera;
pub mod collection;
pub mod geometry;
pub mod handeye;
pub mod image;
pub mod phantom;
pub mod seed;
pub mod tactile;
pub mod workcell;
