//! Deterministic cooperative-perception simulator for vehicle/infrastructure
//! 3D object detection with attention-based infrastructure selection.

pub mod attention;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod netsim;
pub mod pillars;
pub mod rng;
pub mod rpn;
pub mod scenegen;
pub mod tensor;

pub use ndarray;
