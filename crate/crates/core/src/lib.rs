//! SIM(3)-equivariant diffusion policy at desk scale.
//!
//! The crate is organized around the pipeline: [`geom`] provides the
//! similarity group and seeded RNG, [`autodiff`] a small reverse-mode tape
//! over a fixed operator set, [`vn`] the rotation-equivariant layer family,
//! [`encoder`] the SIM(3)-equivariant point-cloud encoder, [`policy`] the
//! conditional U-net noise predictor, [`diffusion`] the DDPM/DDIM samplers
//! and training objective, [`pusht`] a deterministic Push-T benchmark with a
//! scripted demonstrator, and [`harness`] the training/evaluation surface
//! used by the CLI.

pub mod autodiff;
pub mod diffusion;
pub mod encoder;
pub mod vn;
pub mod geom;
pub mod harness;
pub mod policy;
pub mod pusht;

pub use geom::{Mat3, PointCloud, Rng, Sim3, Vec3};
