//! Numerical harmonic analysis on a step-two nilpotent group built from three
//! Heisenberg factors.
//!
//! The group `N = C^N x R^2` carries a twisted multiplication in which the
//! third complex block feeds both central coordinates, so singular integrals
//! on it behave like tri-parameter objects even though the center is only
//! two-dimensional.  Everything here works through the lifting
//! `Ntilde = H_1 x H_2 x H_3 -> N`, `(z,u) -> (z, u1+u3, u2+u3)`:
//!
//! * exact group algebra for the factors, the base group, and the lift
//!   ([`group`]);
//! * sampled fields, fiber push-forwards, convolutions (full and along
//!   subgroups) ([`field`]);
//! * closed-form Cauchy-Szego kernels and the numerical certification that
//!   the push-forward of the product kernel is the binomial-sum kernel on
//!   the base group ([`szego`]);
//! * tri-parameter kernel audits: size estimates, cancellation against
//!   normalized bump functions, regularization, decay bounds
//!   ([`kernelcheck`]);
//! * tube geometry and tube maximal functions ([`tube`]);
//! * the self-affine tiling of a Heisenberg group and the shard/tent
//!   partitions built from it ([`tile`], [`shard`]);
//! * Littlewood-Paley square functions and the discretized Calderon
//!   reproducing formula ([`lp`], [`wavelet`]);
//! * the atomic decomposition pipeline over tents ([`atoms`]).
//!
//! Monte-Carlo certifications are deterministic given a seed; reports embed
//! the configuration they were produced with.

pub mod atoms;
pub mod error;
pub mod field;
pub mod geometry;
pub mod group;
pub mod kernelcheck;
pub mod lp;
pub mod quad;
pub mod report;
pub mod shard;
pub mod suites;
pub mod szego;
pub mod tile;
pub mod tube;
pub mod util;
pub mod wavelet;

pub use error::{Error, Result};
pub use group::{Factor, GroupDims, HPoint, PointLift, PointN};
