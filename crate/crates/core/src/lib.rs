//! Solver for the two-state synchronization mean-field game.
//!
//! A continuum of agents jumps between states 0 and 1 with thermal noise rate
//! `sigma2` plus a controlled increment, and pays `kappa` times the mass of the
//! opposite state. Equilibria reduce to the planar system in the control gap
//! `a = v(t,0) - v(t,1)` and the centred probability `q = 2p - 1`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod discounted;
pub mod dynamics;
pub mod ergodic;
pub mod error;
pub mod integrate;
pub mod io;
pub mod mfc;
pub mod model;
pub mod nplayer;
pub mod nstate;
pub mod value;

pub use error::{Error, Result};
pub use model::ModelParams;
pub use dynamics::PhasePoint;
