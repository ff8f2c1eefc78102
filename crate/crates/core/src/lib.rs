//! Finite expression method: searching the space of small operator trees
//! for closed-form PDE solutions.

pub mod controller;
pub mod eigen;
pub mod error;
pub mod expr;
pub mod optim;
pub mod points;
pub mod pde;
pub mod rng;
pub mod sampling;
pub mod search;
pub mod symbolic;

pub use error::{FexError, Result};
