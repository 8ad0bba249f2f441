//! Hyperbolic representation learning on the Poincaré ball.
//!
//! Ball arithmetic ([`ball`]), a small reverse-mode tape ([`tape`]), the
//! hyperbolic classifier ([`model`]), differentiable hierarchical clustering
//! ([`cluster`]), Riemannian training ([`optim`]), spike-train and synthetic
//! datasets ([`data`]) and evaluation protocols ([`eval`]).

pub mod ball;
pub mod cluster;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod tape;
