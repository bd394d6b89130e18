//! Federated split learning of a vision transformer with server-side block
//! sampling.

pub mod autodiff;
pub mod data;
pub mod harness;
pub mod models;
pub mod privacy;
pub mod protocol;
pub mod seed;
pub mod transport;
