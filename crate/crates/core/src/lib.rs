//! Architecture-personalized federated learning on a weight-sharing supernet.
//!
//! Clients jointly train one supernet with FedAvg while each keeps a private child
//! architecture, regularized towards the shared weights it overlaps, and narrows that
//! architecture edge by edge using validation-accuracy perturbation.

pub mod autograd;
pub mod data;
pub mod error;
pub mod federation;
pub mod manifest;
pub mod params;
pub mod report;
pub mod rng;
pub mod searcher;
pub mod space;
pub mod trainer;

pub use error::{Error, Result};
pub use params::{sgd_step, ParamStore};
