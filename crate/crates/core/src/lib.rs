//! Recommendation from review text: paragraph-vector embeddings of users and
//! items act as priors for a probabilistic matrix factorization.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod factorization;
pub mod matrix;
pub mod pvdm;
pub mod synth;
pub mod textproc;

pub use error::{Error, Result};
pub use matrix::Matrix;
