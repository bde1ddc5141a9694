//! Variational Bayesian logistic regression and sparse Gaussian-process
//! classification driven by a truncated-series bound on the Gaussian
//! expectation of the softplus function.

pub mod bound;
pub mod dataset;
pub mod datagen;
pub mod experiment;
pub mod expect;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod quadrature;
pub mod seeding;
pub mod specfun;
pub mod vbgp;
pub mod vblogit;
