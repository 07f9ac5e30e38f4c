//! Probabilistic Kolmogorov-Arnold (P-KAN) and MLP (P-MLP) forecasters with
//! Gaussian and Student-t likelihood heads, plus evaluation metrics and
//! quantile-driven resource allocation.

pub mod autodiff;
pub mod special;
pub mod spline;
pub mod likelihood;
pub mod metrics;
pub mod data;
pub mod nets;
pub mod training;
pub mod allocation;
pub mod plot;
pub mod pipeline;
pub mod cli;
