//! Deep Nitsche method: a residual network trained on Nitsche's energy for
//! second-order elliptic problems with mixed boundary conditions.

pub mod autodiff;
pub mod checks;
pub mod cli;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod optimizer;
pub mod problems;
pub mod quadrature;
pub mod sampling;
