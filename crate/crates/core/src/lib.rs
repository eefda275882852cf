//! SGD and its continuous-time SDE proxies: SME-1, SME-2, SPF and HA-SME.

pub mod linalg;
pub mod coefficients;
pub mod escape;
pub mod problems;
pub mod proxies;
pub mod quadratic_analytics;
pub mod simulate;
