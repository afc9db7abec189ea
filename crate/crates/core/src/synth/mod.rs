//! Synthetic full-order data for verification.

mod burgers;
mod oracle;
mod quadratic;

pub use burgers::{burgers_snapshots, gen_burgers, BurgersIc, BurgersSpec};
pub use oracle::{jacobi_svd, oracle_serial_pod, SerialPod, Svd};
pub use quadratic::{gen_subspace_quadratic, quadratic_truth, QuadraticSpec, SyntheticTruth};
