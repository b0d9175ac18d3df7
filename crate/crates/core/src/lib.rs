//! Fast evaluation of `q = A d` for inverse observation-error covariance
//! matrices, using a box-tree fast multipole method whose far-field
//! interactions are compressed with truncated SVDs.
//!
//! * [`numkernel`]: dense matrices, symmetric eigen/SVD, Cholesky.
//! * [`boxtree`]: nested quadtree over observation locations.
//! * [`covmodel`]: correlation functions, `R = DCD`, reconditioning.
//! * [`svdfmm`]: plan construction and the fast apply.
//! * [`costmodel`]: analytic flop and communication costs.
//! * [`harness`]: grids, departure sampling and the experiment sweeps.

pub mod boxtree;
pub mod costmodel;
pub mod covmodel;
pub mod harness;
pub mod numkernel;
pub mod svdfmm;
