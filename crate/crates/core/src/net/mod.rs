//! Neural operator blocks: a from-scratch MLP, the random function family
//! used for training and testing, block files, and the training loop.

pub mod block;
pub mod family;
pub mod mlp;
pub mod train;

pub use block::{apply_block, measure_lfstar, OperatorBlock};
pub use family::{FamilyParams, FunctionFamily};
pub use mlp::{grad_check, Activation, Mlp};
pub use train::{train_block, TrainingConfig};
