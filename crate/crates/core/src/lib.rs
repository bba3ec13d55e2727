#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod exec;
pub mod kinematics;
pub mod pose;
pub mod workpiece;
pub mod perception;
pub mod task;
pub mod autonomy;
pub mod scenario;
pub mod session;
pub mod driver;
pub mod script;
