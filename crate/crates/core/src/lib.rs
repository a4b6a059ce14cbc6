// `!(a > b)` checks below are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod base_agent;
pub mod geometry;
pub mod imitation;
pub mod motion_inference;
pub mod robot_model;
pub mod simulator;
pub mod service;
