#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod fixtures;
pub mod identification;
pub mod model;
pub mod numerics;
pub mod reproduction;
pub mod schema;
pub mod service;
pub mod simulation;
pub mod synthesis;
