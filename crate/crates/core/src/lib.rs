#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod corpus;
pub mod growthchart;
pub mod labeling;
pub mod metrics;
pub mod phenotype;
pub mod pipeline;
pub mod report;
pub mod stepwise;
pub mod synth;
