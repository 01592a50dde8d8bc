#![allow(dead_code)]

pub mod graph;
pub mod loss;
pub mod metric;
pub mod oracles;
