#![allow(dead_code)]

pub mod fixtures;
pub mod grad;
pub mod models;
pub mod oracles;
pub mod runs;
