#![allow(dead_code)]

pub mod chain;
pub mod grad;
pub mod shield_oracle;
