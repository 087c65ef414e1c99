//! Checks shared by the test targets.
#![allow(dead_code)]

pub mod grad;
pub mod oracles;
