//! Independent oracles shared by the focused test targets and the
//! acceptance suite.
#![allow(dead_code)]

pub mod gradient;
pub mod importance;
pub mod lora;
