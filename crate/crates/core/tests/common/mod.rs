#![allow(dead_code)]

pub mod numeric;
pub mod oracles;
