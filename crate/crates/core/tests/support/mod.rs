//! Independent oracles and random instance generators shared by the
//! integration tests and the acceptance suite.

#![allow(dead_code)]

pub mod fixtures;
pub mod gradcheck;
pub mod oracles;
