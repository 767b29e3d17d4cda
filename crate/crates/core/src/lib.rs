#![no_std]

extern crate alloc;

pub mod boed;
pub mod constitutive;
pub mod error;
pub mod icc;
pub mod inference;
pub mod loadpath;
pub mod optimize;
pub mod stats;
pub mod surrogate;

pub use error::{Error, Result};
