#![allow(dead_code)]

pub mod census;
pub mod head;
pub mod oracle;
pub mod witness;
