#![allow(dead_code)]

pub mod attention_oracle;
pub mod composite_grads;
pub mod sampling_checks;
