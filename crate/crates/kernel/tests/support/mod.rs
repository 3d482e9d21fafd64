#![allow(dead_code)]

pub mod primitive_grads;
