pub(crate) mod attention;
pub(crate) mod basic;
pub(crate) mod conv;
pub(crate) mod nn;
