pub mod io;
pub mod metrics;
pub mod probe;
pub mod scene;
pub mod train;
pub mod verify;
