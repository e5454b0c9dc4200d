pub mod checkpoint;
pub mod config;
pub mod koopman;
pub mod layers;
pub mod net;

pub use config::{AblationFlags, ArchConfig};
pub use koopman::{init_koopman, koopman_step, project_spectral};
pub use net::{Forward, Net, NkmModel};
