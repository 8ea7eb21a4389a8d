//! Parameters, layers and optimizer shared by all model components.

pub mod blocks;
pub mod dit;
pub mod layers;
pub mod optim;
pub mod params;

pub use params::{Init, ParamStore, Scope};
