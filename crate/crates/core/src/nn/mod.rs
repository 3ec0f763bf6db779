//! Network layers and the full model.

pub mod attention;
pub mod feature;
pub mod fusion;
pub mod layers;
pub mod model;
pub mod ssm;
pub mod tmamba;

pub use feature::{FeatureMap, Provenance};
pub use layers::Ctx;
pub use model::{ModelConfig, TmambaModel};
