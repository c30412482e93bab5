pub mod checkpoint;
mod config;
pub mod flops;
mod forward;
mod params;
pub mod rope;

pub use config::{LoopVitConfig, Mode};
pub use forward::{Layout, LoopVit, StepOutput, TraceOptions};
pub use params::{param_count, param_shapes, Layer, LoopVitParams, ParamVars, Params, LAYER_FIELDS};
#[cfg(test)]
mod tests;
