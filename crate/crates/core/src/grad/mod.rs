//! Dense reverse-mode gradients, AdamW, and EMA shadow parameters.

mod check;
mod ema;
mod optim;
mod params;
mod tape;

pub use check::{bind_params, grad_check};
pub use ema::{ema_update, EmaState};
pub use optim::{adamw_step, AdamWConfig, OptimState};
pub use params::{Param, ParamSet, ParamTag};
pub use tape::{sigmoid, Gradients, Tape, Var};
