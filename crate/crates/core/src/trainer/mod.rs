pub mod opt;

pub use opt::{adamw_step, ema_update, lr_at, AdamState, AdamWConfig, LrSchedule};
