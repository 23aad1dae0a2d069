//! Cross-modal re-identification: class-level distribution matching,
//! instance-level contrast, and norm-aware OIM with its lookup table and
//! circular queue.

mod align;
mod oim;

pub use align::{cfa_loss, infonce_loss, sdm_kl_loss, SimMatrix, Temperatures};
pub use oim::{
    cq_push, lut_update, nae_split, oim_loss, reid_loss, CircularQueue, LookupTable,
    DEFAULT_LUT_CAPACITY, DEFAULT_LUT_MOMENTUM, DEFAULT_OIM_TEMPERATURE, DEFAULT_QUEUE_CAPACITY,
};
