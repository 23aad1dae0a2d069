//! Hand-derived gradients, finite-difference checking, adaptive loss
//! weighting and a toy full-batch trainer.

mod check;
mod fd;
mod grad;
mod trainer;
mod weights;

pub use check::{
    check_box_loss, check_infonce, check_mue, check_oim, check_ptc, check_sdm_kl, gradcheck,
    near_box_tie, CheckReport, GRADCHECK_TOLERANCE, TIE_MARGIN,
};
pub use fd::{central_difference, fd_check, DEFAULT_STEP};
pub use grad::{
    box_loss_grad, cosine_backward, decode_box_backward, infonce_grad, infonce_sim_grad, mue_grad,
    mue_grad_with_matching, oim_grad, ptc_grad, ptc_sim_grad, sdm_kl_grad, sdm_kl_sim_grad,
    BoxGrad, MueGrad, PairGrad,
};
pub use trainer::{
    train_toy, write_curves, TrainConfig, TrainRecord, TrainRun, TrainState, Trainer, MU_FLOOR,
};
pub use weights::{
    total_loss, total_loss_with, LossWeights, WeightMode, DEFAULT_EMA_DECAY, DEFAULT_WARMUP,
    WEIGHT_EPS,
};
