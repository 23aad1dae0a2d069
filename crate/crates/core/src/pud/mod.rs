//! Prototype-guided uncertainty decoupling: text-conditioned salient features,
//! region scaling, a momentum prototype bank with cross-modal contrastive
//! alignment, multimodal fusion and the box regression head.

mod attention;
mod bank;
mod contrast;
mod head;

pub use attention::{
    augment, cross_attend, fuse_multimodal, pooled_text, region_scale, ScaleParam,
};
pub use bank::{assign_prototype, PrototypeBank, DEFAULT_BANK_MOMENTUM, DEFAULT_PROTOTYPES};
pub use contrast::{ptc_from_similarity, ptc_loss, DEFAULT_TEMPERATURE};
pub use head::{
    box_head, decode_box, pud_loss, BoxHeadParams, HeadOutput, HEAD_OUTPUTS, LOGIT_CAP,
};
