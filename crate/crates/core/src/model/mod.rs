//! Slot Attention with an attention-refining kernel on the logits and
//! interleaved point prediction/encoding, plus the baselines it is compared
//! against.

mod ark;
mod attention;
mod baseline;
mod checkpoint;
mod config;
mod decoder;
mod encoder;
mod ippe;
mod params;
mod slash;

pub use ark::{ark_apply, delta_kernel, effective_kernel_var, gaussian_kernel, Ark};
pub use attention::{attention_logits, attention_normalize, slot_update, AttentionField, SlotAttention, ATTN_EPS};
pub use baseline::{plain_slot_attention_forward, plain_slot_attention_infer};
pub use checkpoint::{checkpoint_dtype, Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{IppeSchedule, KernelKind, KernelVariant, ModelConfig};
pub use decoder::{Decoder, DecoderOutput};
pub use encoder::{position_grid, Encoder, PositionEmbedding};
pub use ippe::{point_cost, route, Ippe, IppeStep};
pub use params::{Bound, Conv, Gru, LayerNorm, Linear, Mlp, ParamId, ParamStore};
pub use slash::{
    masks_from_attention, masks_from_mixture, ForwardInput, ForwardOutput, Iteration, IterationValues, Layers,
    MaskSource, Mode, Model, Prediction,
};
