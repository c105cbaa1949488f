//! Encoder, decoder, prediction heads, and the training loop.

mod hid;
mod mae;
mod params;
mod train;

pub mod heads;

pub use hid::{
    cross_attention, embed_neighbors, hid_forward, hid_layer, neighbor_global_context,
    validity_bias, HidHeadTrace, HidLayerTrace, HidOutput,
};
pub use mae::{
    build_mode_tokens, embed_tokens, global_context, mae_forward, mae_layer, GlobalContext,
    MaeHeadTrace, MaeOutput,
};
pub use params::{
    load_checkpoint, save_checkpoint, Checkpoint, FfnParams, HeadParams, HidHeadParams,
    HidLayerParams, HidParams, LayerNormParams, LinearParams, MaeHeadParams, MaeLayerParams,
    MaeParams, ModelParams,
};
pub use train::{assemble_loss, batch_loss, train_epochs, EpochLog, LossBreakdown, Trainer};
