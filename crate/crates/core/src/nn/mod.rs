//! Layers the predictor is assembled from.

mod layers;
mod params;

pub use layers::{
    positional_encode, sinusoid_table, BlockStack, LayerNorm, Linear, MultiHeadAttention,
    TransformerBlock, LAYER_NORM_EPS,
};
pub use params::{Ctx, Dropout, Init, ParamId, ParamStore};
