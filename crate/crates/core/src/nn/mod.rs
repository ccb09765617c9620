//! Layer blocks and parameter handling.

pub mod layers;
pub mod params;

pub use layers::{
    depthwise_separable_conv, dropout, sconv_block, unet_conv_block, unet_down, unet_up, Activation, Conv, Dense,
    Layer, ResidualBlock, SepConv,
};
pub use params::{BoundParams, Init, NetworkParams, ParamBuilder, ParamDecl, ParamId, ParamSpec};
