//! Neural building blocks: patch embedding, SecMamba and self-attention
//! experts, the convolutional stem, token downsampling and the MLP head.

mod attention;
mod conv;
mod embed;
mod head;
mod secmamba;

pub use attention::{AttentionBlock, AttentionTrace};
pub use conv::{conv2d, im2col_index, ConvStem, Downsample};
pub use embed::PatchEmbed;
pub use head::MlpHead;
pub use secmamba::{SecMambaBlock, SecMambaTrace};

pub(crate) const LN_EPS: f64 = 1e-5;
