//! Small convolutional embedding matcher with an additive-angular-margin head,
//! written with explicit forward and backward passes so input gradients are
//! available to the adversarial attack, plus forward-only decoder inference.
//!
//! Networks are generic over [`Real`]: production runs in `f32`, gradient
//! checks instantiate the same code in `f64`.

mod cnn;
mod decoder;
pub mod layers;
pub mod vfw;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

pub use cnn::{
    act_shape, arcface_logits, cosine_score, op_kind, softmax, train_cnn, ActivationCache,
    CnnGrads, CnnModel, ConvLayer, DenseLayer, Embedding, EpochLog, HeadOutput, LayerKind,
    TrainConfig, TrainedCnn, CLASS_DIM, EMBED_DIM, INPUT_HEIGHT, INPUT_WIDTH, NUM_OPS,
};
pub use decoder::{check_decoder_parity, DecoderNet, ParityFixture};
pub use vfw::{decode_weights, encode_weights, load_weights, save_weights, NetworkWeights};

pub trait Real: Float + FromPrimitive + NumAssign + Sum + Default + Debug + Send + Sync + 'static {}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn real<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("representable")
}
