//! Time-distributed CNN feeding an LSTM, with hand-written gradients,
//! Adam training and a binary checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use checkpoint::{ModelCheckpoint, NamedTensor, TrainingMetadata, CHECKPOINT_MAGIC, FORMAT_VERSION};
pub use layers::{conv2d, dense, lstm_step, maxpool2, sigmoid, Activation, LstmParams};
pub use model::{clip_tensors, ConvBlock, InputShape, Model, ModelConfig};
pub use optim::{adam_step, bce_loss, AdamState, TrainConfig};
pub use tensor::{Scalar, Tensor};
pub use train::{classify, predict, sample_gradients, train, train_with_options, ClipAugmenter, TrainOptions, TrainHistory};
