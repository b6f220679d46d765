//! A minimal convolutional network with named activation taps.

mod checkpoint;
mod gradcheck;
mod network;
mod spec;
mod tensor;
mod train;

pub use checkpoint::{Checkpoint, TrainingMetadata};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use network::{argmax, sigmoid, softmax, ForwardOutput, Network, ReluBackward, Trace};
pub use spec::{NetworkSpec, ParamEntry, ParamKind, ParamLayout};
pub use tensor::Tensor3;
pub use train::{
    train_grader, train_network, Adam, Augmenter, LossKind, Targets, TrainConfig, TrainOutcome, WeightedSampler,
};
