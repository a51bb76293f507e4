//! Small feedforward classifiers built from the affine layers in
//! [`crate::layers`] with ReLU activations, trained by SGD with weight decay
//! and optional spectral clipping after every step.

mod adversarial;
mod model;
mod train;

pub use adversarial::{adversarial_train_step, AdvTrainConfig};
pub use model::{
    cross_entropy, softmax, Activation, ForwardPass, Gradients, LayerDesc, LayerSpec, Model,
    ModelSpec,
};
pub(crate) use train::MODEL_STREAM;
pub use train::{
    batch_loss_and_grad, clip_model, epoch_batches, loss_lipschitz_bound, sgd_step, train_model,
    Sgd, TrainConfig, TrainHistory,
};
