//! Spiking neural network training engine: LIF neurons with adaptive
//! thresholds, threshold-driven surrogate-gradient widths and hand-written
//! backpropagation through time.

pub mod analysis;
pub mod blob;
pub mod bptt;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod neuron;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use bptt::{backward, BpttOptions, GradientBundle};
pub use data::{Dataset, SyntheticGaussianSpec};
pub use error::{Result, SnnError};
pub use layers::{LayerKind, LayerSpec};
pub use model::{cross_entropy_ls, forward_sequence, infer, output_readout, ForwardTrace, Mode, Network, NeuronConfig};
pub use neuron::{LifParams, SurrogateConfig, ThresholdMode, ThresholdState};
pub use optim::SgdState;
pub use rng::Rng;
pub use tensor::Tensor;
pub use train::{TrainOptions, TrainRun};
