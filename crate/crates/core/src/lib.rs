pub mod adversarial;
pub mod cli;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod io;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use discriminator::{ChannelHead, Classifier, ClassifierConfig};
pub use error::{Error, Result};
pub use generator::{Generator, GeneratorConfig};
pub use tensor::Tensor;
