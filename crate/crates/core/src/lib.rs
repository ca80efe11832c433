//! Budget-aware adapters for multi-domain ConvNets.
//!
//! A frozen backbone is shared by every domain. Each domain adds a binary
//! switch per conv input channel, its own batch norms, and a classifier head.
//! Switches are trained through a straight-through threshold under a
//! Lagrangian budget on the fraction of active channels. The crate also covers
//! exact FLOP/parameter/memory accounting and a 1-bit adapter file format.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the common choices.

pub mod arch;
pub mod budget;
pub mod complexity;
pub mod error;
pub mod model;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod store;
pub mod switch;
pub mod tape;
pub mod tensor;
pub mod train;

pub use arch::{Architecture, ResNetConfig};
pub use budget::{budget_penalty, lambda_step, Budget, BudgetSpec, ConstraintMode};
pub use error::{Error, Result, StoreError};
pub use model::{adapter_forward, Backbone, BnParams, ComposedModel, DomainAdapter, Head};
pub use ops::Mode;
pub use scalar::Scalar;
pub use switch::{binarize, SwitchVector};
pub use tape::{NodeId, Tape};
pub use tensor::{Kernel, Shape4, Tensor};
pub use train::{Dataset, TrainConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Kernel32 = Kernel<f32>;
pub type Kernel64 = Kernel<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Backbone32 = Backbone<f32>;
pub type Backbone64 = Backbone<f64>;
pub type DomainAdapter32 = DomainAdapter<f32>;
pub type DomainAdapter64 = DomainAdapter<f64>;
