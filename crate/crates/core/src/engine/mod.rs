//! The incremental protocol: task streams, replay, losses and the learner.

pub mod buffer;
pub mod config;
pub mod data;
pub mod learner;
pub mod losses;
pub mod stream;

pub use buffer::{herding_select, ExemplarBuffer, ExemplarEntry};
pub use config::{KdVariant, Method, TrainConfig};
pub use data::ImageSet;
pub use learner::{DlcState, Inference, PoolItem, StageLog, Teacher};
pub use losses::{loss_aux, loss_ce, loss_kd_ce, loss_kd_kl, LossOutput};
pub use stream::{split_classes, split_stream, Task, TaskStream};
