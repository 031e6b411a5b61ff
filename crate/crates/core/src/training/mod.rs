//! Losses, gradients and the optimiser loop.

pub mod backward;
pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod special;

pub use backward::{backward, batch_loss_and_grad, loss_and_grad, GradientSet};
pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckEntry, GradcheckReport};
pub use loss::{
    bce_loss, evidential_loss, soft_dice_loss, total_loss, LabelField, LossBreakdown,
};
pub use optim::{curve_csv, train, train_from, train_pairs, LossMode, TrainConfig, TrainMode, TrainOutcome};
pub use special::{digamma, trigamma};
