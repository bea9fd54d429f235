//! Missingness masks: initial corruption (MCAR / MAR / MNAR), batch-level
//! surrogate masking during training, and model-input preprocessing.

mod batch;
mod mask;
mod mechanisms;

pub use batch::{preprocess_batch, MiniBatch};
pub use mask::{MaskMatrix, Mechanism};
pub use mechanisms::{
    calibrate_intercept, corrupt, corrupt_mar, corrupt_mar_detailed, corrupt_mcar, corrupt_mnar,
    surrogate_mask, MarScores, MAR_OBSERVED_SHARE,
};
