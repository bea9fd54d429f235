//! Dense matrices and the reverse-mode tape used to train the model.

mod tape;
mod tensor;

pub use tape::{
    pairwise_sq_dist, row_softmax, ColumnMoments, Gradients, NormStats, Tape, Var, NORM_EPS,
};
pub use tensor::Tensor;
