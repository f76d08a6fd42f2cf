//! Dense kernels with explicit backward passes.
//!
//! There is no autograd: each forward function returns what its backward
//! counterpart needs, and the model code composes them by hand. Every
//! backward pass is checked against central finite differences by
//! [`gradient_check`].

mod activation;
mod gradcheck;
mod linear;
mod params;
mod softmax;

pub use activation::{dropout, dropout_backward, relu, relu_backward};
pub use gradcheck::{
    gradient_check, gradient_check_with, relative_error, relative_error_floored, GradCheckConfig, GradCheckReport,
    RELATIVE_ERROR_FLOOR,
};
pub use linear::{LinearGrad, LinearLayer};
pub use params::{GradStore, NamedTensor, Parameters};
pub use softmax::{
    l2_normalize, l2_normalize_backward, softmax_columns, softmax_columns_backward, softmax_rows,
    softmax_rows_backward, L2_EPS,
};

use rand::RngCore;

/// Forward-pass mode. Training passes carry the RNG that draws dropout masks;
/// evaluation passes are deterministic and apply no dropout.
pub enum Pass<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Pass<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Pass::Train(_))
    }

    pub(crate) fn rng(&mut self) -> Option<&mut dyn RngCore> {
        match self {
            Pass::Eval => None,
            Pass::Train(rng) => Some(&mut **rng),
        }
    }
}
