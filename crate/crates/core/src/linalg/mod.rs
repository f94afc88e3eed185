//! Dense linear algebra sized for small Gram systems and moderate weights.

mod matrix;
mod rng;
mod solve;

pub use matrix::{format_f64, matmul, relative_frobenius_error, DenseMatrix};
pub use rng::{seeded_gaussian, SeededRng};
pub use solve::{
    cholesky, cholesky_solve, dense_inverse, push_through_solve, spd_solve, JITTER_MAX,
    JITTER_START,
};
