//! Dense numerics with reverse-mode differentiation.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::Adam;
pub use params::{read_checkpoint, write_checkpoint, ParamId, ParamStore};
pub use tape::{concat_cols, concat_rows, sum_all, Tape, Var};
pub use tensor::Tensor;
