//! Forward-mode dual numbers, a small time-conditioned MLP, and Adam.

mod dual;
mod net;
mod optim;

pub use dual::{Dual, Real};
pub use net::{input_row, Activation, Layer, NetParams};
pub use optim::OptState;
