//! Gray-box fuzzing with gradient descent over Boolean-instruction values.

pub mod abi;
pub mod minivm;
pub mod fuzz;
pub mod generators;
pub mod strategy;
pub mod tree;
