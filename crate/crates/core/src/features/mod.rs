//! Parameterized feature extractors `F(y, θ)`.
//!
//! Two architectures are provided: a plain tanh multilayer perceptron and a
//! neural ODE whose vector field is the antisymmetric layer
//! `tanh((K − Kᵀ − γI) u + b)`, integrated with classical RK4 on a uniform
//! grid. Both expose forward evaluation, Jacobian-vector products and their
//! transposes, with the intermediate states kept in a [`Tape`].

mod arch;
mod checkpoint;
mod network;
mod ode;

pub use arch::{prolongate, ArchSpec, Block, Layout, WeightVector};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use network::{Network, PassCounter, Tape};
pub use ode::{antisym_layer, rk4_step, RK4_NODES, RK4_WEIGHTS};
