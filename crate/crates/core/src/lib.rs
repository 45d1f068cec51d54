pub mod cli;
pub mod momeq;
pub mod netspec;
pub mod polyalg;
pub mod sdpbuild;
pub mod solver;
pub mod ssa;
