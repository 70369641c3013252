//! Low-rank adapters, shared hypernetworks that regenerate them, and the
//! training loop that ties both together, on a small reverse-mode autodiff core.

pub mod adapters;
pub mod checkpoint;
pub mod gradcheck;
pub mod hypernet;
pub mod init;
pub mod rank_allocator;
pub mod tensor;
pub mod trainer;

pub use tensor::Tensor;
