//! Recursive skeletonization for 2D boundary integral equations on multiply-connected
//! domains, with in-place updating of the factorization after local geometric edits.

pub mod dense;
pub mod geometry;
pub mod kernels;
pub mod skel;
pub mod tree;
