pub mod attention;
pub mod bench;
pub mod diffcore;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod tpgmm;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/frames.md")]
    mod frames {}
    #[doc = include_str!("../../../book/src/flows.md")]
    mod flows {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/tpgmm.md")]
    mod tpgmm {}
    #[doc = include_str!("../../../book/src/benchmarks.md")]
    mod benchmarks {}
}
