pub mod app;
pub mod error;
pub mod geom;
pub mod graph;
pub mod preprocess;
pub mod regmodel;
pub mod simworld;
pub mod solver;
pub mod submap;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/registration.md")]
    mod registration {}
    #[doc = include_str!("../../../book/src/solver.md")]
    mod solver {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
