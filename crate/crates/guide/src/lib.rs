//! Compiles the book's code listings as doctests so they stay in sync with
//! the library.

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}

    #[doc = include_str!("../../../book/src/flow.md")]
    mod flow {}

    #[doc = include_str!("../../../book/src/sde.md")]
    mod sde {}

    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}

    #[doc = include_str!("../../../book/src/physics.md")]
    mod physics {}

    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}

    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}

    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
