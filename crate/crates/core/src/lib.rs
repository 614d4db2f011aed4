pub mod bonus;
pub mod config;
pub mod divergence;
pub mod error;
pub mod math;
pub mod objective;
pub mod optim;
pub mod tabular;
pub mod trainer;
pub mod verify;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/divergences.md")]
    pub mod divergences {}
    #[doc = include_str!("../../../book/src/bonuses.md")]
    pub mod bonuses {}
    #[doc = include_str!("../../../book/src/objective.md")]
    pub mod objective {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/verification.md")]
    pub mod verification {}
}
