pub mod aggregate;
pub mod audit;
pub mod bitset;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod games;
pub mod model;
pub mod par;
pub mod shapley;
pub mod similarity;
pub mod subset;
#[doc(hidden)]
pub mod testing;
