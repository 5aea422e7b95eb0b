pub mod bidding;
pub mod der;
pub mod error;
pub mod clearing;
pub mod rng;
pub mod stability;
pub mod simulator;
