pub mod bits;
pub mod cascade;
pub mod cli;
pub mod config;
pub mod keyrate;
pub mod privacy;
pub mod session;
pub mod sifting;
pub mod source;
