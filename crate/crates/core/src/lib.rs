pub mod cli;
pub mod docgen;
pub mod embedstore;
pub mod mathcore;
pub mod reviewsvc;
pub mod scanner;
pub mod tuner;
