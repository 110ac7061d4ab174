pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod eval;
pub mod heads;
pub mod numerics;
pub mod pretrain;
pub mod seeding;
