pub mod lexer;
pub mod corpus;
pub mod tensor;
pub mod model;
pub mod train;
pub mod eval;
pub mod dam;
pub mod config;
