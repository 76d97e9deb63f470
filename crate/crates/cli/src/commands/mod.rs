pub mod evaluate;
pub mod predict;
pub mod preprocess;
pub mod split;
pub mod train;
