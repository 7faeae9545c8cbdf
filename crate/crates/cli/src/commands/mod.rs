pub mod correct_gt;
pub mod evaluate;
pub mod predict;
pub mod prepare;
pub mod train;
