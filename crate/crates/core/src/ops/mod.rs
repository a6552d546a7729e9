pub mod conv;
pub mod elementwise;
pub mod pad;
pub mod resize;
