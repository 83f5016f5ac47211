pub(crate) mod activation;
pub(crate) mod conv;
pub mod elementwise;
pub(crate) mod norm;
pub(crate) mod pool;
pub(crate) mod resample;
pub(crate) mod shape;
