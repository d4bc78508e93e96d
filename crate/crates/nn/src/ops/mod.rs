mod basic;
pub mod conv;
mod loss;
mod norm;
pub mod pool;
pub mod interp;
pub mod softmax;

pub use basic::concat_channels;
pub use conv::ConvGeometry;
