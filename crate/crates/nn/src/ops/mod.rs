pub mod attention;
pub mod conv;
pub mod norm;

pub use conv::ConvGeom;
pub use norm::NORM_EPS;
