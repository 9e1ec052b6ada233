//! Order-aware 3D visual grounding at desk scale.

pub mod dataset;
pub mod eval;
pub mod losses;
pub mod model;
pub mod orderparse;
pub mod scene;
pub mod synthgen;
pub mod tensor;
pub mod trainer;
