pub mod collectives;
pub mod compressors;
pub mod overlap;
pub mod perfmodel;
pub mod tensor;
pub mod trainer;
