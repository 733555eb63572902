pub mod sefp;
pub mod fakequant;
pub mod tensor;
pub mod bps;
pub mod laa;
pub mod train;
pub mod analysis;
pub mod container;
pub mod cli;
