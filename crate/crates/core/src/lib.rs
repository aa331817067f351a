pub mod acpf;
pub mod conic;
pub mod distflow;
pub mod grid;
pub mod load;
pub mod study;
