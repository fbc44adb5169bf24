pub mod arch;
pub mod dsa_ref;
pub mod grad;
