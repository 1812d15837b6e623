pub mod audio;
pub mod dbn;
pub mod emd;
pub mod eval;
pub mod features;
pub mod hilbert;
pub mod pipeline;
pub mod rng;
pub mod synth;
