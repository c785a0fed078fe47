mod infer;
mod report;
mod synth;
mod train;

pub use infer::{infer, InferArgs};
pub use report::{psd, stations, verify, PsdArgs, StationsArgs, VerifyArgs};
pub use synth::{gen_synth, GenSynthArgs};
pub use train::{distill, train, DistillArgs, TrainArgs};
