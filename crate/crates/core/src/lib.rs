pub mod campaign;
pub mod dep;
pub mod fixtures;
pub mod dict;
pub mod mutate;
pub mod script;
pub mod sim;
pub mod synth;
pub mod trace;
pub mod typedb;
