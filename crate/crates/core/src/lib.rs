pub mod numgrad;
pub mod envsim;
pub mod datastore;
pub mod sacpolicy;
pub mod worldmodel;
pub mod latentspace;
pub mod orchestrator;
pub mod gapmetrics;
