pub mod agents;
pub mod editops;
pub mod evalmetrics;
pub mod motiondata;
pub mod nn;
pub mod orchestrator;
pub mod spamgen;
pub mod spamvq;
pub mod trajedit;
