//! Declarative testbed experiments: parse an XML experiment description,
//! then run its tasks on local, SSH or PlanetLab nodes from one controller.

pub mod cli;
pub mod model;
pub mod parser;
pub mod planetlab;
pub mod scheduler;
pub mod telemetry;
pub mod transport;
