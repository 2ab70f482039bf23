pub mod backend;
pub mod captioner;
pub mod clock;
pub mod converter;
pub mod costing;
pub mod exporter;
pub mod generator;
pub mod ingest;
pub mod mock;
pub mod model;
pub mod pipeline;
pub mod review;
pub mod seedbank;
pub mod store;
pub mod template;
