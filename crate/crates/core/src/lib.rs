//! Cluster federated learning over large peer-to-peer networks: key
//! establishment with revocation, masked hierarchical aggregation under
//! authenticated encryption, and a deterministic network simulator.

pub mod aggregation;
pub mod analysis;
pub mod config;
pub mod crypto;
pub mod experiment;
pub mod graph;
pub mod keying;
pub mod rng;
pub mod simnet;
pub mod topology;
pub mod trainer;
