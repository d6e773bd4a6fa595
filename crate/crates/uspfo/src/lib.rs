//! Services, reference client, attack harness and CLI for the unified
//! single-flow OAuth protocol.

pub mod assertion;
pub mod attack;
pub mod audit;
pub mod authz;
pub mod client;
pub mod cli;
pub mod clock;
pub mod http;
pub mod keys;
pub mod metering;
pub mod ratelimit;
pub mod registry;
pub mod replay;
pub mod report;
pub mod resource;
pub mod server;
pub mod stack;
