//! Discrete-event simulator for wireless mesh networks whose routers run
//! OLSR for the control plane and an OpenFlow-style switch for data, with
//! an in-router agent (EFTM) that keeps each router attached to the best
//! reachable controller.

pub mod addr;
pub mod controller;
pub mod eftm;
pub mod engine;
pub mod flow;
pub mod metrics;
pub mod olsr;
pub mod runner;
pub mod scenario;
pub mod sim;
pub mod time;
pub mod topology;
pub mod traffic;
