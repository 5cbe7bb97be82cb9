//! Runtime side of the evolutionary autoencoder search: the wire protocol,
//! nameserver, broker and worker daemons, the search driver that plays the
//! model role, and the command line.

pub mod clock;
pub mod wire;
pub mod broker;
pub mod nameserver;
pub mod net;
pub mod evaluate;
pub mod worker;
pub mod driver;
pub mod scaling;
pub mod selftest;
pub mod cli;
