//! UPnP-style service discovery with delegation of advertisement and
//! discovery from constrained service devices to a Virtual Service Device.
//!
//! Protocol roles ([`vsd_daemon`], [`sd_agent`], [`cp_client`]) are event
//! driven [`netfab::Node`]s that run on real sockets or on the
//! deterministic simulator in [`netfab::sim`]. [`expharness`] drives the
//! simulator to compare plain UPnP against delegated discovery.

pub mod cp_client;
pub mod descriptions;
pub mod expharness;
pub mod http;
pub mod netfab;
pub mod sd_agent;
pub mod service_registry;
pub mod ssdp;
pub mod vsd_daemon;
