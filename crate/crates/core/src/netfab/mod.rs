//! Transport abstraction shared by the protocol roles.
//!
//! Protocol roles are written as [`Node`]s: event-driven state machines that
//! react to datagrams, HTTP exchanges and timers through a [`Context`]. The
//! same node runs unchanged on the deterministic simulator ([`sim`]) and on
//! real sockets ([`real`]).
//!
//! Client-side code that wants a blocking request/response style (the
//! control point, the CLI) uses [`Transport`] instead, which both back-ends
//! also implement.

use std::any::Any;
use std::net::{IpAddr, Ipv4Addr, SocketAddr, ToSocketAddrs};
use std::time::Duration;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::http::{HttpRequest, HttpResponse};

pub mod ledger;
pub mod real;
pub mod sim;

pub use ledger::{DeviceCounters, EnergyLedger};

/// An HTTP request received by a node that still awaits its response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InboundId(pub u64);

/// An HTTP request issued by a node whose response has not arrived yet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OutboundId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("unreachable: {0}")]
    Unreachable(String),
    #[error("timed out")]
    Timeout,
    #[error("i/o: {0}")]
    Io(String),
    #[error("protocol: {0}")]
    Protocol(String),
}

impl From<std::io::Error> for TransportError {
    fn from(e: std::io::Error) -> Self {
        match e.kind() {
            std::io::ErrorKind::ConnectionRefused
            | std::io::ErrorKind::HostUnreachable
            | std::io::ErrorKind::NetworkUnreachable
            | std::io::ErrorKind::AddrNotAvailable => TransportError::Unreachable(e.to_string()),
            std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock => {
                TransportError::Timeout
            }
            _ => TransportError::Io(e.to_string()),
        }
    }
}

/// What a node may do while handling an event.
pub trait Context {
    /// Time since the runtime started.
    fn now(&self) -> Duration;
    /// Address of this node's HTTP listener.
    fn http_addr(&self) -> SocketAddr;
    fn send_multicast(&mut self, payload: Vec<u8>);
    fn send_datagram(&mut self, to: SocketAddr, payload: Vec<u8>);
    /// Starts an HTTP exchange; the outcome arrives via [`Node::on_response`].
    fn request(&mut self, to: SocketAddr, req: HttpRequest) -> OutboundId;
    /// Answers a request previously handed to [`Node::on_request`].
    fn respond(&mut self, id: InboundId, resp: HttpResponse);
    fn set_timer(&mut self, after: Duration, tag: u64);
    fn set_multicast_membership(&mut self, joined: bool);
    fn rng(&mut self) -> &mut dyn RngCore;
}

/// A protocol role driven by network and timer events.
///
/// Every request handed to `on_request` must eventually be answered with
/// [`Context::respond`], either immediately or from a later event.
pub trait Node: Any {
    fn start(&mut self, cx: &mut dyn Context);
    fn on_datagram(&mut self, cx: &mut dyn Context, from: SocketAddr, payload: &[u8]);
    fn on_request(&mut self, cx: &mut dyn Context, id: InboundId, from: SocketAddr, req: HttpRequest);
    fn on_response(
        &mut self,
        _cx: &mut dyn Context,
        _id: OutboundId,
        _result: Result<HttpResponse, TransportError>,
    ) {
    }
    fn on_timer(&mut self, _cx: &mut dyn Context, _tag: u64) {}
    /// Ceases periodic activity. The node keeps answering requests.
    fn stop(&mut self, _cx: &mut dyn Context) {}
}

impl dyn Node {
    pub fn downcast_ref<T: Node>(&self) -> Option<&T> {
        (self as &dyn Any).downcast_ref()
    }

    pub fn downcast_mut<T: Node>(&mut self) -> Option<&mut T> {
        (self as &mut dyn Any).downcast_mut()
    }
}

/// Blocking client-side transport.
pub trait Transport {
    fn now(&self) -> Duration;
    fn request(&mut self, to: SocketAddr, req: HttpRequest) -> Result<HttpResponse, TransportError>;
    /// Multicasts `payload` and collects unicast datagrams for `wait`.
    fn search(
        &mut self,
        payload: &[u8],
        wait: Duration,
    ) -> Result<Vec<(SocketAddr, Vec<u8>)>, TransportError>;
    fn pause(&mut self, duration: Duration);
    /// URL at which this client receives event notifications.
    fn callback_url(&mut self) -> Result<Url, TransportError>;
    fn take_notifications(&mut self) -> Vec<HttpRequest>;
}

/// Link parameters of a device interface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkClass {
    /// Interface service rate in bytes per millisecond.
    pub rate_bytes_per_ms: f64,
    /// One-way propagation delay contributed by this device, in ms.
    pub propagation_ms: f64,
}

impl LinkClass {
    /// Constrained low-power segment.
    pub const LLN: LinkClass = LinkClass {
        rate_bytes_per_ms: 32.0,
        propagation_ms: 10.0,
    };
    pub const WIFI: LinkClass = LinkClass {
        rate_bytes_per_ms: 1250.0,
        propagation_ms: 1.0,
    };

    pub fn by_name(name: &str) -> Option<LinkClass> {
        match name {
            "lln" => Some(Self::LLN),
            "wifi" => Some(Self::WIFI),
            _ => None,
        }
    }
}

/// Socket address of the host named in `url`.
pub fn socket_addr_of(url: &Url) -> Result<SocketAddr, TransportError> {
    let port = url
        .port_or_known_default()
        .ok_or_else(|| TransportError::Unreachable(format!("no port in {url}")))?;
    match url.host() {
        Some(url::Host::Ipv4(ip)) => Ok(SocketAddr::new(IpAddr::V4(ip), port)),
        Some(url::Host::Ipv6(ip)) => Ok(SocketAddr::new(IpAddr::V6(ip), port)),
        Some(url::Host::Domain("localhost")) => {
            Ok(SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), port))
        }
        Some(url::Host::Domain(name)) => (name, port)
            .to_socket_addrs()
            .map_err(|e| TransportError::Unreachable(e.to_string()))?
            .next()
            .ok_or_else(|| TransportError::Unreachable(format!("cannot resolve {name}"))),
        None => Err(TransportError::Unreachable(format!("no host in {url}"))),
    }
}

/// Path and query of `url`, as sent on the request line.
pub fn request_target(url: &Url) -> String {
    match url.query() {
        Some(q) => format!("{}?{}", url.path(), q),
        None => url.path().to_string(),
    }
}

/// `http://<addr>/`.
pub fn http_base(addr: SocketAddr) -> Url {
    Url::parse(&format!("http://{addr}/")).expect("socket address forms a valid URL")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn url_helpers() {
        let u = Url::parse("http://10.0.0.2:8080/a/b?x=1").unwrap();
        assert_eq!(socket_addr_of(&u).unwrap(), "10.0.0.2:8080".parse().unwrap());
        assert_eq!(request_target(&u), "/a/b?x=1");
        let d = Url::parse("http://10.0.0.3/d").unwrap();
        assert_eq!(socket_addr_of(&d).unwrap().port(), 80);
        assert_eq!(http_base("10.0.0.1:80".parse().unwrap()).as_str(), "http://10.0.0.1/");
    }
}
