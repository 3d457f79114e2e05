//! SSDP text messages: M-SEARCH, NOTIFY and the unicast search response.
//!
//! Header names are matched case-insensitively and always written back in
//! upper case. Values keep their original case. Headers that are not part of
//! the typed model are kept in `extra_headers`, in the order they appeared.

use std::fmt::Write as _;

use thiserror::Error;

/// Largest datagram accepted or produced.
pub const MAX_DATAGRAM: usize = 2048;

/// Default SSDP multicast group.
pub const SSDP_GROUP: &str = "239.255.255.250:1900";

/// Search target a service device uses to find a VSD-Agent.
pub const VSD_AGENT_ST: &str = "VSD:VSD-AGENT";

/// Wildcard search target.
pub const SSDP_ALL: &str = "ssdp:all";

/// Unique service name of `service_name` on `device_id`.
pub fn usn_for(device_id: &str, service_name: &str) -> String {
    format!("uuid:{device_id}::{service_name}")
}

const MSEARCH_LINE: &str = "M-SEARCH * HTTP/1.1";
const NOTIFY_LINE: &str = "NOTIFY * HTTP/1.1";
const RESPONSE_LINE: &str = "HTTP/1.1 200 OK";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    MSearch,
    Notify,
    SearchResponse,
}

impl MessageKind {
    fn start_line(self) -> &'static str {
        match self {
            MessageKind::MSearch => MSEARCH_LINE,
            MessageKind::Notify => NOTIFY_LINE,
            MessageKind::SearchResponse => RESPONSE_LINE,
        }
    }

    /// NOTIFY carries its target in `NT`; the other two use `ST`.
    fn target_header(self) -> &'static str {
        match self {
            MessageKind::Notify => "NT",
            _ => "ST",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SsdpMessage {
    pub kind: MessageKind,
    /// `HOST` header; empty when absent (usual for search responses).
    pub host: String,
    pub search_target: String,
    pub location: Option<String>,
    pub usn: Option<String>,
    pub cache_control_max_age: Option<u32>,
    pub extra_headers: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SsdpError {
    #[error("malformed start line: {0:?}")]
    MalformedStartLine(String),
    #[error("datagram of {0} bytes exceeds the {MAX_DATAGRAM} byte limit")]
    Oversize(usize),
    #[error("payload is not valid UTF-8")]
    InvalidUtf8,
    #[error("missing required header {0}")]
    MissingRequiredHeader(&'static str),
    #[error("invalid header line: {0:?}")]
    InvalidHeaderSyntax(String),
    #[error("message invariant violated: {0}")]
    InvariantViolation(String),
}

impl SsdpMessage {
    /// A discovery request for `search_target`, addressed to `host`.
    pub fn msearch(host: impl Into<String>, search_target: impl Into<String>) -> Self {
        SsdpMessage {
            kind: MessageKind::MSearch,
            host: host.into(),
            search_target: search_target.into(),
            location: None,
            usn: None,
            cache_control_max_age: None,
            extra_headers: vec![
                ("MAN".into(), "\"ssdp:discover\"".into()),
                ("MX".into(), "1".into()),
            ],
        }
    }

    /// An `ssdp:alive` advertisement.
    pub fn notify(
        host: impl Into<String>,
        notification_type: impl Into<String>,
        location: impl Into<String>,
        usn: impl Into<String>,
        max_age: u32,
    ) -> Self {
        SsdpMessage {
            kind: MessageKind::Notify,
            host: host.into(),
            search_target: notification_type.into(),
            location: Some(location.into()),
            usn: Some(usn.into()),
            cache_control_max_age: Some(max_age),
            extra_headers: vec![("NTS".into(), "ssdp:alive".into())],
        }
    }

    /// A unicast reply to an M-SEARCH.
    pub fn search_response(
        search_target: impl Into<String>,
        location: impl Into<String>,
        usn: impl Into<String>,
        max_age: u32,
    ) -> Self {
        SsdpMessage {
            kind: MessageKind::SearchResponse,
            host: String::new(),
            search_target: search_target.into(),
            location: Some(location.into()),
            usn: Some(usn.into()),
            cache_control_max_age: Some(max_age),
            extra_headers: vec![("EXT".into(), String::new())],
        }
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.extra_headers
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    fn validate(&self) -> Result<(), SsdpError> {
        let bad = |m: &str| Err(SsdpError::InvariantViolation(m.to_string()));
        if self.search_target.is_empty() {
            return bad("empty search target");
        }
        match self.kind {
            MessageKind::MSearch => {
                if self.location.is_some() {
                    return bad("M-SEARCH must not carry LOCATION");
                }
                if self.host.is_empty() {
                    return bad("M-SEARCH requires HOST");
                }
            }
            MessageKind::Notify | MessageKind::SearchResponse => {
                if self.location.as_deref().is_none_or(str::is_empty) {
                    return bad("LOCATION required");
                }
                if self.usn.as_deref().is_none_or(str::is_empty) {
                    return bad("USN required");
                }
                if self.kind == MessageKind::Notify && self.host.is_empty() {
                    return bad("NOTIFY requires HOST");
                }
            }
        }
        if self.cache_control_max_age == Some(0) {
            return bad("max-age must be positive");
        }
        let modeled = modeled_headers(self.kind);
        for (name, value) in &self.extra_headers {
            if !is_token(name) {
                return bad("extra header name is not a token");
            }
            if modeled.iter().any(|m| m.eq_ignore_ascii_case(name)) {
                return bad("extra header duplicates a modeled header");
            }
            if has_line_break(value) || value.trim() != value {
                return bad("header value not representable");
            }
        }
        let fields = [
            Some(self.host.as_str()),
            Some(self.search_target.as_str()),
            self.location.as_deref(),
            self.usn.as_deref(),
        ];
        for v in fields.into_iter().flatten() {
            if has_line_break(v) || v.trim() != v {
                return bad("header value not representable");
            }
        }
        Ok(())
    }
}

fn modeled_headers(kind: MessageKind) -> [&'static str; 5] {
    ["HOST", kind.target_header(), "LOCATION", "USN", "CACHE-CONTROL"]
}

fn is_token(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_graphic() && !b"()<>@,;:\\\"/[]?={}".contains(&b))
}

fn has_line_break(s: &str) -> bool {
    s.contains(['\r', '\n'])
}

/// Parses one datagram payload.
pub fn parse_message(raw: &[u8]) -> Result<SsdpMessage, SsdpError> {
    if raw.len() > MAX_DATAGRAM {
        return Err(SsdpError::Oversize(raw.len()));
    }
    let text = std::str::from_utf8(raw).map_err(|_| SsdpError::InvalidUtf8)?;
    let mut lines = text.lines();
    let start = lines.next().unwrap_or("");
    let kind = match start.trim_end() {
        MSEARCH_LINE => MessageKind::MSearch,
        NOTIFY_LINE => MessageKind::Notify,
        RESPONSE_LINE => MessageKind::SearchResponse,
        other => return Err(SsdpError::MalformedStartLine(truncate(other))),
    };

    let target_name = kind.target_header();
    let mut host = None;
    let mut target = None;
    let mut location = None;
    let mut usn = None;
    let mut max_age = None;
    let mut extra_headers = Vec::new();

    for line in lines {
        if line.is_empty() {
            break;
        }
        let (name, value) = line
            .split_once(':')
            .ok_or_else(|| SsdpError::InvalidHeaderSyntax(truncate(line)))?;
        let name = name.trim();
        if !is_token(name) {
            return Err(SsdpError::InvalidHeaderSyntax(truncate(line)));
        }
        let value = value.trim().to_string();
        let name = name.to_ascii_uppercase();
        let slot = match name.as_str() {
            "HOST" => &mut host,
            "LOCATION" => &mut location,
            "USN" => &mut usn,
            "CACHE-CONTROL" => {
                if max_age.is_some() {
                    return Err(SsdpError::InvalidHeaderSyntax(truncate(line)));
                }
                max_age = Some(parse_max_age(&value).ok_or_else(|| {
                    SsdpError::InvalidHeaderSyntax(truncate(line))
                })?);
                continue;
            }
            n if n == target_name => &mut target,
            _ => {
                extra_headers.push((name, value));
                continue;
            }
        };
        if slot.is_some() {
            return Err(SsdpError::InvalidHeaderSyntax(truncate(line)));
        }
        *slot = Some(value);
    }

    let required = |v: Option<String>, name: &'static str| match v {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(SsdpError::MissingRequiredHeader(name)),
    };
    let msg = match kind {
        MessageKind::MSearch => {
            let host = required(host, "HOST")?;
            let search_target = required(target, "ST")?;
            if location.is_some() {
                return Err(SsdpError::InvariantViolation(
                    "M-SEARCH must not carry LOCATION".into(),
                ));
            }
            SsdpMessage {
                kind,
                host,
                search_target,
                location: None,
                usn,
                cache_control_max_age: max_age,
                extra_headers,
            }
        }
        MessageKind::Notify | MessageKind::SearchResponse => {
            let host = if kind == MessageKind::Notify {
                required(host, "HOST")?
            } else {
                host.unwrap_or_default()
            };
            let search_target = required(target, target_name)?;
            let location = required(location, "LOCATION")?;
            let usn = required(usn, "USN")?;
            SsdpMessage {
                kind,
                host,
                search_target,
                location: Some(location),
                usn: Some(usn),
                cache_control_max_age: max_age,
                extra_headers,
            }
        }
    };
    Ok(msg)
}

fn parse_max_age(value: &str) -> Option<u32> {
    let (key, secs) = value.split_once('=')?;
    if !key.trim().eq_ignore_ascii_case("max-age") {
        return None;
    }
    secs.trim().parse().ok().filter(|&n: &u32| n > 0)
}

fn truncate(s: &str) -> String {
    s.chars().take(80).collect()
}

/// Writes `msg` as a CRLF-delimited datagram terminated by a blank line.
pub fn serialize_message(msg: &SsdpMessage) -> Result<Vec<u8>, SsdpError> {
    msg.validate()?;
    let mut out = String::with_capacity(256);
    out.push_str(msg.kind.start_line());
    out.push_str("\r\n");
    let mut line = |name: &str, value: &str| {
        let _ = write!(out, "{}: {}\r\n", name.to_ascii_uppercase(), value);
    };
    if !msg.host.is_empty() {
        line("HOST", &msg.host);
    }
    if let Some(age) = msg.cache_control_max_age {
        line("CACHE-CONTROL", &format!("max-age={age}"));
    }
    if let Some(location) = &msg.location {
        line("LOCATION", location);
    }
    line(msg.kind.target_header(), &msg.search_target);
    if let Some(usn) = &msg.usn {
        line("USN", usn);
    }
    for (name, value) in &msg.extra_headers {
        line(name, value);
    }
    out.push_str("\r\n");
    if out.len() > MAX_DATAGRAM {
        return Err(SsdpError::InvariantViolation(format!(
            "serialized size {} exceeds {MAX_DATAGRAM}",
            out.len()
        )));
    }
    Ok(out.into_bytes())
}

/// True when a search for `requested_st` should be answered by a service
/// advertised as `advertised_type`.
pub fn matches_search_target(advertised_type: &str, requested_st: &str) -> bool {
    requested_st == SSDP_ALL || requested_st == advertised_type
}
