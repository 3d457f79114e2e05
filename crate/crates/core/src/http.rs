//! Minimal HTTP/1.1 messages for the description, control and eventing
//! exchanges. Bodies are always framed by `Content-Length`; connections carry
//! exactly one exchange.

use std::io::{self, Read, Write};

use thiserror::Error;

const MAX_HEADERS: usize = 32;
const MAX_HEAD: usize = 8 * 1024;
const MAX_BODY: usize = 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpRequest {
    pub method: String,
    pub target: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("malformed HTTP message: {0}")]
    Malformed(String),
    #[error("incomplete HTTP message")]
    Incomplete,
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

fn find_header<'a>(headers: &'a [(String, String)], name: &str) -> Option<&'a str> {
    headers
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, v)| v.as_str())
}

impl HttpRequest {
    pub fn new(method: impl Into<String>, target: impl Into<String>) -> Self {
        HttpRequest {
            method: method.into(),
            target: target.into(),
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn with_header(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }

    pub fn with_json(mut self, body: Vec<u8>) -> Self {
        self.headers
            .push(("CONTENT-TYPE".into(), "application/json".into()));
        self.body = body;
        self
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    /// The target without any query string.
    pub fn path(&self) -> &str {
        self.target.split('?').next().unwrap_or("")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("{} {} HTTP/1.1\r\n", self.method, self.target).into_bytes();
        write_headers(&mut out, &self.headers, self.body.len());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn decode(raw: &[u8]) -> Result<Self, HttpError> {
        let mut headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
        let mut req = httparse::Request::new(&mut headers);
        let head_len = match req.parse(raw) {
            Ok(httparse::Status::Complete(n)) => n,
            Ok(httparse::Status::Partial) => return Err(HttpError::Incomplete),
            Err(e) => return Err(HttpError::Malformed(e.to_string())),
        };
        let headers = collect_headers(req.headers)?;
        let body = take_body(&headers, &raw[head_len..])?;
        Ok(HttpRequest {
            method: req.method.unwrap_or_default().to_string(),
            target: req.path.unwrap_or_default().to_string(),
            headers,
            body,
        })
    }

    pub fn read_from(stream: &mut impl Read) -> Result<Self, HttpError> {
        Self::decode(&read_message(stream)?)
    }
}

impl HttpResponse {
    pub fn new(status: u16) -> Self {
        HttpResponse {
            status,
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn ok_json(body: Vec<u8>) -> Self {
        HttpResponse::new(200).with_json(body)
    }

    pub fn not_found() -> Self {
        HttpResponse::new(404)
    }

    pub fn redirect(location: &str) -> Self {
        HttpResponse::new(302).with_header("LOCATION", location)
    }

    pub fn with_header(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }

    pub fn with_json(mut self, body: Vec<u8>) -> Self {
        self.headers
            .push(("CONTENT-TYPE".into(), "application/json".into()));
        self.body = body;
        self
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out =
            format!("HTTP/1.1 {} {}\r\n", self.status, reason(self.status)).into_bytes();
        write_headers(&mut out, &self.headers, self.body.len());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn decode(raw: &[u8]) -> Result<Self, HttpError> {
        let mut headers = [httparse::EMPTY_HEADER; MAX_HEADERS];
        let mut resp = httparse::Response::new(&mut headers);
        let head_len = match resp.parse(raw) {
            Ok(httparse::Status::Complete(n)) => n,
            Ok(httparse::Status::Partial) => return Err(HttpError::Incomplete),
            Err(e) => return Err(HttpError::Malformed(e.to_string())),
        };
        let headers = collect_headers(resp.headers)?;
        let body = take_body(&headers, &raw[head_len..])?;
        Ok(HttpResponse {
            status: resp.code.unwrap_or_default(),
            headers,
            body,
        })
    }

    pub fn read_from(stream: &mut impl Read) -> Result<Self, HttpError> {
        Self::decode(&read_message(stream)?)
    }
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        302 => "Found",
        400 => "Bad Request",
        404 => "Not Found",
        405 => "Method Not Allowed",
        500 => "Internal Server Error",
        502 => "Bad Gateway",
        _ => "Status",
    }
}

fn write_headers(out: &mut Vec<u8>, headers: &[(String, String)], body_len: usize) {
    for (n, v) in headers {
        if n.eq_ignore_ascii_case("content-length") {
            continue;
        }
        out.extend_from_slice(format!("{n}: {v}\r\n").as_bytes());
    }
    out.extend_from_slice(format!("CONTENT-LENGTH: {body_len}\r\n\r\n").as_bytes());
}

fn collect_headers(raw: &[httparse::Header<'_>]) -> Result<Vec<(String, String)>, HttpError> {
    raw.iter()
        .map(|h| {
            let value = std::str::from_utf8(h.value)
                .map_err(|_| HttpError::Malformed(format!("non UTF-8 value for {}", h.name)))?;
            Ok((h.name.to_string(), value.trim().to_string()))
        })
        .collect()
}

fn content_length(headers: &[(String, String)]) -> Result<usize, HttpError> {
    match find_header(headers, "content-length") {
        None => Ok(0),
        Some(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n <= MAX_BODY)
            .ok_or_else(|| HttpError::Malformed(format!("bad content-length {v:?}"))),
    }
}

fn take_body(headers: &[(String, String)], rest: &[u8]) -> Result<Vec<u8>, HttpError> {
    let len = content_length(headers)?;
    if rest.len() < len {
        return Err(HttpError::Incomplete);
    }
    Ok(rest[..len].to_vec())
}

/// Reads one complete message (head plus `Content-Length` body).
fn read_message(stream: &mut impl Read) -> Result<Vec<u8>, HttpError> {
    let mut buf = Vec::with_capacity(1024);
    let mut chunk = [0u8; 1024];
    let head_end = loop {
        if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
            break pos + 4;
        }
        if buf.len() > MAX_HEAD {
            return Err(HttpError::Malformed("header section too large".into()));
        }
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Err(HttpError::Incomplete);
        }
        buf.extend_from_slice(&chunk[..n]);
    };
    let head = std::str::from_utf8(&buf[..head_end])
        .map_err(|_| HttpError::Malformed("non UTF-8 head".into()))?;
    let len = head
        .split("\r\n")
        .filter_map(|l| l.split_once(':'))
        .find(|(n, _)| n.trim().eq_ignore_ascii_case("content-length"))
        .map(|(_, v)| v.trim().parse::<usize>())
        .transpose()
        .map_err(|_| HttpError::Malformed("bad content-length".into()))?
        .unwrap_or(0);
    if len > MAX_BODY {
        return Err(HttpError::Malformed("body too large".into()));
    }
    while buf.len() < head_end + len {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Err(HttpError::Incomplete);
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    buf.truncate(head_end + len);
    Ok(buf)
}

pub fn write_all(stream: &mut impl Write, bytes: &[u8]) -> io::Result<()> {
    stream.write_all(bytes)?;
    stream.flush()
}
