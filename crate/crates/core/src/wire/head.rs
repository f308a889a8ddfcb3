use std::fmt;

use thiserror::Error;

/// Heads larger than this are rejected.
pub const MAX_HEAD_LEN: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HeadError {
    #[error("incomplete message head")]
    Incomplete,
    #[error("malformed message head: {0}")]
    Malformed(String),
}

fn malformed<T>(msg: impl Into<String>) -> Result<T, HeadError> {
    Err(HeadError::Malformed(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StartLine {
    Request { method: String, target: String },
    Response { status: u16 },
}

/// Ordered header multimap; names are stored lowercase.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HeaderList(Vec<(String, String)>);

impl HeaderList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, name: impl AsRef<str>, value: impl Into<String>) {
        self.0.push((name.as_ref().to_ascii_lowercase(), value.into()));
    }

    /// Replaces every existing value of `name` with a single `value`.
    pub fn set(&mut self, name: impl AsRef<str>, value: impl Into<String>) {
        let name = name.as_ref().to_ascii_lowercase();
        self.0.retain(|(n, _)| *n != name);
        self.0.push((name, value.into()));
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn get_all<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.0
            .iter()
            .filter(move |(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn remove(&mut self, name: &str) {
        self.0.retain(|(n, _)| !n.eq_ignore_ascii_case(name));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(n, v)| (n.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<K: AsRef<str>, V: Into<String>> FromIterator<(K, V)> for HeaderList {
    fn from_iter<I: IntoIterator<Item = (K, V)>>(iter: I) -> Self {
        let mut list = HeaderList::new();
        for (k, v) in iter {
            list.append(k, v);
        }
        list
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageHead {
    pub line: StartLine,
    pub headers: HeaderList,
}

impl MessageHead {
    pub fn request(method: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            line: StartLine::Request { method: method.into(), target: target.into() },
            headers: HeaderList::new(),
        }
    }

    pub fn response(status: u16) -> Self {
        Self { line: StartLine::Response { status }, headers: HeaderList::new() }
    }

    pub fn with_header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.headers.append(name, value);
        self
    }

    pub fn method(&self) -> Option<&str> {
        match &self.line {
            StartLine::Request { method, .. } => Some(method),
            StartLine::Response { .. } => None,
        }
    }

    pub fn target(&self) -> Option<&str> {
        match &self.line {
            StartLine::Request { target, .. } => Some(target),
            StartLine::Response { .. } => None,
        }
    }

    pub fn status(&self) -> Option<u16> {
        match self.line {
            StartLine::Response { status } => Some(status),
            StartLine::Request { .. } => None,
        }
    }

    pub fn is_request(&self) -> bool {
        matches!(self.line, StartLine::Request { .. })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, HeadError> {
        serialize_message_head(self)
    }
}

impl fmt::Display for MessageHead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.line {
            StartLine::Request { method, target } => write!(f, "{method} {target}"),
            StartLine::Response { status } => write!(f, "{status} {}", reason_phrase(*status)),
        }
    }
}

pub fn reason_phrase(status: u16) -> &'static str {
    match status {
        100 => "Continue",
        200 => "OK",
        204 => "No Content",
        206 => "Partial Content",
        400 => "Bad Request",
        403 => "Forbidden",
        404 => "Not Found",
        405 => "Method Not Allowed",
        408 => "Request Timeout",
        416 => "Range Not Satisfiable",
        500 => "Internal Server Error",
        502 => "Bad Gateway",
        503 => "Service Unavailable",
        504 => "Gateway Timeout",
        _ => "Status",
    }
}

fn is_tchar(b: u8) -> bool {
    b.is_ascii_alphanumeric()
        || matches!(
            b,
            b'!' | b'#' | b'$' | b'%' | b'&' | b'\'' | b'*' | b'+' | b'-' | b'.' | b'^' | b'_' | b'`' | b'|' | b'~'
        )
}

fn is_method(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_uppercase() || b == b'-')
}

fn is_target(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_graphic())
}

fn is_field_value(s: &str) -> bool {
    s.bytes().all(|b| b == b'\t' || (b >= 0x20 && b != 0x7f))
}

fn find_terminator(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}

/// Parses one message head from the front of `buf`.
///
/// On success returns the head and the number of bytes consumed (just past
/// the blank line). `Incomplete` means more input is needed.
pub fn parse_message_head(buf: &[u8]) -> Result<(MessageHead, usize), HeadError> {
    let window = &buf[..buf.len().min(MAX_HEAD_LEN)];
    let end = match find_terminator(window) {
        Some(end) => end,
        None if buf.len() >= MAX_HEAD_LEN => return malformed("head exceeds 64 KiB"),
        None => return Err(HeadError::Incomplete),
    };
    let consumed = end + 4;
    let text = match std::str::from_utf8(&buf[..end]) {
        Ok(t) => t,
        Err(_) => return malformed("head is not valid UTF-8"),
    };
    let mut lines = text.split("\r\n");
    let first = lines.next().unwrap_or_default();
    let line = parse_start_line(first)?;

    let mut headers = HeaderList::new();
    for raw in lines {
        let Some((name, value)) = raw.split_once(':') else {
            return malformed(format!("header line without colon: {raw:?}"));
        };
        if name.is_empty() || !name.bytes().all(is_tchar) {
            return malformed(format!("bad header name {name:?}"));
        }
        let value = value.trim_matches(|c| c == ' ' || c == '\t');
        if !is_field_value(value) {
            return malformed(format!("bad value for header {name}"));
        }
        headers.append(name, value);
    }
    Ok((MessageHead { line, headers }, consumed))
}

fn parse_start_line(line: &str) -> Result<StartLine, HeadError> {
    if let Some(rest) = line.strip_prefix("HTTP/1.1 ") {
        let (code, _reason) = rest.split_once(' ').unwrap_or((rest, ""));
        if code.len() != 3 || !code.bytes().all(|b| b.is_ascii_digit()) {
            return malformed(format!("bad status line {line:?}"));
        }
        let status: u16 = code.parse().expect("three digits");
        if !(100..=599).contains(&status) {
            return malformed(format!("status {status} out of range"));
        }
        return Ok(StartLine::Response { status });
    }
    let mut parts = line.split(' ');
    let (Some(method), Some(target), Some(version), None) = (parts.next(), parts.next(), parts.next(), parts.next())
    else {
        return malformed(format!("bad request line {line:?}"));
    };
    if !is_method(method) {
        return malformed(format!("bad method {method:?}"));
    }
    if !is_target(target) {
        return malformed(format!("bad target {target:?}"));
    }
    if version != "HTTP/1.1" {
        return malformed(format!("unsupported version {version:?}"));
    }
    Ok(StartLine::Request { method: method.to_string(), target: target.to_string() })
}

/// Serializes `head`, refusing anything that would not parse back (including
/// CR/LF smuggled into header values).
pub fn serialize_message_head(head: &MessageHead) -> Result<Vec<u8>, HeadError> {
    let mut out = Vec::with_capacity(64 + head.headers.len() * 32);
    match &head.line {
        StartLine::Request { method, target } => {
            if !is_method(method) {
                return malformed(format!("bad method {method:?}"));
            }
            if !is_target(target) {
                return malformed(format!("bad target {target:?}"));
            }
            out.extend_from_slice(method.as_bytes());
            out.push(b' ');
            out.extend_from_slice(target.as_bytes());
            out.extend_from_slice(b" HTTP/1.1\r\n");
        }
        StartLine::Response { status } => {
            if !(100..=599).contains(status) {
                return malformed(format!("status {status} out of range"));
            }
            out.extend_from_slice(format!("HTTP/1.1 {} {}\r\n", status, reason_phrase(*status)).as_bytes());
        }
    }
    for (name, value) in head.headers.iter() {
        if name.is_empty() || !name.bytes().all(is_tchar) {
            return malformed(format!("bad header name {name:?}"));
        }
        if !is_field_value(value) || value.starts_with([' ', '\t']) || value.ends_with([' ', '\t']) {
            return malformed(format!("bad value for header {name}"));
        }
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(b": ");
        out.extend_from_slice(value.as_bytes());
        out.extend_from_slice(b"\r\n");
    }
    out.extend_from_slice(b"\r\n");
    if out.len() > MAX_HEAD_LEN {
        return malformed("head exceeds 64 KiB");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_connect_udp_request() {
        let buf = b"CONNECT-UDP s3:9000 HTTP/1.1\r\nhost: s3\r\nuser: user2\r\n\r\n";
        let (head, used) = parse_message_head(buf).unwrap();
        assert_eq!(used, buf.len());
        assert_eq!(head.method(), Some("CONNECT-UDP"));
        assert_eq!(head.target(), Some("s3:9000"));
        assert_eq!(head.headers.len(), 2);
        assert_eq!(head.headers.get("user"), Some("user2"));
    }

    #[test]
    fn parses_bare_response() {
        let (head, used) = parse_message_head(b"HTTP/1.1 200 OK\r\n\r\n").unwrap();
        assert_eq!(used, 19);
        assert_eq!(head.status(), Some(200));
        assert!(head.headers.is_empty());
    }

    #[test]
    fn incomplete_until_blank_line() {
        let full = b"GET / HTTP/1.1\r\nhost: a\r\n\r\n";
        for cut in 0..full.len() {
            assert_eq!(parse_message_head(&full[..cut]), Err(HeadError::Incomplete), "cut {cut}");
        }
        assert!(parse_message_head(full).is_ok());
    }

    #[test]
    fn trailing_bytes_are_not_consumed() {
        let buf = b"HTTP/1.1 200 OK\r\n\r\n\x00\x03abc";
        let (_, used) = parse_message_head(buf).unwrap();
        assert_eq!(&buf[used..], b"\x00\x03abc");
    }

    #[test]
    fn header_names_are_lowercased() {
        let (head, _) = parse_message_head(b"GET / HTTP/1.1\r\nX-User: a\r\n\r\n").unwrap();
        assert_eq!(head.headers.iter().next(), Some(("x-user", "a")));
    }

    #[test]
    fn rejects_bad_request_line() {
        assert!(matches!(parse_message_head(b"GET /\r\n\r\n"), Err(HeadError::Malformed(_))));
        assert!(matches!(parse_message_head(b"get / HTTP/1.1\r\n\r\n"), Err(HeadError::Malformed(_))));
        assert!(matches!(parse_message_head(b"GET / HTTP/2\r\n\r\n"), Err(HeadError::Malformed(_))));
    }

    #[test]
    fn rejects_non_ascii_header_name() {
        let buf = "GET / HTTP/1.1\r\nn\u{e9}: a\r\n\r\n";
        assert!(matches!(parse_message_head(buf.as_bytes()), Err(HeadError::Malformed(_))));
    }

    #[test]
    fn rejects_oversized_head() {
        let mut buf = b"GET / HTTP/1.1\r\nx: ".to_vec();
        buf.resize(MAX_HEAD_LEN + 10, b'a');
        assert!(matches!(parse_message_head(&buf), Err(HeadError::Malformed(_))));
    }

    #[test]
    fn serializes_connect() {
        let head = MessageHead::request("CONNECT", "a:1");
        assert_eq!(serialize_message_head(&head).unwrap(), b"CONNECT a:1 HTTP/1.1\r\n\r\n");
    }

    #[test]
    fn serializes_ok_response() {
        assert_eq!(serialize_message_head(&MessageHead::response(200)).unwrap(), b"HTTP/1.1 200 OK\r\n\r\n");
    }

    #[test]
    fn refuses_header_injection() {
        let head = MessageHead::request("GET", "/").with_header("user", "a\r\nx: b");
        assert!(matches!(serialize_message_head(&head), Err(HeadError::Malformed(_))));
        let head = MessageHead::request("GET", "/").with_header("user", "a\rb");
        assert!(serialize_message_head(&head).is_err());
    }

    #[test]
    fn round_trip_preserves_head() {
        let head = MessageHead::request("GET", "/video/a.ts")
            .with_header("Host", "VIDEO")
            .with_header("user", "user1")
            .with_header("user", "dup");
        let bytes = serialize_message_head(&head).unwrap();
        let (back, used) = parse_message_head(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, head);
    }
}
