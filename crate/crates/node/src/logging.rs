//! Line-oriented node logs.
//!
//! ```text
//! 2026-10-18T09:14:03.512Z edge-2 store_put_done run=6564... region=2 bytes=5120 t_ms=1760778843512.204
//! ```
//!
//! Fields: ISO-8601 UTC timestamp, node id, event, then `key=value` pairs.
//! Every line carries `t_ms`, the node clock in milliseconds: Unix time on
//! the wall clock, or time since start on a virtual clock. Values with
//! spaces, quotes or `=` are double-quoted with backslash escapes.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};

#[derive(Debug, Clone, Copy)]
pub enum Clock {
    Wall,
    /// Tokio clock; paused runtimes make this virtual.
    Virtual(tokio::time::Instant),
}

/// Start of virtual time when rendered as a timestamp.
const VIRTUAL_EPOCH_MS: i64 = 946_684_800_000;

impl Clock {
    pub fn virtual_now() -> Self {
        Clock::Virtual(tokio::time::Instant::now())
    }

    pub fn now_ms(&self) -> f64 {
        match self {
            Clock::Wall => {
                let d = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .expect("clock after 1970");
                d.as_secs_f64() * 1e3
            }
            Clock::Virtual(epoch) => epoch.elapsed().as_secs_f64() * 1e3,
        }
    }

    fn timestamp(&self, t_ms: f64) -> String {
        let ms = match self {
            Clock::Wall => t_ms as i64,
            Clock::Virtual(_) => VIRTUAL_EPOCH_MS + t_ms as i64,
        };
        let dt: DateTime<Utc> = DateTime::from_timestamp_millis(ms).unwrap_or_default();
        dt.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string()
    }
}

#[derive(Clone)]
pub struct Logger {
    node: String,
    clock: Clock,
    sinks: Arc<Mutex<Vec<Box<dyn Write + Send>>>>,
}

fn quote(v: &str) -> String {
    if !v.is_empty() && !v.contains(|c: char| c.is_whitespace() || c == '"' || c == '=' || c == '\\') {
        return v.to_string();
    }
    let mut out = String::with_capacity(v.len() + 2);
    out.push('"');
    for c in v.chars() {
        match c {
            '"' | '\\' => {
                out.push('\\');
                out.push(c);
            }
            '\n' => out.push_str("\\n"),
            _ => out.push(c),
        }
    }
    out.push('"');
    out
}

impl Logger {
    pub fn new(node: impl Into<String>, clock: Clock) -> Self {
        Self {
            node: node.into(),
            clock,
            sinks: Arc::new(Mutex::new(Vec::new())),
        }
    }

    pub fn with_stderr(self) -> Self {
        self.sinks.lock().expect("log lock").push(Box::new(std::io::stderr()));
        self
    }

    /// Appends to `<dir>/<node>.log`.
    pub fn with_dir(self, dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let f: File = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(format!("{}.log", self.node)))?;
        self.sinks.lock().expect("log lock").push(Box::new(f));
        Ok(self)
    }

    pub fn with_sink(self, sink: Box<dyn Write + Send>) -> Self {
        self.sinks.lock().expect("log lock").push(sink);
        self
    }

    /// Same sinks and clock under another node name.
    pub fn renamed(&self, node: impl Into<String>) -> Self {
        Self {
            node: node.into(),
            clock: self.clock,
            sinks: self.sinks.clone(),
        }
    }

    pub fn node(&self) -> &str {
        &self.node
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn event(&self, event: &str, kv: &[(&str, &dyn std::fmt::Display)]) -> f64 {
        let t = self.clock.now_ms();
        let mut line = format!("{} {} {}", self.clock.timestamp(t), self.node, event);
        for (k, v) in kv {
            line.push(' ');
            line.push_str(k);
            line.push('=');
            line.push_str(&quote(&v.to_string()));
        }
        line.push_str(&format!(" t_ms={t:.3}\n"));
        let mut sinks = self.sinks.lock().expect("log lock");
        for s in sinks.iter_mut() {
            let _ = s.write_all(line.as_bytes());
            let _ = s.flush();
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogLine {
    pub timestamp: String,
    pub node: String,
    pub event: String,
    pub fields: Vec<(String, String)>,
}

impl LogLine {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn t_ms(&self) -> Option<f64> {
        self.get("t_ms")?.parse().ok()
    }
}

fn unquote(s: &str) -> Option<(String, &str)> {
    let mut out = String::new();
    let mut chars = s.char_indices().skip(1);
    while let Some((i, c)) = chars.next() {
        match c {
            '"' => return Some((out, &s[i + 1..])),
            '\\' => match chars.next()?.1 {
                'n' => out.push('\n'),
                other => out.push(other),
            },
            _ => out.push(c),
        }
    }
    None
}

pub fn parse_line(line: &str) -> Option<LogLine> {
    let mut head = line.splitn(4, ' ');
    let timestamp = head.next()?.to_string();
    let node = head.next()?.to_string();
    let event = head.next()?.trim_end().to_string();
    let mut rest = head.next().unwrap_or("").trim_start();
    let mut fields = Vec::new();
    while !rest.is_empty() {
        let (k, after) = rest.split_once('=')?;
        let (v, tail) = if after.starts_with('"') {
            unquote(after)?
        } else {
            let end = after.find(' ').unwrap_or(after.len());
            (after[..end].to_string(), &after[end..])
        };
        fields.push((k.to_string(), v));
        rest = tail.trim_start();
    }
    Some(LogLine {
        timestamp,
        node,
        event,
        fields,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Default)]
    struct Buf(Arc<Mutex<Vec<u8>>>);
    impl Write for Buf {
        fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(b);
            Ok(b.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn lines_roundtrip_through_the_parser() {
        let buf = Buf::default();
        let log = Logger::new("edge-1", Clock::Wall).with_sink(Box::new(buf.clone()));
        log.event(
            "error",
            &[("code", &"merge_failed"), ("text", &"bad \"x\" = y\\z"), ("empty", &"")],
        );
        let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
        let line = parse_line(text.trim_end()).unwrap();
        assert_eq!(line.node, "edge-1");
        assert_eq!(line.event, "error");
        assert_eq!(line.get("text"), Some("bad \"x\" = y\\z"));
        assert_eq!(line.get("empty"), Some(""));
        assert!(line.t_ms().unwrap() > 1.6e12);
        assert!(line.timestamp.ends_with('Z') && line.timestamp.contains('T'));
    }

    #[tokio::test(start_paused = true)]
    async fn virtual_clock_starts_at_zero() {
        let buf = Buf::default();
        let log = Logger::new("cloud", Clock::virtual_now()).with_sink(Box::new(buf.clone()));
        tokio::time::sleep(std::time::Duration::from_millis(1500)).await;
        let t = log.event("tick", &[]);
        assert_eq!(t, 1500.0);
        let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
        assert!(text.starts_with("2000-01-01T00:00:01.500Z cloud tick t_ms=1500.000"));
    }
}
