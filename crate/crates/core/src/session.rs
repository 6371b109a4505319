//! Press-session data model and NDJSON session files.
//!
//! A session file holds one `meta` record followed by `cap` and `imu`
//! records in capture order. Floats are written with exactly six decimals
//! and fields always appear in the same order, so equal sessions produce
//! equal bytes.

use std::fmt::{self, Write as _};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: schema error: {msg}")]
    Schema { line: usize, msg: String },
    #[error("invalid session: {}", .0.join("; "))]
    Invariant(Vec<String>),
}

pub type Result<T> = std::result::Result<T, SessionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Genuine,
    Mimicry,
    Replica,
    Puppet,
}

impl Label {
    pub const ATTACKS: [Label; 3] = [Label::Mimicry, Label::Replica, Label::Puppet];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Genuine => "genuine",
            Label::Mimicry => "mimicry",
            Label::Replica => "replica",
            Label::Puppet => "puppet",
        }
    }

    pub fn is_attack(self) -> bool {
        self != Label::Genuine
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "genuine" => Ok(Label::Genuine),
            "mimicry" => Ok(Label::Mimicry),
            "replica" => Ok(Label::Replica),
            "puppet" => Ok(Label::Puppet),
            other => Err(format!("unknown label '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub user_id: String,
    pub label: Label,
    pub cap_hz: u32,
    pub cap_rows: usize,
    pub cap_cols: usize,
    pub imu_hz: u32,
    pub duration_ms: u64,
}

impl SessionMeta {
    /// Nominal capture geometry: 27x15 panel at 20 fps, IMU at 200 Hz, 0.8 s.
    pub fn nominal(session_id: impl Into<String>, user_id: impl Into<String>, label: Label) -> Self {
        SessionMeta {
            session_id: session_id.into(),
            user_id: user_id.into(),
            label,
            cap_hz: 20,
            cap_rows: 27,
            cap_cols: 15,
            imu_hz: 200,
            duration_ms: 800,
        }
    }

    pub fn cells(&self) -> usize {
        self.cap_rows * self.cap_cols
    }
}

/// One raw capacitive frame, row-major counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CapFrame {
    pub ts_ms: u64,
    pub values: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub ts_ms: u64,
    /// Acceleration, m/s².
    pub a: [f64; 3],
    /// Angular velocity, rad/s.
    pub g: [f64; 3],
    /// Magnetic field, µT.
    pub m: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub meta: SessionMeta,
    pub cap: Vec<CapFrame>,
    pub imu: Vec<ImuSample>,
}

/// Rounds to the six-decimal grid used on disk, so that values survive a
/// write/read cycle unchanged.
pub fn quantize(x: f64) -> f64 {
    let q = (x * 1e6).round() / 1e6;
    if q == 0.0 {
        0.0
    } else {
        q
    }
}

pub fn validate_session(session: &Session) -> Vec<String> {
    let mut v = Vec::new();
    let meta = &session.meta;
    if meta.cap_rows * meta.cap_cols == 0 {
        v.push("cap_rows·cap_cols > 0".to_string());
    }
    if meta.cap_hz == 0 {
        v.push("cap_hz > 0".to_string());
    }
    if meta.imu_hz <= meta.cap_hz {
        v.push("imu_hz > cap_hz".to_string());
    }
    if meta.duration_ms == 0 {
        v.push("duration_ms > 0".to_string());
    }
    if session.cap.len() < 2 {
        v.push("len(cap) ≥ 2".to_string());
    }
    if session.imu.len() < 8 {
        v.push("len(imu) ≥ 8".to_string());
    }

    let cells = meta.cells();
    for (i, f) in session.cap.iter().enumerate() {
        if f.values.len() != cells {
            v.push(format!(
                "cap stream: frame {i} has {} values, expected {cells}",
                f.values.len()
            ));
        }
    }
    if let Some(i) = first_decrease(session.cap.iter().map(|f| f.ts_ms)) {
        v.push(format!("cap stream: ts_ms decreases at index {i}"));
    }
    if let Some(i) = first_decrease(session.imu.iter().map(|s| s.ts_ms)) {
        v.push(format!("imu stream: ts_ms decreases at index {i}"));
    }
    for (i, s) in session.imu.iter().enumerate() {
        if !s.a.iter().chain(&s.g).chain(&s.m).all(|x| x.is_finite()) {
            v.push(format!("imu stream: non-finite component at index {i}"));
        }
    }

    // 10% slack on the nominal duration.
    let limit = meta.duration_ms + meta.duration_ms.div_ceil(10);
    if let Some(last) = session.cap.last() {
        if last.ts_ms > limit {
            v.push(format!("cap stream: last ts_ms {} exceeds {limit}", last.ts_ms));
        }
    }
    if let Some(last) = session.imu.last() {
        if last.ts_ms > limit {
            v.push(format!("imu stream: last ts_ms {} exceeds {limit}", last.ts_ms));
        }
    }
    v
}

fn first_decrease(ts: impl Iterator<Item = u64>) -> Option<usize> {
    let mut prev = None;
    for (i, t) in ts.enumerate() {
        if let Some(p) = prev {
            if t < p {
                return Some(i);
            }
        }
        prev = Some(t);
    }
    None
}

#[derive(Deserialize)]
#[serde(tag = "t", rename_all = "lowercase", deny_unknown_fields)]
enum Record {
    Meta {
        session_id: String,
        user_id: String,
        label: Label,
        cap_hz: u32,
        cap_rows: usize,
        cap_cols: usize,
        imu_hz: u32,
        duration_ms: u64,
    },
    Cap {
        ts_ms: u64,
        v: Vec<u64>,
    },
    Imu {
        ts_ms: u64,
        a: [f64; 3],
        g: [f64; 3],
        m: [f64; 3],
    },
}

pub fn parse_session(text: &str) -> Result<Session> {
    parse_lines(text.lines().map(|l| Ok(l.to_string())))
}

pub fn read_session(path: impl AsRef<Path>) -> Result<Session> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| SessionError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let lines = BufReader::new(file).lines().map(|l| {
        l.map_err(|source| SessionError::Io {
            path: path.to_path_buf(),
            source,
        })
    });
    parse_lines(lines)
}

fn parse_lines(lines: impl Iterator<Item = Result<String>>) -> Result<Session> {
    let mut meta: Option<SessionMeta> = None;
    let mut cap = Vec::new();
    let mut imu = Vec::new();

    for (idx, line) in lines.enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| {
            if e.is_data() {
                SessionError::Schema {
                    line: line_no,
                    msg: e.to_string(),
                }
            } else {
                SessionError::Parse {
                    line: line_no,
                    msg: e.to_string(),
                }
            }
        })?;
        match record {
            Record::Meta {
                session_id,
                user_id,
                label,
                cap_hz,
                cap_rows,
                cap_cols,
                imu_hz,
                duration_ms,
            } => {
                if meta.is_some() || line_no != 1 {
                    return Err(SessionError::Schema {
                        line: line_no,
                        msg: "meta record must appear exactly once, on the first line".into(),
                    });
                }
                meta = Some(SessionMeta {
                    session_id,
                    user_id,
                    label,
                    cap_hz,
                    cap_rows,
                    cap_cols,
                    imu_hz,
                    duration_ms,
                });
            }
            Record::Cap { ts_ms, v } => {
                let m = meta.as_ref().ok_or_else(|| missing_meta(line_no))?;
                if v.len() != m.cells() {
                    return Err(SessionError::Schema {
                        line: line_no,
                        msg: format!(
                            "cap record has {} values, expected {}x{}={}",
                            v.len(),
                            m.cap_rows,
                            m.cap_cols,
                            m.cells()
                        ),
                    });
                }
                cap.push(CapFrame { ts_ms, values: v });
            }
            Record::Imu { ts_ms, a, g, m } => {
                if meta.is_none() {
                    return Err(missing_meta(line_no));
                }
                imu.push(ImuSample { ts_ms, a, g, m });
            }
        }
    }

    let meta = meta.ok_or(SessionError::Schema {
        line: 1,
        msg: "missing meta record".into(),
    })?;
    let session = Session { meta, cap, imu };
    let violations = validate_session(&session);
    if violations.is_empty() {
        Ok(session)
    } else {
        Err(SessionError::Invariant(violations))
    }
}

fn missing_meta(line: usize) -> SessionError {
    SessionError::Schema {
        line,
        msg: "record before meta".into(),
    }
}

fn push_vec3(out: &mut String, key: &str, v: &[f64; 3]) {
    let _ = write!(out, ",\"{key}\":[{:.6},{:.6},{:.6}]", v[0], v[1], v[2]);
}

/// Serializes a session to NDJSON text. Refuses sessions that violate
/// their invariants.
pub fn session_to_string(session: &Session) -> Result<String> {
    let violations = validate_session(session);
    if !violations.is_empty() {
        return Err(SessionError::Invariant(violations));
    }
    let m = &session.meta;
    let mut out = String::with_capacity(64 + session.cap.len() * m.cells() * 4 + session.imu.len() * 160);
    let _ = writeln!(
        out,
        "{{\"t\":\"meta\",\"session_id\":{},\"user_id\":{},\"label\":\"{}\",\"cap_hz\":{},\"cap_rows\":{},\"cap_cols\":{},\"imu_hz\":{},\"duration_ms\":{}}}",
        json_string(&m.session_id),
        json_string(&m.user_id),
        m.label,
        m.cap_hz,
        m.cap_rows,
        m.cap_cols,
        m.imu_hz,
        m.duration_ms
    );
    for f in &session.cap {
        let _ = write!(out, "{{\"t\":\"cap\",\"ts_ms\":{},\"v\":[", f.ts_ms);
        for (i, v) in f.values.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push_str("]}\n");
    }
    for s in &session.imu {
        let _ = write!(out, "{{\"t\":\"imu\",\"ts_ms\":{}", s.ts_ms);
        push_vec3(&mut out, "a", &s.a);
        push_vec3(&mut out, "g", &s.g);
        push_vec3(&mut out, "m", &s.m);
        out.push_str("}\n");
    }
    Ok(out)
}

pub fn write_session(session: &Session, path: impl AsRef<Path>) -> Result<()> {
    let text = session_to_string(session)?;
    let path = path.as_ref();
    fs::write(path, text).map_err(|source| SessionError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

/// One line of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub user_id: String,
    pub label: Label,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| SessionError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| SessionError::Parse {
        line: e.line(),
        msg: e.to_string(),
    })
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(entries).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(|source| SessionError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Resolves a manifest entry path relative to the manifest's directory.
pub fn resolve_entry(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
    let p = Path::new(&entry.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> Session {
        let meta = SessionMeta::nominal("s0", "u0", Label::Genuine);
        let cap = (0..2)
            .map(|k| CapFrame {
                ts_ms: k * 50,
                values: vec![k; 405],
            })
            .collect();
        let imu = (0..8)
            .map(|k| ImuSample {
                ts_ms: k * 5,
                a: [0.0, 0.0, 9.81],
                g: [0.001, -0.002, 0.0],
                m: [20.0, 0.0, -40.5],
            })
            .collect();
        Session { meta, cap, imu }
    }

    #[test]
    fn minimal_file_parses() {
        let text = session_to_string(&minimal()).unwrap();
        assert_eq!(text.lines().count(), 11);
        let s = parse_session(&text).unwrap();
        assert_eq!(s.cap.len(), 2);
        assert_eq!(s, minimal());
    }

    #[test]
    fn short_cap_record_is_schema_error() {
        let text = session_to_string(&minimal()).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let values: Vec<String> = (0..404).map(|_| "0".to_string()).collect();
        lines[1] = format!("{{\"t\":\"cap\",\"ts_ms\":0,\"v\":[{}]}}", values.join(","));
        let err = parse_session(&lines.join("\n")).unwrap_err();
        assert!(matches!(err, SessionError::Schema { line: 2, .. }), "{err}");
    }

    #[test]
    fn malformed_line_is_parse_error() {
        let text = session_to_string(&minimal()).unwrap();
        let broken = text.replacen("{\"t\":\"imu\"", "{\"t\":\"imu\",,", 1);
        assert!(matches!(
            parse_session(&broken).unwrap_err(),
            SessionError::Parse { .. }
        ));
    }

    #[test]
    fn missing_field_is_schema_error() {
        let text = session_to_string(&minimal()).unwrap();
        let broken = text.replacen(",\"g\":[0.001000,-0.002000,0.000000]", "", 1);
        assert!(matches!(
            parse_session(&broken).unwrap_err(),
            SessionError::Schema { .. }
        ));
    }

    #[test]
    fn writes_are_deterministic() {
        let a = session_to_string(&minimal()).unwrap();
        let b = session_to_string(&minimal().clone()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_session_is_refused() {
        let mut s = minimal();
        s.cap.pop();
        let err = session_to_string(&s).unwrap_err();
        match err {
            SessionError::Invariant(v) => assert!(v.iter().any(|m| m == "len(cap) ≥ 2")),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn validation_reports_violations() {
        assert!(validate_session(&minimal()).is_empty());

        let mut s = minimal();
        s.imu[4].ts_ms = 1;
        let v = validate_session(&s);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("imu") && v[0].contains("index 4"), "{v:?}");

        let mut s = minimal();
        s.cap.truncate(1);
        assert_eq!(validate_session(&s), vec!["len(cap) ≥ 2".to_string()]);

        let mut s = minimal();
        s.imu[0].a[1] = f64::NAN;
        assert_eq!(validate_session(&s).len(), 1);

        let mut s = minimal();
        s.imu.last_mut().unwrap().ts_ms = 881;
        assert_eq!(validate_session(&s).len(), 1);
    }

    #[test]
    fn meta_must_be_first() {
        let text = session_to_string(&minimal()).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(0, 1);
        assert!(matches!(
            parse_session(&lines.join("\n")).unwrap_err(),
            SessionError::Schema { .. }
        ));
    }

    #[test]
    fn quantize_is_stable() {
        for x in [0.1234567, -3.9999995, 9.81, 1e-7, -1e-7] {
            let q = quantize(x);
            let s = format!("{q:.6}");
            let back: f64 = s.parse().unwrap();
            assert_eq!(back, q);
            assert_eq!(quantize(q), q);
        }
    }
}
