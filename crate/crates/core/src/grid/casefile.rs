//! Plain-text case files.
//!
//! ```text
//! # comment
//! [meta]
//! base_mva = 100
//! freq_hz = 60
//! [bus]
//! # id, kind, v_mag, v_ang, p_load, q_load, shunt_g, shunt_b[, region]
//! 1, Slack, 1.04, 0, 0, 0, 0, 0, 1
//! [branch]
//! # id, from_bus, to_bus, r, x, b_charge, tap, status[, owner_region]
//! 1, 1, 4, 0, 0.0576, 0, 1, Closed, 1
//! [gen]
//! # id, bus, h, d, xd_p, p_mech[, e_mag, delta0]
//! 1, 1, 23.64, 0, 0.0608, 0.716
//! ```
//!
//! A missing bus region defaults to 1, a missing branch owner to the region
//! of its from-bus, and a missing EMF to 1∠0 (filled in by machine
//! initialization).

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use super::{Branch, BranchStatus, Bus, BusKind, Generator, GridCase, GridError};

#[derive(Debug, Error)]
pub enum CaseFileError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error(transparent)]
    Invalid(#[from] GridError),
    #[error("reading case file: {0}")]
    Io(#[from] std::io::Error),
}

fn syntax(line: usize, msg: impl Into<String>) -> CaseFileError {
    CaseFileError::Syntax { line, msg: msg.into() }
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Meta,
    Bus,
    Branch,
    Gen,
}

fn field<T: FromStr>(fields: &[&str], idx: usize, name: &str, line: usize) -> Result<T, CaseFileError> {
    let raw = fields
        .get(idx)
        .ok_or_else(|| syntax(line, format!("missing field `{name}`")))?;
    raw.parse()
        .map_err(|_| syntax(line, format!("bad value `{raw}` for `{name}`")))
}

fn parse_kind(s: &str, line: usize) -> Result<BusKind, CaseFileError> {
    match s.to_ascii_lowercase().as_str() {
        "slack" => Ok(BusKind::Slack),
        "pv" => Ok(BusKind::PV),
        "pq" => Ok(BusKind::PQ),
        _ => Err(syntax(line, format!("unknown bus kind `{s}`"))),
    }
}

fn parse_status(s: &str, line: usize) -> Result<BranchStatus, CaseFileError> {
    match s.to_ascii_lowercase().as_str() {
        "closed" => Ok(BranchStatus::Closed),
        "open" => Ok(BranchStatus::Open),
        _ => Err(syntax(line, format!("unknown branch status `{s}`"))),
    }
}

pub fn parse_case(text: &str) -> Result<GridCase, CaseFileError> {
    let mut section = Section::None;
    let mut base_mva = 100.0;
    let mut freq_hz = 60.0;
    let mut buses = Vec::new();
    // owner column is resolved after all buses are known
    let mut branches: Vec<(Branch, bool)> = Vec::new();
    let mut gens = Vec::new();

    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            section = match line {
                "[meta]" => Section::Meta,
                "[bus]" => Section::Bus,
                "[branch]" => Section::Branch,
                "[gen]" => Section::Gen,
                _ => return Err(syntax(line_no, format!("unknown section {line}"))),
            };
            continue;
        }
        match section {
            Section::None => return Err(syntax(line_no, "record outside of a section")),
            Section::Meta => {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| syntax(line_no, "expected key = value"))?;
                let v: f64 = v
                    .trim()
                    .parse()
                    .map_err(|_| syntax(line_no, format!("bad number `{}`", v.trim())))?;
                match k.trim() {
                    "base_mva" => base_mva = v,
                    "freq_hz" => freq_hz = v,
                    other => return Err(syntax(line_no, format!("unknown meta key `{other}`"))),
                }
            }
            Section::Bus => {
                let f: Vec<&str> = line.split(',').map(str::trim).collect();
                if !(8..=9).contains(&f.len()) {
                    return Err(syntax(
                        line_no,
                        format!("bus record needs 8 or 9 fields, got {}", f.len()),
                    ));
                }
                buses.push(Bus {
                    id: field(&f, 0, "id", line_no)?,
                    kind: parse_kind(f[1], line_no)?,
                    v_mag: field(&f, 2, "v_mag", line_no)?,
                    v_ang: field(&f, 3, "v_ang", line_no)?,
                    p_load: field(&f, 4, "p_load", line_no)?,
                    q_load: field(&f, 5, "q_load", line_no)?,
                    shunt_g: field(&f, 6, "shunt_g", line_no)?,
                    shunt_b: field(&f, 7, "shunt_b", line_no)?,
                    region: if f.len() == 9 {
                        field(&f, 8, "region", line_no)?
                    } else {
                        1
                    },
                });
            }
            Section::Branch => {
                let f: Vec<&str> = line.split(',').map(str::trim).collect();
                if !(8..=9).contains(&f.len()) {
                    return Err(syntax(
                        line_no,
                        format!("branch record needs 8 or 9 fields, got {}", f.len()),
                    ));
                }
                let explicit = f.len() == 9;
                branches.push((
                    Branch {
                        id: field(&f, 0, "id", line_no)?,
                        from_bus: field(&f, 1, "from_bus", line_no)?,
                        to_bus: field(&f, 2, "to_bus", line_no)?,
                        r: field(&f, 3, "r", line_no)?,
                        x: field(&f, 4, "x", line_no)?,
                        b_charge: field(&f, 5, "b_charge", line_no)?,
                        tap: field(&f, 6, "tap", line_no)?,
                        status: parse_status(f[7], line_no)?,
                        owner_region: if explicit {
                            field(&f, 8, "owner_region", line_no)?
                        } else {
                            0
                        },
                    },
                    explicit,
                ));
            }
            Section::Gen => {
                let f: Vec<&str> = line.split(',').map(str::trim).collect();
                if f.len() != 6 && f.len() != 8 {
                    return Err(syntax(
                        line_no,
                        format!("gen record needs 6 or 8 fields, got {}", f.len()),
                    ));
                }
                let (e_mag, delta0) = if f.len() == 8 {
                    (field(&f, 6, "e_mag", line_no)?, field(&f, 7, "delta0", line_no)?)
                } else {
                    (1.0, 0.0)
                };
                gens.push(Generator {
                    id: field(&f, 0, "id", line_no)?,
                    bus: field(&f, 1, "bus", line_no)?,
                    h: field(&f, 2, "h", line_no)?,
                    d: field(&f, 3, "d", line_no)?,
                    xd_p: field(&f, 4, "xd_p", line_no)?,
                    p_mech: field(&f, 5, "p_mech", line_no)?,
                    e_mag,
                    delta0,
                });
            }
        }
    }

    let branches = branches
        .into_iter()
        .map(|(mut br, explicit)| {
            if !explicit {
                br.owner_region = buses
                    .iter()
                    .find(|b| b.id == br.from_bus)
                    .map(|b| b.region)
                    .ok_or(GridError::UnknownBranchBus(br.id, br.from_bus))?;
            }
            Ok(br)
        })
        .collect::<Result<Vec<_>, GridError>>()?;

    Ok(GridCase::new(base_mva, freq_hz, buses, branches, gens)?)
}

pub fn read_case(path: impl AsRef<Path>) -> Result<GridCase, CaseFileError> {
    parse_case(&std::fs::read_to_string(path)?)
}

/// Serializes a case; `parse_case(write_case(c)) == c` for valid cases.
pub fn write_case(case: &GridCase) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "[meta]\nbase_mva = {:?}\nfreq_hz = {:?}",
        case.base_mva, case.freq_hz
    );
    out.push_str("[bus]\n# id, kind, v_mag, v_ang, p_load, q_load, shunt_g, shunt_b, region\n");
    for b in &case.buses {
        let kind = match b.kind {
            BusKind::Slack => "Slack",
            BusKind::PV => "PV",
            BusKind::PQ => "PQ",
        };
        let _ = writeln!(
            out,
            "{}, {kind}, {:?}, {:?}, {:?}, {:?}, {:?}, {:?}, {}",
            b.id, b.v_mag, b.v_ang, b.p_load, b.q_load, b.shunt_g, b.shunt_b, b.region
        );
    }
    out.push_str("[branch]\n# id, from_bus, to_bus, r, x, b_charge, tap, status, owner_region\n");
    for br in &case.branches {
        let status = match br.status {
            BranchStatus::Closed => "Closed",
            BranchStatus::Open => "Open",
        };
        let _ = writeln!(
            out,
            "{}, {}, {}, {:?}, {:?}, {:?}, {:?}, {status}, {}",
            br.id, br.from_bus, br.to_bus, br.r, br.x, br.b_charge, br.tap, br.owner_region
        );
    }
    out.push_str("[gen]\n# id, bus, h, d, xd_p, p_mech, e_mag, delta0\n");
    for g in &case.generators {
        let _ = writeln!(
            out,
            "{}, {}, {:?}, {:?}, {:?}, {:?}, {:?}, {:?}",
            g.id, g.bus, g.h, g.d, g.xd_p, g.p_mech, g.e_mag, g.delta0
        );
    }
    out
}
