//! Flat `section.key = value` configuration.
//!
//! Every key has a default. Values are layered: defaults, then the config
//! file, then the link profile file (only `link.*` keys), then command-line
//! flags. The layer that supplied each value is kept so precedence can be
//! inspected and tested per key.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use edgegrid_core::cases::case9;
use edgegrid_core::dynamics::SimulationConfig;
use edgegrid_core::grid::{read_case, FaultSpec, GridCase, RegionId};
use edgegrid_core::Complex64;
use edgegrid_transport::link::LinkProfile;
use edgegrid_transport::messages::{DsaParams, RunManifest, RunMode};
use edgegrid_transport::wire::RunId;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{origin}:{line}: {msg}")]
    Syntax { origin: String, line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: bad value `{value}` ({expected})")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("profile files may only set link.* keys, found `{0}`")]
    NotALinkKey(String),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("case file: {0}")]
    Case(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    Default,
    File,
    Profile,
    Flag,
}

/// (key, default, description)
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "node.id",
        "",
        "Node name used in logs; empty derives one from role and region",
    ),
    ("node.region", "1", "Region served by an edge or UE"),
    ("net.listen", "127.0.0.1:0", "Listen address of an edge or the cloud"),
    (
        "net.cloud_addr",
        "127.0.0.1:7400",
        "Cloud address, used by edges and controllers",
    ),
    ("net.edge_addr", "127.0.0.1:7401", "Edge address, used by UE agents"),
    ("store.root", "edgegrid-store", "Object store root directory"),
    ("log.dir", "", "Directory for node log files; empty logs to stderr only"),
    ("case.path", "", "Grid case file; empty uses the bundled 9-bus case"),
    ("link.delay_min_ms", "7.5", "Lower bound of the uniform one-way delay"),
    ("link.delay_max_ms", "18.5", "Upper bound of the uniform one-way delay"),
    (
        "link.jitter_mean_ms",
        "5",
        "Mean of the exponential jitter before truncation",
    ),
    ("link.jitter_cap_ms", "18.31", "Jitter truncation point"),
    (
        "link.bw_up_mbps",
        "52.43",
        "Uplink bandwidth (towards the cloud); `inf` disables shaping",
    ),
    (
        "link.bw_down_mbps",
        "306.01",
        "Downlink bandwidth; `inf` disables shaping",
    ),
    ("link.loss", "0", "Per-frame drop probability"),
    ("link.seed", "0", "Seed of the link scheduler"),
    ("run.seed", "1", "Seed for run ids, sampling and demos"),
    ("run.mode", "topology", "`topology` or `dsa`"),
    ("run.deadline_s", "30", "Barrier deadline"),
    ("run.t_end", "3", "Simulated seconds"),
    ("run.dt", "0.005", "Integration step"),
    (
        "run.regions",
        "",
        "Comma-separated expected regions; empty means all regions of the case",
    ),
    ("fault.bus", "7", "Faulted bus"),
    (
        "fault.branch",
        "4",
        "Branch opened at clearing; `none` keeps the network intact",
    ),
    ("fault.t_fault", "0.1", "Fault inception time"),
    ("fault.t_clear", "0.2", "Fault clearing time"),
    ("fault.y_re", "0", "Real part of the fault admittance"),
    ("fault.y_im", "-1e6", "Imaginary part of the fault admittance"),
    ("dsa.n_raw", "200", "Raw scenarios drawn per region"),
    ("dsa.k", "10", "Representative scenarios kept"),
    ("dsa.sigma", "0.05", "Default relative std of load forecast errors"),
    ("ue.script", "", "UE script file (JSON); empty sends nothing"),
    ("ue.ack_timeout_s", "2", "Ack wait before the single retry"),
    (
        "demo.virtual_time",
        "false",
        "Run demos in one process on a virtual clock",
    ),
    (
        "demo.work_dir",
        "",
        "Demo working directory; empty creates a fresh temporary one",
    ),
    ("demo.ues_per_region", "1", "UE agents started per region by the demos"),
];

#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<&'static str, (String, Source)>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|(k, d, _)| (*k, (d.to_string(), Source::Default)))
                .collect(),
        }
    }
}

fn known(key: &str) -> Option<&'static str> {
    KEYS.iter().map(|(k, _, _)| *k).find(|k| *k == key)
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            origin: origin.to_string(),
            line: n + 1,
            msg: "expected `key = value`".into(),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl Config {
    pub fn set(&mut self, key: &str, value: impl Into<String>, source: Source) -> Result<(), ConfigError> {
        let k = known(key).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        let slot = self.values.get_mut(k).expect("all keys have defaults");
        if source >= slot.1 {
            *slot = (value.into(), source);
        }
        Ok(())
    }

    pub fn merge_text(&mut self, text: &str, origin: &str, source: Source) -> Result<(), ConfigError> {
        for (k, v) in parse_pairs(text, origin)? {
            if source == Source::Profile && !k.starts_with("link.") {
                return Err(ConfigError::NotALinkKey(k));
            }
            self.set(&k, v, source)?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        self.merge_text(&read(path)?, &path.display().to_string(), Source::File)
    }

    pub fn load_profile(&mut self, path: &Path) -> Result<(), ConfigError> {
        self.merge_text(&read(path)?, &path.display().to_string(), Source::Profile)
    }

    pub fn raw(&self, key: &str) -> &str {
        &self.values[known(key).unwrap_or_else(|| panic!("unknown key {key}"))].0
    }

    pub fn source(&self, key: &str) -> Source {
        self.values[known(key).unwrap_or_else(|| panic!("unknown key {key}"))].1
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, expected: &'static str) -> Result<T, ConfigError> {
        let v = self.raw(key);
        v.parse().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: v.to_string(),
            expected,
        })
    }

    pub fn f64(&self, key: &str) -> Result<f64, ConfigError> {
        self.parse(key, "a number")
    }

    pub fn u64(&self, key: &str) -> Result<u64, ConfigError> {
        self.parse(key, "a non-negative integer")
    }

    pub fn usize(&self, key: &str) -> Result<usize, ConfigError> {
        self.parse(key, "a non-negative integer")
    }

    pub fn u32(&self, key: &str) -> Result<u32, ConfigError> {
        self.parse(key, "a non-negative integer")
    }

    pub fn bool(&self, key: &str) -> Result<bool, ConfigError> {
        self.parse(key, "true or false")
    }

    pub fn string(&self, key: &str) -> String {
        self.raw(key).to_string()
    }

    pub fn opt_path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn link_profile(&self) -> Result<LinkProfile, ConfigError> {
        let p = LinkProfile {
            delay_min_ms: self.f64("link.delay_min_ms")?,
            delay_max_ms: self.f64("link.delay_max_ms")?,
            jitter_mean_ms: self.f64("link.jitter_mean_ms")?,
            jitter_cap_ms: self.f64("link.jitter_cap_ms")?,
            bw_up_bps: self.f64("link.bw_up_mbps")? * 1e6,
            bw_down_bps: self.f64("link.bw_down_mbps")? * 1e6,
            loss_rate: self.f64("link.loss")?,
            seed: self.u64("link.seed")?,
        };
        p.validate().map_err(|e| ConfigError::BadValue {
            key: "link.*".into(),
            value: e.to_string(),
            expected: "a valid link profile",
        })?;
        Ok(p)
    }

    pub fn load_case(&self) -> Result<GridCase, ConfigError> {
        match self.opt_path("case.path") {
            None => Ok(case9()),
            Some(p) => read_case(&p).map_err(|e| ConfigError::Case(format!("{}: {e}", p.display()))),
        }
    }

    pub fn fault(&self) -> Result<FaultSpec, ConfigError> {
        let branch = match self.raw("fault.branch") {
            "" | "none" => None,
            _ => Some(self.u32("fault.branch")?),
        };
        let mut f = FaultSpec::new(
            self.u32("fault.bus")?,
            branch,
            self.f64("fault.t_fault")?,
            self.f64("fault.t_clear")?,
        );
        f.y_fault = Complex64::new(self.f64("fault.y_re")?, self.f64("fault.y_im")?);
        Ok(f)
    }

    pub fn sim_config(&self, freq_hz: f64) -> Result<SimulationConfig, ConfigError> {
        let mut cfg = SimulationConfig::new(freq_hz, self.f64("run.t_end")?);
        cfg.dt = self.f64("run.dt")?;
        Ok(cfg)
    }

    pub fn mode(&self) -> Result<RunMode, ConfigError> {
        match self.raw("run.mode") {
            "topology" => Ok(RunMode::Topology),
            "dsa" => Ok(RunMode::Dsa),
            other => Err(ConfigError::BadValue {
                key: "run.mode".into(),
                value: other.into(),
                expected: "topology or dsa",
            }),
        }
    }

    pub fn regions(&self, case: &GridCase) -> Result<Vec<RegionId>, ConfigError> {
        let raw = self.raw("run.regions");
        if raw.is_empty() {
            return Ok(case.regions().into_iter().collect());
        }
        raw.split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| ConfigError::BadValue {
                    key: "run.regions".into(),
                    value: raw.into(),
                    expected: "comma-separated region ids",
                })
            })
            .collect()
    }

    pub fn run_id(&self) -> Result<RunId, ConfigError> {
        Ok(RunId::from_seed(self.u64("run.seed")?))
    }

    pub fn manifest(&self, case: &GridCase) -> Result<RunManifest, ConfigError> {
        let mode = self.mode()?;
        let seed = self.u64("run.seed")?;
        Ok(RunManifest {
            run_id: self.run_id()?,
            expected_regions: self.regions(case)?.into_iter().collect(),
            fault: self.fault()?,
            sim_cfg: self.sim_config(case.freq_hz)?,
            mode,
            dsa: match mode {
                RunMode::Topology => None,
                RunMode::Dsa => Some(DsaParams {
                    n_raw: self.usize("dsa.n_raw")?,
                    k: self.usize("dsa.k")?,
                    seed,
                }),
            },
            deadline_s: self.f64("run.deadline_s")?,
        })
    }

    /// Serializes every key with its current value.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, (v, _))| format!("{k} = {v}\n")).collect()
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Profile => "profile",
            Source::Flag => "flag",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_the_5g_profile() {
        let c = Config::default();
        let p = c.link_profile().unwrap();
        assert_eq!(p, edgegrid_transport::link::default_5g_sa_profile());
        assert_eq!(c.fault().unwrap().cleared_branch, Some(4));
    }

    #[test]
    fn precedence_per_key() {
        let mut c = Config::default();
        c.merge_text("run.seed = 5\nlink.loss = 0.1\n", "cfg", Source::File)
            .unwrap();
        c.merge_text("link.loss = 0.2\n", "profile", Source::Profile).unwrap();
        c.set("run.seed", "9", Source::Flag).unwrap();
        // a later file layer never overrides a flag
        c.merge_text("run.seed = 6\n", "cfg", Source::File).unwrap();
        assert_eq!((c.raw("run.seed"), c.source("run.seed")), ("9", Source::Flag));
        assert_eq!((c.raw("link.loss"), c.source("link.loss")), ("0.2", Source::Profile));
        assert_eq!(c.source("dsa.k"), Source::Default);
    }

    #[test]
    fn rejects_unknown_and_misplaced_keys() {
        let mut c = Config::default();
        assert!(matches!(
            c.merge_text("run.sede = 1", "cfg", Source::File),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            c.merge_text("run.seed = 1", "p", Source::Profile),
            Err(ConfigError::NotALinkKey(_))
        ));
        assert!(matches!(
            c.merge_text("garbage", "cfg", Source::File),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        c.set("run.seed", "x", Source::Flag).unwrap();
        assert!(c.u64("run.seed").is_err());
    }

    #[test]
    fn infinite_bandwidth_and_no_cleared_branch() {
        let mut c = Config::default();
        c.set("link.bw_up_mbps", "inf", Source::Flag).unwrap();
        c.set("fault.branch", "none", Source::Flag).unwrap();
        assert!(c.link_profile().unwrap().bw_up_bps.is_infinite());
        assert_eq!(c.fault().unwrap().cleared_branch, None);
    }

    #[test]
    fn manifest_from_defaults() {
        let c = Config::default();
        let case = c.load_case().unwrap();
        let m = c.manifest(&case).unwrap();
        m.validate().unwrap();
        assert_eq!(m.expected_regions.len(), 3);
        assert_eq!(m.deadline_s, 30.0);
    }
}
