#![allow(dead_code)]

use std::path::Path;

use edgegrid::config::{Config, Source};

pub const ZERO_PROFILE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../profiles/zero.conf");
pub const CASE3: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/case3.txt");
pub const CASE9: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/case9.txt");

/// Defaults with the store and logs inside `dir`.
pub fn config_in(dir: &Path) -> Config {
    let mut c = Config::default();
    c.set("store.root", dir.join("store").display().to_string(), Source::Flag)
        .unwrap();
    c.set("log.dir", dir.join("logs").display().to_string(), Source::Flag)
        .unwrap();
    c
}

pub fn zero_impairment(c: &mut Config) {
    c.load_profile(Path::new(ZERO_PROFILE)).unwrap();
}
