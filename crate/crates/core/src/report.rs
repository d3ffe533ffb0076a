//! Machine-readable reports: a schema-stable JSON envelope that echoes the
//! configuration it was produced with.  Reports are byte-identical for the
//! same seed and config apart from the wall-clock field, which sits at the
//! top level so it can be stripped for comparisons.

use crate::error::Result;
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub suite: String,
    pub pass: bool,
    pub config: Value,
    pub metrics: Value,
    pub version: String,
    pub wall_clock_s: f64,
}

impl Report {
    pub fn new(suite: &str, pass: bool, config: Value, metrics: Value, wall: f64) -> Self {
        Report {
            suite: suite.to_string(),
            pass,
            config,
            metrics,
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_s: wall,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&json!({
            "suite": self.suite,
            "pass": self.pass,
            "config": self.config,
            "metrics": self.metrics,
            "version": self.version,
            "wall_clock_s": self.wall_clock_s,
        }))?)
    }

    /// The deterministic part (wall clock stripped): byte-identical for the
    /// same seed and config.
    pub fn to_canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&json!({
            "suite": self.suite,
            "pass": self.pass,
            "config": self.config,
            "metrics": self.metrics,
            "version": self.version,
        }))?)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_json_is_stable_and_untimed() {
        let mk = |wall: f64| {
            Report::new(
                "demo",
                true,
                json!({"seed": 42, "samples": 10}),
                json!({"worst": 0.25}),
                wall,
            )
        };
        let a = mk(0.1).to_canonical_json().unwrap();
        let b = mk(99.9).to_canonical_json().unwrap();
        assert_eq!(a, b);
        assert!(mk(0.1).to_json().unwrap().contains("wall_clock_s"));
    }
}
