//! Run reports: named scalar metrics plus everything needed to reproduce them.

use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub command: String,
    pub seed: u64,
    pub dataset_hash: String,
    pub metrics: BTreeMap<String, f64>,
    pub checkpoints: BTreeMap<String, String>,
    pub config: BTreeMap<String, String>,
    pub notes: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn new(command: &str, seed: u64) -> Self {
        Self { command: command.to_string(), seed, ..Default::default() }
    }

    pub fn metric(&mut self, name: &str, value: f64) -> &mut Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    pub fn note(&mut self, name: &str, value: impl ToString) -> &mut Self {
        self.notes.insert(name.to_string(), value.to_string());
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn json_roundtrip_is_lossless(vals in proptest::collection::vec(-1e300f64..1e300, 0..8), seed in any::<u64>()) {
            let mut r = MetricReport::new("evaluate", seed);
            for (i, v) in vals.iter().enumerate() {
                r.metric(&format!("m{i}"), *v);
            }
            r.note("k", "v");
            r.checkpoints.insert("denoiser".into(), "ab".into());
            let back = MetricReport::from_json(&r.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, r);
        }
    }
}
