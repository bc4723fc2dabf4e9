//! Saliency and attention maps recorded for one probe sentence.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Task;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub task: Option<Task>,
    pub probe_tokens: Vec<String>,
    /// One saliency row per training epoch; empty without fixations.
    pub epoch_saliency: Vec<Vec<f64>>,
    /// Output steps by input positions.
    pub attention: Vec<Vec<f64>>,
    pub output_tokens: Vec<String>,
    /// Decoding stopped at the length limit instead of at end-of-sentence.
    pub truncated: bool,
}

impl AttentionTrace {
    pub fn check(&self) -> Result<()> {
        let n = self.probe_tokens.len();
        for (e, u) in self.epoch_saliency.iter().enumerate() {
            let sum: f64 = u.iter().sum();
            if u.len() != n || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!(
                    "saliency row {e} does not sum to 1 over {n} tokens"
                )));
            }
        }
        for (i, row) in self.attention.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.len() != n || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!(
                    "attention row {i} does not sum to 1 over {n} positions"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(origin, e.line(), e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_is_exact() {
        let t = AttentionTrace {
            task: Some(Task::Sentcomp),
            probe_tokens: vec!["a".into(), "b".into(), "c".into()],
            epoch_saliency: vec![vec![0.1, 0.2, 0.7], vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]],
            attention: vec![vec![0.3, 0.3, 0.4]],
            output_tokens: vec!["a".into()],
            truncated: false,
        };
        t.check().unwrap();
        assert_eq!(AttentionTrace::from_json(&t.to_json(), "mem").unwrap(), t);
    }

    #[test]
    fn bad_rows_rejected() {
        let t = AttentionTrace {
            probe_tokens: vec!["a".into(), "b".into()],
            attention: vec![vec![0.3, 0.3]],
            ..Default::default()
        };
        assert!(t.check().is_err());
    }
}
