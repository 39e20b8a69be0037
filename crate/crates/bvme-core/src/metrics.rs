//! Metrics stream records.
//!
//! Each run writes one JSON object per line to `metrics.jsonl`: an `eval`
//! record per evaluation point and a `train` record per gradient iteration.
//! Serialization is deterministic (fixed field order, shortest round-trip
//! floats), so identical runs produce byte-identical streams.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{BvmeError, Result};

/// One evaluation point on the learning curve.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalRecord {
    pub kind: String,
    pub run_id: String,
    pub env_steps: u64,
    pub success_rate: f64,
    pub mean_return: f64,
    /// TD loss averaged over train iterations since the previous eval point.
    pub td: f64,
    /// Bandwidth penalty term averaged the same way.
    pub bvme: f64,
    /// Mean per-agent-step KL averaged the same way.
    pub mean_kl: f64,
}

impl EvalRecord {
    pub fn new(run_id: &str, env_steps: u64) -> EvalRecord {
        EvalRecord {
            kind: "eval".to_string(),
            run_id: run_id.to_string(),
            env_steps,
            success_rate: 0.0,
            mean_return: 0.0,
            td: 0.0,
            bvme: 0.0,
            mean_kl: 0.0,
        }
    }
}

/// One gradient iteration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainRecord {
    pub kind: String,
    pub run_id: String,
    pub iteration: u64,
    pub env_steps: u64,
    pub td: f64,
    pub bvme: f64,
    pub group: f64,
    pub total: f64,
    pub mean_kl: f64,
    pub grad_norm_pre_clip: f64,
    pub grad_norm_post_clip: f64,
}

/// Line-buffered JSONL writer.
#[derive(Debug)]
pub struct MetricsWriter {
    file: std::io::BufWriter<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<MetricsWriter> {
        let file = std::fs::File::create(path)?;
        Ok(MetricsWriter { file: std::io::BufWriter::new(file) })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| BvmeError::Io(format!("metrics serialize: {e}")))?;
        writeln!(self.file, "{line}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

/// Parses every `eval` record from a metrics stream.
pub fn read_eval_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| BvmeError::Io(format!("metrics parse: {e}")))?;
        if v.get("kind").and_then(|k| k.as_str()) == Some("eval") {
            let rec: EvalRecord =
                serde_json::from_value(v).map_err(|e| BvmeError::Io(format!("metrics parse: {e}")))?;
            out.push(rec);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writer_emits_one_line_per_record_and_reader_filters_eval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        let mut e = EvalRecord::new("run-a", 0);
        e.success_rate = 0.5;
        w.append(&e).unwrap();
        let t = TrainRecord {
            kind: "train".into(),
            run_id: "run-a".into(),
            iteration: 1,
            env_steps: 3,
            td: 0.2,
            bvme: 0.01,
            group: 0.0,
            total: 0.21,
            mean_kl: 1.5,
            grad_norm_pre_clip: 2.0,
            grad_norm_post_clip: 2.0,
        };
        w.append(&t).unwrap();
        w.flush().unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let evals = read_eval_records(&path).unwrap();
        assert_eq!(evals.len(), 1);
        assert_eq!(evals[0], e);
    }

    #[test]
    fn serialization_is_deterministic() {
        let e = EvalRecord::new("run-b", 2000);
        let a = serde_json::to_string(&e).unwrap();
        let b = serde_json::to_string(&e).unwrap();
        assert_eq!(a, b);
    }
}
