//! Run persistence: JSONL metrics, CSV export, and the run manifest.

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::trainer::StepMetrics;

pub const CSV_COLUMNS: [&str; 18] = [
    "step",
    "window_id",
    "finished",
    "mean_reward",
    "mean_response_length",
    "max_response_length",
    "policy_loss",
    "value_loss",
    "value_updated",
    "mean_abs_advantage",
    "clip_fraction",
    "tokens_generated",
    "policy_tokens",
    "value_tokens",
    "walltime",
    "cumulative_walltime",
    "first_minibatch_max_ratio_dev",
    "eval_success",
];

/// Appends one metrics record as a JSON line.
pub fn write_metrics_line<W: Write>(mut out: W, m: &StepMetrics) -> Result<()> {
    serde_json::to_writer(&mut out, m)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_metrics<R: BufRead>(input: R) -> Result<Vec<StepMetrics>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

fn csv_row(m: &StepMetrics) -> String {
    let eval = m.eval_success.map(|x| x.to_string()).unwrap_or_default();
    [
        m.step.to_string(),
        m.window_id.to_string(),
        m.finished.to_string(),
        m.mean_reward.to_string(),
        m.mean_response_length.to_string(),
        m.max_response_length.to_string(),
        m.policy_loss.to_string(),
        m.value_loss.to_string(),
        m.value_updated.to_string(),
        m.mean_abs_advantage.to_string(),
        m.clip_fraction.to_string(),
        m.tokens_generated.to_string(),
        m.policy_tokens.to_string(),
        m.value_tokens.to_string(),
        m.walltime.to_string(),
        m.cumulative_walltime.to_string(),
        m.first_minibatch_max_ratio_dev.to_string(),
        eval,
    ]
    .join(",")
}

/// Writes metrics as CSV. Floats use shortest round-trip formatting, so
/// parsing a cell recovers the exact value.
pub fn write_metrics_csv<W: Write>(mut out: W, metrics: &[StepMetrics]) -> Result<()> {
    writeln!(out, "{}", CSV_COLUMNS.join(","))?;
    for m in metrics {
        writeln!(out, "{}", csv_row(m))?;
    }
    Ok(())
}

/// Converts a metrics JSONL stream to CSV and returns the number of rows.
pub fn export_metrics<R: BufRead, W: Write>(input: R, out: W) -> Result<usize> {
    let metrics = read_metrics(input)?;
    write_metrics_csv(out, &metrics)?;
    Ok(metrics.len())
}

pub fn export_metrics_file(jsonl: &Path, csv: &Path) -> Result<usize> {
    let input = std::io::BufReader::new(std::fs::File::open(jsonl)?);
    let out = std::io::BufWriter::new(std::fs::File::create(csv)?);
    export_metrics(input, out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub started_at: u64,
    pub finished_at: u64,
    pub files: Vec<FileEntry>,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn begin(config_hash: String, seed: u64) -> Self {
        RunManifest {
            config_hash,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: unix_now(),
            finished_at: 0,
            files: Vec::new(),
        }
    }

    /// Records every regular file directly inside `dir` (sorted by name).
    pub fn finish(&mut self, dir: &Path) -> Result<()> {
        self.finished_at = unix_now();
        let mut files = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if !entry.file_type()?.is_file() || name == "manifest.json" {
                continue;
            }
            let bytes = std::fs::read(entry.path())?;
            files.push(FileEntry {
                path: name,
                bytes: bytes.len() as u64,
                sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
            });
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        self.files = files;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(step: u64) -> StepMetrics {
        StepMetrics {
            step,
            window_id: step,
            finished: 3,
            mean_reward: 1.0 / 3.0,
            mean_response_length: 0.1 + 0.2,
            max_response_length: 17,
            policy_loss: -1.234_567_890_123_456_7e-5,
            value_loss: 0.5,
            value_updated: true,
            mean_abs_advantage: std::f64::consts::PI,
            clip_fraction: 0.0,
            tokens_generated: 100,
            policy_tokens: 90,
            value_tokens: 40,
            walltime: 32,
            cumulative_walltime: 32 * (step + 1),
            first_minibatch_max_ratio_dev: 1e-300,
            eval_success: (step % 2 == 0).then_some(0.8125),
        }
    }

    fn parse_row(header: &[&str], row: &str) -> StepMetrics {
        let cells: Vec<&str> = row.split(',').collect();
        let mut obj = serde_json::Map::new();
        for (k, v) in header.iter().zip(cells) {
            let value = match v {
                "" => serde_json::Value::Null,
                "true" | "false" => serde_json::Value::Bool(v == "true"),
                _ => match v.parse::<i64>() {
                    Ok(i) => serde_json::json!(i),
                    Err(_) => serde_json::json!(v.parse::<f64>().unwrap()),
                },
            };
            obj.insert(k.to_string(), value);
        }
        serde_json::from_value(serde_json::Value::Object(obj)).unwrap()
    }

    #[test]
    fn three_lines_three_rows_and_exact_round_trip() {
        let ms: Vec<_> = (0..3).map(sample).collect();
        let mut jsonl = Vec::new();
        for m in &ms {
            write_metrics_line(&mut jsonl, m).unwrap();
        }
        let mut csv = Vec::new();
        assert_eq!(export_metrics(&jsonl[..], &mut csv).unwrap(), 3);
        let text = String::from_utf8(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        let header: Vec<&str> = lines[0].split(',').collect();
        assert_eq!(header, CSV_COLUMNS);
        for (row, m) in lines[1..].iter().zip(&ms) {
            let back = parse_row(&header, row);
            assert_eq!(&back, m);
            assert_eq!(back.policy_loss.to_bits(), m.policy_loss.to_bits());
        }
    }

    #[test]
    fn empty_input_gives_header_only() {
        let mut csv = Vec::new();
        assert_eq!(export_metrics(&b""[..], &mut csv).unwrap(), 0);
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let mut jsonl = Vec::new();
        write_metrics_line(&mut jsonl, &sample(0)).unwrap();
        jsonl.extend_from_slice(b"{not json}\n");
        match export_metrics(&jsonl[..], Vec::new()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn jsonl_floats_round_trip_bitwise() {
        let m = sample(1);
        let mut buf = Vec::new();
        write_metrics_line(&mut buf, &m).unwrap();
        let back = read_metrics(&buf[..]).unwrap();
        assert_eq!(back[0].mean_response_length.to_bits(), m.mean_response_length.to_bits());
    }

    #[test]
    fn manifest_inventories_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.txt"), b"hello").unwrap();
        std::fs::write(dir.path().join("a.txt"), b"").unwrap();
        let mut m = RunManifest::begin("abc".into(), 7);
        m.finish(dir.path()).unwrap();
        let names: Vec<_> = m.files.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(names, ["a.txt", "b.txt"]);
        assert_eq!(m.files[1].bytes, 5);
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        assert_eq!(RunManifest::load(&path).unwrap(), m);
    }
}
