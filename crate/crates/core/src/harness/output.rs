use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::{ExperimentConfig, HarnessError, MetricsRecord};

pub const SCHEMA_VERSION: u32 = 1;

/// Accuracy of every client at one point in training.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Evaluation {
    pub round: u32,
    pub per_client: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// `round,client_id,train_loss,test_balanced_acc,sampled_block`, one row
/// per round and client. Cells without a value are empty; a missing
/// sampled block is -1.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("round,client_id,train_loss,test_balanced_acc,sampled_block\n");
    for r in records {
        for c in 0..r.train_loss.len() {
            let loss = r.train_loss[c].map(|v| v.to_string()).unwrap_or_default();
            let acc = r.test_balanced_acc.as_ref().map(|a| a[c].to_string()).unwrap_or_default();
            let block = r.sampled_block[c].map(|l| l as i64).unwrap_or(-1);
            let _ = writeln!(out, "{},{c},{loss},{acc},{block}", r.round);
        }
    }
    out
}

pub fn build_id() -> String {
    match option_env!("FESVIBS_BUILD_ID") {
        Some(id) => id.to_string(),
        None => format!("fesvibs-core {}", env!("CARGO_PKG_VERSION")),
    }
}

pub fn summary_json(config: &ExperimentConfig, init: &Evaluation, last: &Evaluation, records: &[MetricsRecord]) -> serde_json::Value {
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut histogram = vec![0usize; config.model.sample_limit];
    for r in records {
        for (h, v) in histogram.iter_mut().zip(&r.block_histogram) {
            *h += v;
        }
    }
    json!({
        "schema_version": SCHEMA_VERSION,
        "variant": config.variant,
        "config_hash": config.hash(),
        "config": config,
        "rounds_completed": records.len(),
        "init": init,
        "final": last,
        "sampled_block_histogram": histogram,
        "metadata": { "build": build_id(), "created_unix": created },
    })
}

/// Polyline plot of mean training loss and mean accuracy per round.
pub fn learning_curve_svg(records: &[MetricsRecord]) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let losses: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| {
            let v: Vec<f64> = r.train_loss.iter().flatten().copied().collect();
            (!v.is_empty()).then(|| (r.round as f64, v.iter().sum::<f64>() / v.len() as f64))
        })
        .collect();
    let accs: Vec<(f64, f64)> = records.iter().filter_map(|r| r.mean_acc.map(|a| (r.round as f64, a))).collect();
    let max_round = records.iter().map(|r| r.round).max().unwrap_or(1).max(1) as f64;
    let max_loss = losses.iter().map(|p| p.1).fold(1e-9, f64::max);
    let x = |r: f64| pad + (w - 2.0 * pad) * r / max_round;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * v;
    let line = |pts: &[(f64, f64)], scale: f64| -> String {
        pts.iter().map(|&(r, v)| format!("{:.1},{:.1}", x(r), y(v / scale))).collect::<Vec<_>>().join(" ")
    };
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n");
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(s, "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", h - pad, w - pad, h - pad);
    let _ = writeln!(s, "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>", h - pad);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">round</text>", w / 2.0, h - 8.0);
    let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"#c0392b\" points=\"{}\"/>", line(&losses, max_loss));
    let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"#2471a3\" points=\"{}\"/>", line(&accs, 1.0));
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" fill=\"#c0392b\">train loss (max {max_loss:.3})</text>", pad);
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" fill=\"#2471a3\">mean balanced accuracy</text>", w / 2.0);
    s.push_str("</svg>\n");
    s
}

/// Writes `metrics.csv`, `summary.json` and optionally `learning_curve.svg`
/// into `dir`. Files written before a failure are removed.
pub fn write_outputs(
    dir: &Path,
    config: &ExperimentConfig,
    records: &[MetricsRecord],
    init: &Evaluation,
    last: &Evaluation,
    emit_plots: bool,
) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io { path: dir.into(), source })?;
    let mut files = vec![
        ("metrics.csv", metrics_csv(records)),
        ("summary.json", serde_json::to_string_pretty(&summary_json(config, init, last, records)).expect("json") + "\n"),
    ];
    if emit_plots {
        files.push(("learning_curve.svg", learning_curve_svg(records)));
    }
    let mut written = Vec::new();
    for (name, content) in files {
        let path = dir.join(name);
        if let Err(source) = std::fs::write(&path, content) {
            for p in &written {
                let _ = std::fs::remove_file(p);
            }
            return Err(HarnessError::Io { path, source });
        }
        written.push(path);
    }
    Ok(written)
}
