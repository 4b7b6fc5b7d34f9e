//! Result rows, CSV output and the run manifest.
//!
//! Fixed CSV header `kind,seed,layer,flavour,metric,value,units`. The
//! `layer` column is an index column: the layer index for per-layer
//! metrics, the step index for loss traces, the sweep value R for
//! timing rows, the event index for marginal-likelihood trajectories,
//! and −1 where no index applies. Metric names come from the documented
//! closed vocabulary (see README).

use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct ResultRow {
    pub kind: String,
    pub seed: u64,
    pub layer: i64,
    pub flavour: String,
    pub metric: String,
    pub value: f64,
    pub units: String,
}

impl ResultRow {
    pub fn new(
        kind: &str,
        seed: u64,
        layer: i64,
        flavour: &str,
        metric: &str,
        value: f64,
        units: &str,
    ) -> Self {
        Self {
            kind: kind.into(),
            seed,
            layer,
            flavour: flavour.into(),
            metric: metric.into(),
            value,
            units: units.into(),
        }
    }
}

pub const CSV_HEADER: &str = "kind,seed,layer,flavour,metric,value,units";

pub fn rows_to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.17e},{}",
            row.kind, row.seed, row.layer, row.flavour, row.metric, row.value, row.units
        );
    }
    out
}

pub fn write_results(path: &str, rows: &[ResultRow]) -> anyhow::Result<()> {
    std::fs::write(path, rows_to_csv(rows))
        .map_err(|e| anyhow::anyhow!("cannot write results to {path}: {e}"))
}

/// Manifest written next to the CSV: effective config echo plus the
/// code version and run identity.
pub fn write_manifest(
    out_path: &str,
    kind: &str,
    seeds: &[u64],
    flavour: &str,
    config: &crate::config::ExperimentFile,
) -> anyhow::Result<()> {
    let manifest_path = format!("{out_path}.manifest.toml");
    let mut text = String::new();
    let _ = writeln!(text, "kind = {kind:?}");
    let _ = writeln!(text, "version = {:?}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(text, "seeds = {seeds:?}");
    let _ = writeln!(text, "flavour = {flavour:?}");
    let _ = writeln!(text);
    let _ = writeln!(text, "[config]");
    let echo = toml::to_string(config)
        .map_err(|e| anyhow::anyhow!("cannot serialize config echo: {e}"))?;
    // indent the echo under the [config] table by re-parsing is overkill;
    // nest it verbatim as its own document section
    let _ = writeln!(text, "# full effective configuration follows");
    for line in echo.lines() {
        if line.starts_with('[') {
            let _ = writeln!(text, "[config.{}]", &line[1..line.len() - 1]);
        } else if line.is_empty() {
            let _ = writeln!(text);
        } else {
            let _ = writeln!(text, "{line}");
        }
    }
    std::fs::write(&manifest_path, text)
        .map_err(|e| anyhow::anyhow!("cannot write manifest to {manifest_path}: {e}"))
}

/// Dump a matrix as a plain CSV grid next to the results file.
pub fn write_matrix_grid(path: &Path, m: &kfac_lab::Tensor) -> anyhow::Result<()> {
    let mut text = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.17e}")).collect();
        let _ = writeln!(text, "{}", row.join(","));
    }
    std::fs::write(path, text).map_err(|e| anyhow::anyhow!("cannot write {}: {e}", path.display()))
}
