use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{CellRecord, ExperimentConfig, RunRecord};
use crate::error::{Error, Result};

const FIXED_COLUMNS: [&str; 7] = [
    "bag_shot",
    "instance_shot",
    "labeled",
    "total_instances",
    "annotation_ratio",
    "annotation_pct",
    "failed_cells",
];
const VARIANT_COLUMNS: [&str; 6] = [
    "n",
    "instance_auc_mean",
    "instance_auc_std",
    "bag_auc_mean",
    "bag_auc_std",
    "alpha_mean",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantStats {
    pub variant: String,
    /// Successful repeats aggregated.
    pub n: usize,
    pub instance_auc_mean: Option<f64>,
    /// Sample standard deviation (zero for a single repeat).
    pub instance_auc_std: Option<f64>,
    pub bag_auc_mean: Option<f64>,
    pub bag_auc_std: Option<f64>,
    pub alpha_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub bag_shot: usize,
    pub instance_shot: usize,
    /// Mean labeled count over successful repeats.
    pub labeled: f64,
    pub total_instances: usize,
    pub annotation_ratio: f64,
    pub annotation_pct: String,
    pub failed_cells: usize,
    pub stats: Vec<VariantStats>,
}

/// One row per shot setting, one column group per variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub variants: Vec<String>,
    pub rows: Vec<TableRow>,
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(std))
}

/// `labeled / total` as a percentage, rounded to four decimals, trailing
/// zeros dropped.
fn format_pct(labeled: f64, total: usize) -> String {
    let pct = labeled * 100.0 / total as f64;
    format!("{}%", (pct * 1e4).round() / 1e4)
}

impl ReportTable {
    pub(super) fn aggregate(
        cfg: &ExperimentConfig,
        variants: &[String],
        cells: &[CellRecord],
        total: usize,
    ) -> Self {
        let mut rows = Vec::new();
        for &b in &cfg.bag_shots {
            for &i in &cfg.instance_shots {
                let group: Vec<&CellRecord> = cells
                    .iter()
                    .filter(|c| c.bag_shot == b && c.instance_shot == i)
                    .collect();
                let ok: Vec<&CellRecord> = group
                    .iter()
                    .copied()
                    .filter(|c| c.error.is_none())
                    .collect();
                let labeled = if ok.is_empty() {
                    0.0
                } else {
                    ok.iter().map(|c| c.labeled as f64).sum::<f64>() / ok.len() as f64
                };
                let stats = variants
                    .iter()
                    .map(|v| {
                        let reports: Vec<_> = ok
                            .iter()
                            .flat_map(|c| c.results.iter().filter(|r| &r.variant == v))
                            .map(|r| &r.report)
                            .collect();
                        let inst: Vec<f64> = reports
                            .iter()
                            .filter_map(|r| r.instance_auc.macro_mean)
                            .collect();
                        let bag: Vec<f64> = reports
                            .iter()
                            .filter_map(|r| r.bag_auc.macro_mean)
                            .collect();
                        let alpha: Vec<f64> = reports.iter().map(|r| r.alpha).collect();
                        let (im, is) = mean_std(&inst);
                        let (bm, bs) = mean_std(&bag);
                        VariantStats {
                            variant: v.clone(),
                            n: reports.len(),
                            instance_auc_mean: im,
                            instance_auc_std: is,
                            bag_auc_mean: bm,
                            bag_auc_std: bs,
                            alpha_mean: mean_std(&alpha).0,
                        }
                    })
                    .collect();
                rows.push(TableRow {
                    bag_shot: b,
                    instance_shot: i,
                    labeled,
                    total_instances: total,
                    annotation_ratio: labeled / total as f64,
                    annotation_pct: format_pct(labeled, total),
                    failed_cells: group.len() - ok.len(),
                    stats,
                });
            }
        }
        Self {
            variants: variants.to_vec(),
            rows,
        }
    }

    pub fn row(&self, bag_shot: usize, instance_shot: usize) -> Option<&TableRow> {
        self.rows
            .iter()
            .find(|r| r.bag_shot == bag_shot && r.instance_shot == instance_shot)
    }

    pub fn stats(
        &self,
        bag_shot: usize,
        instance_shot: usize,
        variant: &str,
    ) -> Option<&VariantStats> {
        self.row(bag_shot, instance_shot)?
            .stats
            .iter()
            .find(|s| s.variant == variant)
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        for v in &self.variants {
            h.extend(VARIANT_COLUMNS.iter().map(|c| format!("{v}_{c}")));
        }
        h
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![
                r.bag_shot.to_string(),
                r.instance_shot.to_string(),
                r.labeled.to_string(),
                r.total_instances.to_string(),
                r.annotation_ratio.to_string(),
                r.annotation_pct.clone(),
                r.failed_cells.to_string(),
            ];
            for s in &r.stats {
                rec.extend([
                    s.n.to_string(),
                    opt(s.instance_auc_mean),
                    opt(s.instance_auc_std),
                    opt(s.bag_auc_mean),
                    opt(s.bag_auc_std),
                    opt(s.alpha_mean),
                ]);
            }
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Per-variant series for plotting AUC against annotation ratio.
    pub fn write_plot_data(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut out = Vec::new();
        for (k, v) in self.variants.iter().enumerate() {
            let path = dir.join(format!("plot_{v}.csv"));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record([
                "annotation_ratio",
                "bag_shot",
                "instance_shot",
                "instance_auc_mean",
                "instance_auc_std",
                "bag_auc_mean",
                "bag_auc_std",
            ])?;
            for r in &self.rows {
                let s = &r.stats[k];
                w.write_record([
                    r.annotation_ratio.to_string(),
                    r.bag_shot.to_string(),
                    r.instance_shot.to_string(),
                    opt(s.instance_auc_mean),
                    opt(s.instance_auc_std),
                    opt(s.bag_auc_mean),
                    opt(s.bag_auc_std),
                ])?;
            }
            w.flush()?;
            out.push(path);
        }
        Ok(out)
    }
}

fn parse<T: FromStr>(field: &str, column: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::InvalidInput(format!("column {column}: cannot parse {field:?}")))
}

fn parse_opt(field: &str, column: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse(field, column).map(Some)
    }
}

/// Reads a table written by [`ReportTable::write_csv`].
pub fn load_table_csv(path: &Path) -> Result<ReportTable> {
    let mut r = csv::Reader::from_reader(crate::error::open(path)?);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.len() < FIXED_COLUMNS.len()
        || header[..FIXED_COLUMNS.len()] != FIXED_COLUMNS
        || !(header.len() - FIXED_COLUMNS.len()).is_multiple_of(VARIANT_COLUMNS.len())
    {
        return Err(Error::InvalidInput(format!(
            "{}: not a report table",
            path.display()
        )));
    }
    let variants: Vec<String> = header[FIXED_COLUMNS.len()..]
        .chunks(VARIANT_COLUMNS.len())
        .map(|g| {
            g[0].strip_suffix("_n")
                .map(str::to_string)
                .ok_or_else(|| Error::InvalidInput(format!("unexpected column {}", g[0])))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let mut stats = Vec::new();
        for (k, v) in variants.iter().enumerate() {
            let base = FIXED_COLUMNS.len() + k * VARIANT_COLUMNS.len();
            stats.push(VariantStats {
                variant: v.clone(),
                n: parse(f(base), "n")?,
                instance_auc_mean: parse_opt(f(base + 1), "instance_auc_mean")?,
                instance_auc_std: parse_opt(f(base + 2), "instance_auc_std")?,
                bag_auc_mean: parse_opt(f(base + 3), "bag_auc_mean")?,
                bag_auc_std: parse_opt(f(base + 4), "bag_auc_std")?,
                alpha_mean: parse_opt(f(base + 5), "alpha_mean")?,
            });
        }
        rows.push(TableRow {
            bag_shot: parse(f(0), "bag_shot")?,
            instance_shot: parse(f(1), "instance_shot")?,
            labeled: parse(f(2), "labeled")?,
            total_instances: parse(f(3), "total_instances")?,
            annotation_ratio: parse(f(4), "annotation_ratio")?,
            annotation_pct: f(5).to_string(),
            failed_cells: parse(f(6), "failed_cells")?,
            stats,
        });
    }
    Ok(ReportTable { variants, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    Csv,
    Json,
    #[default]
    All,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "all" => Ok(ReportFormat::All),
            other => Err(Error::Unknown {
                what: "report format",
                name: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::All => "all",
        })
    }
}

#[derive(Serialize)]
struct Metadata<'a> {
    record_hash: &'a str,
    wall_clock_secs: f64,
    finished_unix_secs: u64,
    host: String,
    os: &'static str,
    arch: &'static str,
    threads: usize,
    version: &'static str,
}

fn host_name() -> String {
    std::env::var("HOSTNAME")
        .ok()
        .or_else(|| std::fs::read_to_string("/etc/hostname").ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Writes the record and its tables under `dir`. Everything except
/// `metadata.json` is a pure function of the record.
pub fn emit_report(record: &RunRecord, format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let record_path = dir.join("record.json");
    std::fs::write(&record_path, serde_json::to_vec_pretty(record)?)?;
    written.push(record_path);
    if matches!(format, ReportFormat::Csv | ReportFormat::All) {
        let p = dir.join("report.csv");
        record.table.write_csv(&p)?;
        written.push(p);
        written.extend(record.table.write_plot_data(dir)?);
    }
    if matches!(format, ReportFormat::Json | ReportFormat::All) {
        let p = dir.join("report.json");
        std::fs::write(&p, serde_json::to_vec_pretty(&record.table)?)?;
        written.push(p);
    }
    let meta = Metadata {
        record_hash: &record.hash,
        wall_clock_secs: record.wall_clock_secs,
        finished_unix_secs: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        host: host_name(),
        os: std::env::consts::OS,
        arch: std::env::consts::ARCH,
        threads: rayon::current_num_threads(),
        version: env!("CARGO_PKG_VERSION"),
    };
    let p = dir.join("metadata.json");
    std::fs::write(&p, serde_json::to_vec_pretty(&meta)?)?;
    written.push(p);
    Ok(written)
}
