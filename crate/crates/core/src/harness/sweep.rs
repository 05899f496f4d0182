//! Grid sweeps over training configurations, e.g. temperature x bank size.
//!
//! A grid file is flat `key = value` text like a train config, except values
//! may be comma lists; every multi-valued key becomes a sweep axis and the
//! cross product (in file order) defines the cells. Single-valued keys apply
//! to every cell.

use std::io::Write;
use std::path::Path;

use super::config::TrainConfig;
use super::train;
use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SweepGrid {
    /// Swept keys with their value lists, in file order.
    pub axes: Vec<(String, Vec<String>)>,
    /// Fixed overrides applied to every cell.
    pub fixed: Vec<(String, String)>,
}

impl SweepGrid {
    pub fn parse(text: &str) -> Result<Self> {
        let mut axes = Vec::new();
        let mut fixed = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse(format!(
                    "grid line {}: expected 'key = value[,value...]', got '{raw}'",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let values: Vec<String> = value.split(',').map(|v| v.trim().to_string()).collect();
            // Keys whose scalar values legitimately contain commas (lists)
            // cannot be swept; treat them as fixed.
            let listy = matches!(
                key.as_str(),
                "tau_c" | "lr_decay_epochs" | "anchor_scales" | "backbone_widths"
            );
            if values.len() > 1 && !listy {
                axes.push((key, values));
            } else {
                fixed.push((key, value.trim().to_string()));
            }
        }
        if axes.is_empty() && fixed.is_empty() {
            return Err(Error::Config("empty sweep grid".into()));
        }
        Ok(Self { axes, fixed })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// All cells in deterministic order (last axis fastest).
    pub fn cells(&self) -> Vec<Vec<(String, String)>> {
        let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (key, values) in &self.axes {
            let mut next = Vec::with_capacity(cells.len() * values.len());
            for cell in &cells {
                for v in values {
                    let mut c = cell.clone();
                    c.push((key.clone(), v.clone()));
                    next.push(c);
                }
            }
            cells = next;
        }
        cells
    }
}

/// Train and evaluate every grid cell; write one CSV row per cell. Failed
/// cells record their error and the sweep continues.
pub fn sweep(
    base: &TrainConfig,
    grid: &SweepGrid,
    train_data: &Dataset,
    eval_data: &Dataset,
    out_csv: &Path,
) -> Result<()> {
    let work_root = out_csv.with_extension("work");
    std::fs::create_dir_all(&work_root)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out_csv)?);
    writeln!(f, "config,ap50,ap75,ap,ar,status")?;
    for (i, cell) in grid.cells().into_iter().enumerate() {
        let label = if cell.is_empty() {
            "base".to_string()
        } else {
            cell.iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let run = || -> Result<crate::metrics::EvalReport> {
            let mut cfg = base.clone();
            for (k, v) in &grid.fixed {
                cfg.set(k, v)?;
            }
            for (k, v) in &cell {
                cfg.set(k, v)?;
            }
            let cell_dir = work_root.join(format!("cell_{i:03}"));
            let outcome = train(&cfg, train_data, None, &cell_dir, None)?;
            let report = super::evaluate_checkpoint(&outcome.last_checkpoint, eval_data, None)?;
            let _ = std::fs::remove_dir_all(&cell_dir);
            Ok(report)
        };
        match run() {
            Ok(r) => writeln!(
                f,
                "{label},{:.6},{:.6},{:.6},{:.6},ok",
                r.ap50, r.ap75, r.ap, r.ar
            )?,
            Err(e) => {
                log::warn!("sweep cell '{label}' failed: {e}");
                writeln!(f, "{label},,,,,error: {}", format!("{e}").replace(',', ";"))?
            }
        }
    }
    f.flush()?;
    let _ = std::fs::remove_dir_all(&work_root);
    Ok(())
}
