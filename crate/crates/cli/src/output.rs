use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use ren_core::Tensor;
use serde_json::Value;

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating directory {}", dir.display()))
}

fn fmt(v: f64) -> String {
    // shortest representation that round-trips
    format!("{v:?}")
}

/// Writes rows of `blocks` side by side, one comma-separated line per row.
pub fn write_csv(
    path: &Path,
    comments: &[String],
    header: &[String],
    blocks: &[&Tensor],
) -> Result<()> {
    let rows = blocks.first().map_or(0, |b| b.rows());
    assert!(
        blocks.iter().all(|b| b.rows() == rows),
        "blocks must have equal row counts"
    );
    let mut w = create(path)?;
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "{}", header.join(","))?;
    for i in 0..rows {
        let line: Vec<String> = blocks
            .iter()
            .flat_map(|b| b.row(i).iter().map(|&v| fmt(v)))
            .collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn columns(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn write_jsonl(path: &Path, records: &[Value]) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn format_f64s(v: &[f64]) -> String {
    v.iter().map(|&x| fmt(x)).collect::<Vec<_>>().join(",")
}
