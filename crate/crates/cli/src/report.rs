//! CSV writing with the metadata comment line every output carries.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

/// A CSV table rendered in memory: `# config_hash=<hex> seed=<n>`, then
/// the header, then rows.
pub struct CsvTable {
    writer: csv::Writer<Vec<u8>>,
}

impl CsvTable {
    pub fn new(config_hash: &str, seed: u64, header: &[&str]) -> Result<Self> {
        let mut buf = format!("# config_hash={config_hash} seed={seed}\n").into_bytes();
        buf.reserve(4096);
        let mut writer = csv::WriterBuilder::new().from_writer(buf);
        writer.write_record(header)?;
        Ok(CsvTable { writer })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        Ok(())
    }

    pub fn into_bytes(self) -> Result<Vec<u8>> {
        self.writer.into_inner().map_err(|e| anyhow::anyhow!("flushing csv: {}", e.error()))
    }

    pub fn write(self, path: &Path) -> Result<()> {
        let bytes = self.into_bytes()?;
        fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
    }
}

/// Formats an optional float, leaving the cell empty when absent.
pub fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Splits a CSV written by [`CsvTable`] into its metadata line and records.
pub fn parse(text: &str) -> Result<(String, Vec<String>, Vec<Vec<String>>)> {
    let (meta, body) = text.split_once('\n').context("empty csv")?;
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let header = reader.headers()?.iter().map(String::from).collect();
    let rows = reader
        .records()
        .map(|r| r.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((meta.to_string(), header, rows))
}
