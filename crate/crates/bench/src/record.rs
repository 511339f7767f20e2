use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::BenchError;

/// Version tag written as the first column of every CSV row.
pub const CSV_VERSION: &str = "bench_v1";

pub const CSV_HEADER: [&str; 12] = [
    CSV_VERSION,
    "kernel",
    "n",
    "d",
    "heads",
    "world_size",
    "wall_ms_med",
    "wall_ms_min",
    "wall_ms_max",
    "repeats",
    "measured_macs",
    "seed",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Dense,
    Dilated,
}

impl std::fmt::Display for Kernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Kernel::Dense => "dense",
            Kernel::Dilated => "dilated",
        })
    }
}

/// Timing of one `(kernel, n)` point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub kernel: Kernel,
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub world_size: usize,
    pub wall_ms_med: f64,
    pub wall_ms_min: f64,
    pub wall_ms_max: f64,
    pub repeats: usize,
    pub measured_macs: u64,
    pub seed: u64,
}

pub fn write_csv<W: Write>(records: &[BenchRecord], out: W) -> Result<(), BenchError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            CSV_VERSION.to_string(),
            r.kernel.to_string(),
            r.n.to_string(),
            r.d.to_string(),
            r.heads.to_string(),
            r.world_size.to_string(),
            format!("{:.4}", r.wall_ms_med),
            format!("{:.4}", r.wall_ms_min),
            format!("{:.4}", r.wall_ms_max),
            r.repeats.to_string(),
            r.measured_macs.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses CSV produced by [`write_csv`], rejecting other versions.
pub fn read_csv(text: &str) -> Result<Vec<BenchRecord>, BenchError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(BenchError::Format(format!(
            "unexpected CSV header: {header:?}"
        )));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or_default();
        if field(0) != CSV_VERSION {
            return Err(BenchError::Format(format!("row version {:?}", field(0))));
        }
        let num = |i: usize| -> Result<f64, BenchError> {
            field(i).parse().map_err(|_| {
                BenchError::Format(format!("column {} is not a number", CSV_HEADER[i]))
            })
        };
        let kernel = match field(1) {
            "dense" => Kernel::Dense,
            "dilated" => Kernel::Dilated,
            other => return Err(BenchError::Format(format!("unknown kernel {other:?}"))),
        };
        out.push(BenchRecord {
            kernel,
            n: num(2)? as usize,
            d: num(3)? as usize,
            heads: num(4)? as usize,
            world_size: num(5)? as usize,
            wall_ms_med: num(6)?,
            wall_ms_min: num(7)?,
            wall_ms_max: num(8)?,
            repeats: num(9)? as usize,
            measured_macs: field(10)
                .parse()
                .map_err(|_| BenchError::Format("measured_macs is not an integer".into()))?,
            seed: field(11)
                .parse()
                .map_err(|_| BenchError::Format("seed is not an integer".into()))?,
        });
    }
    Ok(out)
}

pub fn write_json<W: Write>(records: &[BenchRecord], mut out: W) -> Result<(), BenchError> {
    serde_json::to_writer_pretty(&mut out, records)?;
    writeln!(out)?;
    Ok(())
}
