//! In-process message fabric. Collectives move matrices between virtual
//! devices and append one transcript record per participating device.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_core::{Real, RealMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Gather,
    ReduceScatter,
}

/// Traffic of one device in one collective for one pattern.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRecord {
    pub device: usize,
    pub phase: Phase,
    pub pattern: usize,
    /// Key and value elements this device sent to peers.
    pub elements_sent: u64,
    /// Key and value elements this device received from peers.
    pub elements_received: u64,
    /// Size of the assembled key buffer (all heads) the collective operates on.
    pub gathered_elements: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommTranscript {
    pub records: Vec<CommRecord>,
}

impl CommTranscript {
    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_json_lines(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| Error::config(format!("transcript line: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }

    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &CommRecord> {
        self.records.iter().filter(move |r| r.phase == phase)
    }

    /// `(Σ sent, Σ received)` over all devices for `phase`.
    pub fn totals(&self, phase: Phase) -> (u64, u64) {
        self.phase(phase).fold((0, 0), |(s, r), rec| {
            (s + rec.elements_sent, r + rec.elements_received)
        })
    }

    pub fn find(&self, device: usize, phase: Phase, pattern: usize) -> Option<&CommRecord> {
        self.records
            .iter()
            .find(|r| r.device == device && r.phase == phase && r.pattern == pattern)
    }
}

/// Per-head sparsified keys and values (or their gradients).
#[derive(Clone, Debug, PartialEq)]
pub struct KvPayload<T: Real> {
    pub keys: Vec<RealMatrix<T>>,
    pub values: Vec<RealMatrix<T>>,
}

impl<T: Real> KvPayload<T> {
    fn elements(&self) -> u64 {
        self.keys
            .iter()
            .chain(&self.values)
            .map(|m| (m.rows() * m.cols()) as u64)
            .sum()
    }

    fn key_elements(&self) -> u64 {
        self.keys.iter().map(|m| (m.rows() * m.cols()) as u64).sum()
    }

    fn heads(&self) -> usize {
        self.keys.len()
    }
}

pub(crate) struct Fabric {
    transcript: CommTranscript,
}

impl Fabric {
    pub fn new() -> Self {
        Self {
            transcript: CommTranscript::default(),
        }
    }

    pub fn into_transcript(self) -> CommTranscript {
        self.transcript
    }

    /// Zero-traffic record for a device computing a pattern locally.
    pub fn record_local(&mut self, device: usize, phase: Phase, pattern: usize) {
        self.transcript.records.push(CommRecord {
            device,
            phase,
            pattern,
            elements_sent: 0,
            elements_received: 0,
            gathered_elements: 0,
        });
    }

    /// Concatenates members' payloads in group order; every member ends up
    /// with the same assembled buffers.
    pub fn all_gather<T: Real>(
        &mut self,
        pattern: usize,
        group: &[usize],
        payloads: &[KvPayload<T>],
    ) -> Result<KvPayload<T>> {
        debug_assert_eq!(group.len(), payloads.len());
        let heads = payloads.first().map_or(0, KvPayload::heads);
        let mut assembled = KvPayload {
            keys: Vec::with_capacity(heads),
            values: Vec::with_capacity(heads),
        };
        for h in 0..heads {
            let ks: Vec<_> = payloads.iter().map(|p| p.keys[h].clone()).collect();
            let vs: Vec<_> = payloads.iter().map(|p| p.values[h].clone()).collect();
            assembled.keys.push(RealMatrix::vstack(&ks)?);
            assembled.values.push(RealMatrix::vstack(&vs)?);
        }
        let total = assembled.elements();
        let peers = group.len() as u64 - 1;
        for (&device, p) in group.iter().zip(payloads) {
            let own = p.elements();
            self.transcript.records.push(CommRecord {
                device,
                phase: Phase::Gather,
                pattern,
                elements_sent: own * peers,
                elements_received: total - own,
                gathered_elements: assembled.key_elements(),
            });
        }
        Ok(assembled)
    }

    /// Sums members' full-size contributions and returns to each member the
    /// rows it owns. `rows[m][h]` is member `m`'s row count for head `h`, in
    /// the same order the buffers were gathered. Summation runs in group
    /// order.
    pub fn reduce_scatter<T: Real>(
        &mut self,
        pattern: usize,
        group: &[usize],
        contributions: &[KvPayload<T>],
        rows: &[Vec<usize>],
    ) -> Result<Vec<KvPayload<T>>> {
        debug_assert_eq!(group.len(), contributions.len());
        let heads = contributions.first().map_or(0, KvPayload::heads);
        let mut summed: KvPayload<T> = contributions[0].clone();
        for c in &contributions[1..] {
            for h in 0..heads {
                if c.keys[h].shape() != summed.keys[h].shape()
                    || c.values[h].shape() != summed.values[h].shape()
                {
                    return Err(Error::shape(
                        "reduce_scatter",
                        "contributions differ in shape",
                    ));
                }
                add_into(&mut summed.keys[h], &c.keys[h]);
                add_into(&mut summed.values[h], &c.values[h]);
            }
        }
        let total = summed.elements();
        let peers = group.len() as u64 - 1;
        let mut starts = vec![0usize; heads];
        let mut out = Vec::with_capacity(group.len());
        for (m, &device) in group.iter().enumerate() {
            let mut slice = KvPayload {
                keys: Vec::with_capacity(heads),
                values: Vec::with_capacity(heads),
            };
            for h in 0..heads {
                let len = rows[m][h];
                slice.keys.push(summed.keys[h].row_block(starts[h], len));
                slice
                    .values
                    .push(summed.values[h].row_block(starts[h], len));
                starts[h] += len;
            }
            let own = slice.elements();
            self.transcript.records.push(CommRecord {
                device,
                phase: Phase::ReduceScatter,
                pattern,
                elements_sent: total - own,
                elements_received: own * peers,
                gathered_elements: summed.key_elements(),
            });
            out.push(slice);
        }
        Ok(out)
    }
}

fn add_into<T: Real>(dst: &mut RealMatrix<T>, src: &RealMatrix<T>) {
    for (d, &s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *d = *d + s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload(rows: usize, fill: f64) -> KvPayload<f64> {
        KvPayload {
            keys: vec![RealMatrix::filled(rows, 2, fill)],
            values: vec![RealMatrix::filled(rows, 2, -fill)],
        }
    }

    #[test]
    fn gather_then_reduce_scatter_are_dual() {
        let mut fabric = Fabric::new();
        let parts = [payload(1, 1.0), payload(2, 2.0), payload(1, 3.0)];
        let assembled = fabric.all_gather(0, &[4, 5, 6], &parts).unwrap();
        assert_eq!(assembled.keys[0].rows(), 4);
        assert_eq!(assembled.keys[0].row(1), &[2.0, 2.0]);
        let contribs = vec![assembled.clone(), assembled.clone(), assembled];
        let rows = vec![vec![1], vec![2], vec![1]];
        let slices = fabric
            .reduce_scatter(0, &[4, 5, 6], &contribs, &rows)
            .unwrap();
        assert_eq!(slices[1].keys[0], RealMatrix::filled(2, 2, 6.0));
        let t = fabric.into_transcript();
        assert_eq!(t.totals(Phase::Gather), t.totals(Phase::ReduceScatter));
        let (s, r) = t.totals(Phase::Gather);
        assert_eq!(s, r);
        for dev in 4..7 {
            let g = t.find(dev, Phase::Gather, 0).unwrap();
            let rs = t.find(dev, Phase::ReduceScatter, 0).unwrap();
            assert_eq!(
                (g.elements_sent, g.elements_received),
                (rs.elements_received, rs.elements_sent)
            );
            assert_eq!(g.gathered_elements, 8);
        }
    }

    #[test]
    fn json_lines_roundtrip() {
        let mut fabric = Fabric::new();
        fabric.record_local(0, Phase::Gather, 1);
        fabric
            .all_gather(2, &[0, 1], &[payload(1, 1.0), payload(1, 2.0)])
            .unwrap();
        let t = fabric.into_transcript();
        let text = t.to_json_lines();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("\"phase\":\"gather\""));
        assert_eq!(CommTranscript::from_json_lines(&text).unwrap(), t);
    }
}
