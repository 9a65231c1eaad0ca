//! Per-round records, byte accounting, bytes-to-accuracy summaries and the
//! CSV log format.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::Strategy;

/// One line of a run log. Byte counts are whole encoded blobs, headers included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub strategy: Strategy,
    pub seed: u64,
    pub server_accuracy: f64,
    pub mean_client_accuracy: f64,
    pub loss_logits: f64,
    pub loss_h: f64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    /// Uplink plus downlink, summed over rounds so far.
    pub cumulative_bytes: u64,
}

pub const CSV_COLUMNS: [&str; 10] = [
    "round",
    "strategy",
    "seed",
    "server_accuracy",
    "mean_client_accuracy",
    "loss_logits",
    "loss_h",
    "uplink_bytes",
    "downlink_bytes",
    "cumulative_bytes",
];

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RoundMetrics {
    pub server_accuracy: f64,
    pub mean_client_accuracy: f64,
    pub loss_logits: f64,
    pub loss_h: f64,
}

/// Appends records and keeps the running byte total.
#[derive(Debug, Clone)]
pub struct RunLedger {
    strategy: Strategy,
    seed: u64,
    records: Vec<RoundRecord>,
}

impl RunLedger {
    pub fn new(strategy: Strategy, seed: u64) -> Self {
        Self { strategy, seed, records: Vec::new() }
    }

    /// Sizes come from `payload_size_bits`; they are always whole bytes.
    pub fn record_round(&mut self, round: u32, uplink_bits: u64, downlink_bits: u64, m: RoundMetrics) -> &RoundRecord {
        debug_assert!(uplink_bits % 8 == 0 && downlink_bits % 8 == 0);
        let (up, down) = (uplink_bits / 8, downlink_bits / 8);
        let cumulative = self.records.last().map_or(0, |r| r.cumulative_bytes) + up + down;
        self.records.push(RoundRecord {
            round,
            strategy: self.strategy,
            seed: self.seed,
            server_accuracy: m.server_accuracy,
            mean_client_accuracy: m.mean_client_accuracy,
            loss_logits: m.loss_logits,
            loss_h: m.loss_h,
            uplink_bytes: up,
            downlink_bytes: down,
            cumulative_bytes: cumulative,
        });
        self.records.last().unwrap()
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<RoundRecord> {
        self.records
    }
}

/// Communication spent until a strategy first reached an accuracy level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub accuracy_threshold: f64,
    /// `None` when the threshold was never reached.
    pub bytes_to_threshold: Option<u64>,
    pub uplink_bytes_to_threshold: Option<u64>,
    pub downlink_bytes_to_threshold: Option<u64>,
    pub rounds_to_threshold: Option<u32>,
}

impl SummaryRow {
    pub fn reached(&self) -> bool {
        self.bytes_to_threshold.is_some()
    }
}

/// First-crossing summary of one run's records. Later dips do not matter and
/// nothing is interpolated.
pub fn summarize(records: &[RoundRecord], thresholds: &[f64]) -> Result<Vec<SummaryRow>> {
    let first = records.first().ok_or_else(|| Error::input("summarize", "no records"))?;
    if records.windows(2).any(|w| w[0].round >= w[1].round) {
        return Err(Error::input("summarize", "records must be sorted by round"));
    }
    Ok(thresholds
        .iter()
        .map(|&threshold| {
            let (mut up, mut down) = (0u64, 0u64);
            let mut hit = None;
            for r in records {
                up += r.uplink_bytes;
                down += r.downlink_bytes;
                if r.server_accuracy >= threshold {
                    hit = Some((r, up, down));
                    break;
                }
            }
            SummaryRow {
                strategy: first.strategy,
                accuracy_threshold: threshold,
                bytes_to_threshold: hit.map(|(r, _, _)| r.cumulative_bytes),
                uplink_bytes_to_threshold: hit.map(|(_, u, _)| u),
                downlink_bytes_to_threshold: hit.map(|(_, _, d)| d),
                rounds_to_threshold: hit.map(|(r, _, _)| r.round),
            }
        })
        .collect())
}

/// Mean over seeds of one strategy's summaries at one threshold. A mean is
/// reported only when every seed reached the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSummaryRow {
    pub strategy: Strategy,
    pub accuracy_threshold: f64,
    pub seeds: usize,
    pub seeds_reached: usize,
    pub mean_bytes_to_threshold: Option<f64>,
    pub mean_uplink_bytes_to_threshold: Option<f64>,
    pub mean_downlink_bytes_to_threshold: Option<f64>,
    pub mean_rounds_to_threshold: Option<f64>,
}

/// Averages per-seed summaries of a single strategy. Every inner list must
/// use the same thresholds in the same order.
pub fn mean_over_seeds(per_seed: &[Vec<SummaryRow>]) -> Result<Vec<MeanSummaryRow>> {
    let first = per_seed.first().ok_or_else(|| Error::input("mean_over_seeds", "no summaries"))?;
    for rows in per_seed {
        let same = rows.len() == first.len()
            && rows
                .iter()
                .zip(first)
                .all(|(a, b)| a.strategy == b.strategy && a.accuracy_threshold == b.accuracy_threshold);
        if !same {
            return Err(Error::input("mean_over_seeds", "summaries differ in strategy or thresholds"));
        }
    }
    let n = per_seed.len();
    Ok((0..first.len())
        .map(|i| {
            let column = |f: fn(&SummaryRow) -> Option<f64>| -> Option<f64> {
                let vals: Option<Vec<f64>> = per_seed.iter().map(|rows| f(&rows[i])).collect();
                vals.map(|v| v.iter().sum::<f64>() / n as f64)
            };
            MeanSummaryRow {
                strategy: first[i].strategy,
                accuracy_threshold: first[i].accuracy_threshold,
                seeds: n,
                seeds_reached: per_seed.iter().filter(|rows| rows[i].reached()).count(),
                mean_bytes_to_threshold: column(|r| r.bytes_to_threshold.map(|b| b as f64)),
                mean_uplink_bytes_to_threshold: column(|r| r.uplink_bytes_to_threshold.map(|b| b as f64)),
                mean_downlink_bytes_to_threshold: column(|r| r.downlink_bytes_to_threshold.map(|b| b as f64)),
                mean_rounds_to_threshold: column(|r| r.rounds_to_threshold.map(f64::from)),
            }
        })
        .collect())
}

pub fn write_records<W: Write>(records: &[RoundRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<RoundRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = rdr.headers().map_err(|e| parse_error(&e))?.clone();
    if headers.iter().ne(CSV_COLUMNS.iter().copied()) {
        return Err(Error::LogParse {
            line: 1,
            detail: format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>()),
        });
    }
    rdr.deserialize().map(|r| r.map_err(|e| parse_error(&e))).collect()
}

fn parse_error(e: &csv::Error) -> Error {
    Error::LogParse { line: e.position().map_or(0, |p| p.line()), detail: e.to_string() }
}

pub fn write_logs(records: &[RoundRecord], path: &Path) -> Result<()> {
    write_records(records, std::fs::File::create(path)?)
}

pub fn read_logs(path: &Path) -> Result<Vec<RoundRecord>> {
    read_records(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ledger(accs: &[f64], traffic: &[(u64, u64)]) -> Vec<RoundRecord> {
        let mut l = RunLedger::new(Strategy::Adald, 0);
        for (i, (&a, &(u, d))) in accs.iter().zip(traffic).enumerate() {
            l.record_round(i as u32, u * 8, d * 8, RoundMetrics { server_accuracy: a, ..Default::default() });
        }
        l.into_records()
    }

    #[test]
    fn cumulative_bytes() {
        let r = ledger(&[0.0, 0.0], &[(0, 0), (0, 0)]);
        assert_eq!(r[1].cumulative_bytes, 0);
        let r = ledger(&[0.0, 0.0], &[(10, 5), (10, 5)]);
        assert_eq!(r[0].cumulative_bytes, 15);
        assert_eq!(r[1].cumulative_bytes, 30);
    }

    #[test]
    fn first_crossing_wins() {
        let accs = [0.1, 0.3, 0.5, 0.6, 0.65, 0.72, 0.6, 0.8];
        let traffic = vec![(100, 10); accs.len()];
        let r = ledger(&accs, &traffic);
        let s = summarize(&r, &[0.7, 0.75, 0.9]).unwrap();
        assert_eq!(s[0].rounds_to_threshold, Some(5));
        assert_eq!(s[0].bytes_to_threshold, Some(r[5].cumulative_bytes));
        assert_eq!(s[0].uplink_bytes_to_threshold, Some(600));
        assert_eq!(s[0].downlink_bytes_to_threshold, Some(60));
        assert_eq!(s[1].rounds_to_threshold, Some(7));
        assert!(!s[2].reached());
        assert!(summarize(&[], &[0.5]).is_err());
    }

    #[test]
    fn seed_means_need_every_seed() {
        let a = summarize(&ledger(&[0.2, 0.8], &[(10, 1), (10, 1)]), &[0.5, 0.9]).unwrap();
        let b = summarize(&ledger(&[0.6, 0.7], &[(30, 3), (30, 3)]), &[0.5, 0.9]).unwrap();
        let m = mean_over_seeds(&[a.clone(), b]).unwrap();
        assert_eq!(m[0].mean_bytes_to_threshold, Some((22.0 + 33.0) / 2.0));
        assert_eq!(m[0].mean_uplink_bytes_to_threshold, Some(25.0));
        assert_eq!(m[0].mean_rounds_to_threshold, Some(0.5));
        assert_eq!((m[0].seeds, m[0].seeds_reached), (2, 2));
        assert_eq!(m[1].mean_bytes_to_threshold, None);
        assert_eq!(m[1].seeds_reached, 0);
        let single = mean_over_seeds(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single[0].mean_bytes_to_threshold, a[0].bytes_to_threshold.map(|b| b as f64));
        assert!(mean_over_seeds(&[]).is_err());
    }

    #[test]
    fn csv_round_trip_and_empty() {
        let r = ledger(&[0.125, 0.1 + 0.2], &[(3, 4), (5, 6)]);
        let mut buf = Vec::new();
        write_records(&r, &mut buf).unwrap();
        assert_eq!(read_records(buf.as_slice()).unwrap(), r);
        let mut empty = Vec::new();
        write_records(&[], &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty.clone()).unwrap().trim_end(), CSV_COLUMNS.join(","));
        assert!(read_records(empty.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn malformed_csv_reports_line() {
        let text = format!("{}\n0,adald,0,0.5,0.5,0,0,1,2,3\n1,adald,0,oops,0.5,0,0,1,2,6\n", CSV_COLUMNS.join(","));
        match read_records(text.as_bytes()) {
            Err(Error::LogParse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(read_records("a,b\n".as_bytes()), Err(Error::LogParse { line: 1, .. })));
    }
}
