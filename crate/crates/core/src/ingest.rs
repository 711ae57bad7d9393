//! Time-tag streams and coincidence classification.
//!
//! Every laser pulse opens a frame and starts a 14-bit, 25 ns TAC ramp.
//! Both beam-splitter outputs land on the same SPAD array, one of them
//! after a 6 ns detour, so within a frame a pair of detections separated
//! by ~0 ns is a bunching event and a pair separated by ~6 ns is an
//! antibunching event.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! offset 0  magic    "MRHT"
//! offset 4  version  u16
//! offset 6  n_pixels u8
//! offset 7  reserved u8 (zero)
//! then 11-byte records: pixel u8, frame u64, tac_bin u16
//! ```

use crate::error::{invalid, Error, Result};
use crate::model::{Branch, DetectorArray, PixelPair};
use crate::montecarlo::CountMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};

pub const MAGIC: [u8; 4] = *b"MRHT";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 8;
pub const RECORD_LEN: usize = 11;
pub const TAC_BINS: u32 = 1 << 14;
pub const TAC_RANGE_NS: f64 = 25.0;

/// Two same-frame hits on one pixel closer than this many TAC bins (3 ns,
/// half the detour) would need a number-resolving detector.
pub const SAME_PIXEL_MIN_SEPARATION: u16 = 1966;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeTagRecord {
    pub pixel: u8,
    pub frame: u64,
    pub tac_bin: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeTagStream {
    pub n_pixels: u8,
    pub records: Vec<TimeTagRecord>,
}

pub fn encode_timetags(n_pixels: u8, records: &[TimeTagRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * records.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(n_pixels);
    out.push(0);
    for r in records {
        out.push(r.pixel);
        out.extend_from_slice(&r.frame.to_le_bytes());
        out.extend_from_slice(&r.tac_bin.to_le_bytes());
    }
    out
}

pub fn write_timetags<W: Write>(mut w: W, n_pixels: u8, records: &[TimeTagRecord]) -> Result<()> {
    w.write_all(&encode_timetags(n_pixels, records))?;
    Ok(())
}

/// Decodes a binary stream. A zero-length input is an empty stream.
pub fn parse_timetags(bytes: &[u8]) -> Result<TimeTagStream> {
    if bytes.is_empty() {
        return Ok(TimeTagStream {
            n_pixels: 0,
            records: Vec::new(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedRecord { offset: 0 });
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic, expected \"MRHT\"".into(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported format version {version}"),
        });
    }
    let n_pixels = bytes[6];
    let body = &bytes[HEADER_LEN..];
    let whole = body.len() / RECORD_LEN * RECORD_LEN;
    if whole != body.len() {
        return Err(Error::TruncatedRecord {
            offset: HEADER_LEN + whole,
        });
    }
    let mut records = Vec::with_capacity(body.len() / RECORD_LEN);
    let mut seen: HashMap<(u64, u8), u16> = HashMap::new();
    for (idx, chunk) in body.chunks_exact(RECORD_LEN).enumerate() {
        let offset = HEADER_LEN + idx * RECORD_LEN;
        let pixel = chunk[0];
        let frame = u64::from_le_bytes(chunk[1..9].try_into().expect("8-byte slice"));
        let tac_bin = u16::from_le_bytes([chunk[9], chunk[10]]);
        let record = TimeTagRecord {
            pixel,
            frame,
            tac_bin,
        };
        check_record(&record, n_pixels, offset, &mut seen)?;
        records.push(record);
    }
    Ok(TimeTagStream { n_pixels, records })
}

fn check_record(
    r: &TimeTagRecord,
    n_pixels: u8,
    offset: usize,
    seen: &mut HashMap<(u64, u8), u16>,
) -> Result<()> {
    if r.pixel >= n_pixels {
        return Err(Error::Format {
            offset,
            reason: format!("pixel {} outside {n_pixels}-pixel array", r.pixel),
        });
    }
    if u32::from(r.tac_bin) >= TAC_BINS {
        return Err(Error::Format {
            offset: offset + 9,
            reason: format!("TAC bin {} exceeds 14-bit range", r.tac_bin),
        });
    }
    if let Some(prev) = seen.insert((r.frame, r.pixel), r.tac_bin) {
        if prev.abs_diff(r.tac_bin) < SAME_PIXEL_MIN_SEPARATION {
            return Err(Error::Format {
                offset,
                reason: format!(
                    "second hit on pixel {} in frame {} within {} bins of the first",
                    r.pixel, r.frame, SAME_PIXEL_MIN_SEPARATION
                ),
            });
        }
    }
    Ok(())
}

/// Writes records as CSV with header `pixel,frame,tac_bin`.
pub fn write_timetags_csv<W: Write>(w: W, records: &[TimeTagRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads the CSV form; `offset` in errors is the byte position of the line.
pub fn parse_timetags_csv<R: Read>(r: R, n_pixels: u8) -> Result<TimeTagStream> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let headers = rd.headers()?.clone();
    let mut records = Vec::new();
    let mut seen = HashMap::new();
    for row in rd.records() {
        let row = row.map_err(|e| Error::Format {
            offset: e.position().map(|p| p.byte() as usize).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let offset = row.position().map(|p| p.byte() as usize).unwrap_or(0);
        let record: TimeTagRecord = row.deserialize(Some(&headers)).map_err(|e| Error::Format {
            offset,
            reason: e.to_string(),
        })?;
        check_record(&record, n_pixels, offset, &mut seen)?;
        records.push(record);
    }
    Ok(TimeTagStream { n_pixels, records })
}

/// Software coincidence windows on the absolute TAC separation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoincidenceWindows {
    pub bunching_center_ns: f64,
    pub antibunching_center_ns: f64,
    pub half_width_ns: f64,
    pub tac_bin_width_ns: f64,
}

impl Default for CoincidenceWindows {
    fn default() -> Self {
        CoincidenceWindows {
            bunching_center_ns: 0.0,
            antibunching_center_ns: 6.0,
            half_width_ns: 0.5,
            tac_bin_width_ns: TAC_RANGE_NS / TAC_BINS as f64,
        }
    }
}

impl CoincidenceWindows {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.bunching_center_ns >= 0.0 && self.bunching_center_ns.is_finite()) {
            problems.push("bunching_center_ns must be non-negative".to_string());
        }
        for (name, v) in [
            ("antibunching_center_ns", self.antibunching_center_ns),
            ("half_width_ns", self.half_width_ns),
            ("tac_bin_width_ns", self.tac_bin_width_ns),
        ] {
            if !(v.is_finite() && v > 0.0) {
                problems.push(format!("{name} must be positive, got {v}"));
            }
        }
        if !((self.antibunching_center_ns - self.bunching_center_ns).abs()
            > 2.0 * self.half_width_ns)
        {
            problems.push("bunching and antibunching windows overlap".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(invalid(problems.join("; ")))
        }
    }

    /// TAC-bin separation nearest to the antibunching delay (3932 by default).
    pub fn antibunching_offset_bins(&self) -> i64 {
        (self.antibunching_center_ns / self.tac_bin_width_ns).round() as i64
    }

    pub fn bunching_offset_bins(&self) -> i64 {
        (self.bunching_center_ns / self.tac_bin_width_ns).round() as i64
    }

    pub fn classify(&self, bin_separation: u16) -> Option<Branch> {
        let dt = f64::from(bin_separation) * self.tac_bin_width_ns;
        if (dt - self.bunching_center_ns).abs() <= self.half_width_ns {
            Some(Branch::Bunching)
        } else if (dt - self.antibunching_center_ns).abs() <= self.half_width_ns {
            Some(Branch::Antibunching)
        } else {
            None
        }
    }
}

/// Pair tallies; `bunching + antibunching + masked_dropped + ignored == total_pairs`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoincidenceSummary {
    pub total_pairs: u64,
    pub bunching: u64,
    pub antibunching: u64,
    pub masked_dropped: u64,
    pub ignored: u64,
}

impl CoincidenceSummary {
    fn merge(mut self, o: CoincidenceSummary) -> Self {
        self.total_pairs += o.total_pairs;
        self.bunching += o.bunching;
        self.antibunching += o.antibunching;
        self.masked_dropped += o.masked_dropped;
        self.ignored += o.ignored;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coincidences {
    pub antibunching: CountMatrix,
    pub bunching: CountMatrix,
    pub summary: CoincidenceSummary,
}

struct Partial {
    a: CountMatrix,
    b: CountMatrix,
    summary: CoincidenceSummary,
}

/// Builds `C^A` and `C^B` from a record stream. Input order does not matter.
pub fn coincidence_matrices(
    records: &[TimeTagRecord],
    windows: &CoincidenceWindows,
    array: &DetectorArray,
) -> Result<Coincidences> {
    windows.validate()?;
    let n = array.n_pixels();
    if let Some(r) = records.iter().find(|r| usize::from(r.pixel) >= n) {
        return Err(Error::PixelOutOfRange {
            index: r.pixel.into(),
            n_pixels: n,
        });
    }
    let mut sorted = records.to_vec();
    sorted.par_sort_unstable_by_key(|r| (r.frame, r.tac_bin, r.pixel));

    let mut frames = Vec::new();
    let mut start = 0;
    for idx in 1..=sorted.len() {
        if idx == sorted.len() || sorted[idx].frame != sorted[start].frame {
            frames.push(start..idx);
            start = idx;
        }
    }

    let empty = || Partial {
        a: CountMatrix::for_array(Branch::Antibunching, array),
        b: CountMatrix::for_array(Branch::Bunching, array),
        summary: CoincidenceSummary::default(),
    };
    let result = frames
        .par_iter()
        .fold(empty, |mut acc, range| {
            let frame = &sorted[range.clone()];
            for (x, first) in frame.iter().enumerate() {
                for second in &frame[x + 1..] {
                    acc.summary.total_pairs += 1;
                    let sep = first.tac_bin.abs_diff(second.tac_bin);
                    let pair = PixelPair::new(first.pixel.into(), second.pixel.into());
                    let (matrix, tally) = match windows.classify(sep) {
                        Some(Branch::Antibunching) => (&mut acc.a, &mut acc.summary.antibunching),
                        Some(Branch::Bunching) => (&mut acc.b, &mut acc.summary.bunching),
                        None => {
                            acc.summary.ignored += 1;
                            continue;
                        }
                    };
                    if matrix.add(pair, 1).is_ok() {
                        *tally += 1;
                    } else {
                        acc.summary.masked_dropped += 1;
                    }
                }
            }
            acc
        })
        .reduce(empty, |mut x, y| {
            x.a.merge(&y.a);
            x.b.merge(&y.b);
            x.summary = x.summary.merge(y.summary);
            x
        });
    Ok(Coincidences {
        antibunching: result.a,
        bunching: result.b,
        summary: result.summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn array() -> DetectorArray {
        DetectorArray::uniform(8, 9.85, 1.7, 3.5).unwrap()
    }

    fn rec(pixel: u8, frame: u64, tac_bin: u16) -> TimeTagRecord {
        TimeTagRecord {
            pixel,
            frame,
            tac_bin,
        }
    }

    #[test]
    fn empty_stream() {
        assert!(parse_timetags(&[]).unwrap().records.is_empty());
        assert!(parse_timetags(&encode_timetags(8, &[]))
            .unwrap()
            .records
            .is_empty());
    }

    #[test]
    fn single_record_layout() {
        let bytes = encode_timetags(8, &[rec(3, 17, 3932)]);
        assert_eq!(bytes.len(), HEADER_LEN + RECORD_LEN);
        assert_eq!(&bytes[..4], b"MRHT");
        assert_eq!(bytes[HEADER_LEN], 3);
        assert_eq!(&bytes[HEADER_LEN + 1..HEADER_LEN + 9], &17u64.to_le_bytes());
        assert_eq!(&bytes[HEADER_LEN + 9..], &3932u16.to_le_bytes());
        let s = parse_timetags(&bytes).unwrap();
        assert_eq!(s.n_pixels, 8);
        assert_eq!(s.records, vec![rec(3, 17, 3932)]);
    }

    #[test]
    fn truncated_and_corrupt_records_report_offsets() {
        let mut bytes = encode_timetags(8, &[rec(1, 0, 5), rec(2, 0, 5)]);
        bytes.pop();
        assert!(
            matches!(parse_timetags(&bytes), Err(Error::TruncatedRecord { offset }) if offset == HEADER_LEN + RECORD_LEN)
        );
        let bytes = encode_timetags(8, &[rec(1, 0, 5), rec(9, 0, 5)]);
        assert!(
            matches!(parse_timetags(&bytes), Err(Error::Format { offset, .. }) if offset == HEADER_LEN + RECORD_LEN)
        );
        let bytes = encode_timetags(8, &[rec(1, 0, 16384)]);
        assert!(
            matches!(parse_timetags(&bytes), Err(Error::Format { offset, .. }) if offset == HEADER_LEN + 9)
        );
        let mut bytes = encode_timetags(8, &[]);
        bytes[0] = b'X';
        assert!(matches!(
            parse_timetags(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            parse_timetags(b"MRH"),
            Err(Error::TruncatedRecord { offset: 0 })
        ));
    }

    #[test]
    fn same_pixel_double_hit_is_rejected() {
        let bytes = encode_timetags(8, &[rec(4, 2, 100), rec(4, 2, 101)]);
        assert!(matches!(parse_timetags(&bytes), Err(Error::Format { .. })));
        // the same pixel after the 6 ns detour is a valid antibunching partner
        let bytes = encode_timetags(8, &[rec(4, 2, 100), rec(4, 2, 4032)]);
        assert_eq!(parse_timetags(&bytes).unwrap().records.len(), 2);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let recs = vec![rec(0, 1, 10), rec(7, 1, 3942)];
        let mut buf = Vec::new();
        write_timetags_csv(&mut buf, &recs).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("pixel,frame,tac_bin\n"));
        assert_eq!(parse_timetags_csv(&buf[..], 8).unwrap().records, recs);
        let bad = b"pixel,frame,tac_bin\n1,2,3\n1,x,3\n";
        assert!(matches!(
            parse_timetags_csv(&bad[..], 8),
            Err(Error::Format { .. })
        ));
        let bad = b"pixel,frame,tac_bin\n9,2,3\n";
        assert!(matches!(
            parse_timetags_csv(&bad[..], 8),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn window_arithmetic() {
        let w = CoincidenceWindows::default();
        w.validate().unwrap();
        assert_eq!(w.antibunching_offset_bins(), 3932);
        assert!((3932.0 * w.tac_bin_width_ns - 6.0).abs() < 5e-4);
        assert_eq!(w.classify(0), Some(Branch::Bunching));
        assert_eq!(w.classify(3932), Some(Branch::Antibunching));
        assert_eq!(w.classify(1500), None);
        let overlapping = CoincidenceWindows {
            half_width_ns: 3.5,
            ..w
        };
        assert!(overlapping.validate().is_err());
    }

    #[test]
    fn classification_examples() {
        let w = CoincidenceWindows::default();
        let c = coincidence_matrices(&[rec(2, 9, 700), rec(5, 9, 700)], &w, &array()).unwrap();
        assert_eq!(c.bunching.get(PixelPair::new(2, 5)), Some(1));
        assert_eq!(c.antibunching.total(), 0);
        let c =
            coincidence_matrices(&[rec(5, 9, 700), rec(2, 9, 700 + 3932)], &w, &array()).unwrap();
        assert_eq!(c.antibunching.get(PixelPair::new(2, 5)), Some(1));
        // different frames never pair
        let c = coincidence_matrices(&[rec(2, 9, 700), rec(5, 10, 700)], &w, &array()).unwrap();
        assert_eq!(c.summary.total_pairs, 0);
    }

    #[test]
    fn masked_pairs_are_tallied() {
        let w = CoincidenceWindows::default();
        let c = coincidence_matrices(&[rec(3, 1, 50), rec(4, 1, 52)], &w, &array()).unwrap();
        assert_eq!(c.summary.masked_dropped, 1);
        assert_eq!(c.bunching.total(), 0);
    }

    proptest! {
        #[test]
        fn permutation_invariance_and_conservation(
            raw in prop::collection::vec((0u8..8, 0u64..6, 0u16..16384), 0..60),
            seed in any::<u64>()
        ) {
            let w = CoincidenceWindows::default();
            let recs: Vec<_> = raw.iter().map(|&(p, f, t)| rec(p, f, t)).collect();
            let base = coincidence_matrices(&recs, &w, &array()).unwrap();
            let mut shuffled = recs.clone();
            let mut s = seed;
            for i in (1..shuffled.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            let other = coincidence_matrices(&shuffled, &w, &array()).unwrap();
            prop_assert_eq!(&base, &other);
            let sm = base.summary;
            prop_assert_eq!(sm.bunching + sm.antibunching + sm.masked_dropped + sm.ignored, sm.total_pairs);
            let mut per_frame = HashMap::new();
            for r in &recs { *per_frame.entry(r.frame).or_insert(0u64) += 1; }
            let expected: u64 = per_frame.values().map(|&k| k * (k - 1) / 2).sum();
            prop_assert_eq!(sm.total_pairs, expected);
        }

        #[test]
        fn binary_round_trip(raw in prop::collection::vec((0u8..8, any::<u64>(), 0u16..16384), 0..200)) {
            // distinct frames keep the double-hit rule out of the way
            let recs: Vec<_> = raw.iter().enumerate().map(|(k, &(p, _, t))| rec(p, k as u64, t)).collect();
            let bytes = encode_timetags(8, &recs);
            prop_assert_eq!(parse_timetags(&bytes).unwrap().records, recs);
        }
    }
}
