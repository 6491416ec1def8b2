//! Flow-log ingestion.
//!
//! Two line formats are accepted:
//!
//! ```text
//! CSV:   timestamp_ms,src_ip,dst_ip,dst_port,protocol,packet_size
//! JSONL: {"ts":1540512000000,"src":"203.0.113.7","dst":"198.51.100.9","dport":23,"proto":"TCP","size":60}
//! ```
//!
//! Malformed lines never abort a parse; they are tallied in [`Rejects`] with
//! their line number and reason.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::io::{self, BufRead};
use std::net::{IpAddr, Ipv4Addr};
use std::str::FromStr;
use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Milliseconds since the Unix epoch, UTC.
pub type TimestampMs = i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "TCP")]
    Tcp,
    #[serde(rename = "UDP")]
    Udp,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Tcp => "TCP",
            Protocol::Udp => "UDP",
        })
    }
}

impl FromStr for Protocol {
    type Err = RejectReason;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("tcp") {
            Ok(Protocol::Tcp)
        } else if s.eq_ignore_ascii_case("udp") {
            Ok(Protocol::Udp)
        } else {
            Err(RejectReason::BadProtocol)
        }
    }
}

/// One packet-header observation from the darknet sensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FlowRecord {
    pub timestamp: TimestampMs,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub dst_port: u16,
    pub protocol: Protocol,
    pub packet_size: Option<u32>,
}

impl FlowRecord {
    /// Canonical CSV line, without the trailing newline.
    pub fn to_csv_line(&self) -> String {
        let size = self.packet_size.map(|s| s.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.timestamp, self.src_ip, self.dst_ip, self.dst_port, self.protocol, size
        )
    }

    pub fn parse_csv(line: &str) -> Result<FlowRecord, RejectReason> {
        let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split(',').collect();
        if fields.len() != 6 {
            return Err(RejectReason::FieldCount(fields.len()));
        }
        let timestamp = fields[0]
            .trim()
            .parse::<i64>()
            .map_err(|_| RejectReason::BadTimestamp)?;
        let src_ip = parse_ipv4(fields[1].trim())?;
        let dst_ip = parse_ipv4(fields[2].trim())?;
        let dst_port = parse_port(fields[3].trim())?;
        let protocol = fields[4].trim().parse()?;
        let size = fields[5].trim();
        let packet_size = if size.is_empty() {
            None
        } else {
            Some(size.parse::<u32>().map_err(|_| RejectReason::BadSize)?)
        };
        Ok(FlowRecord {
            timestamp,
            src_ip,
            dst_ip,
            dst_port,
            protocol,
            packet_size,
        })
    }

    pub fn parse_jsonl(line: &str) -> Result<FlowRecord, RejectReason> {
        #[derive(Deserialize)]
        struct Raw<'a> {
            ts: i64,
            #[serde(borrow)]
            src: &'a str,
            #[serde(borrow)]
            dst: &'a str,
            dport: i64,
            #[serde(borrow)]
            proto: &'a str,
            #[serde(default)]
            size: Option<u32>,
        }
        let raw: Raw<'_> = serde_json::from_str(line).map_err(|_| RejectReason::BadJson)?;
        if !(0..=65535).contains(&raw.dport) {
            return Err(RejectReason::PortOutOfRange);
        }
        Ok(FlowRecord {
            timestamp: raw.ts,
            src_ip: parse_ipv4(raw.src)?,
            dst_ip: parse_ipv4(raw.dst)?,
            dst_port: raw.dport as u16,
            protocol: raw.proto.parse()?,
            packet_size: raw.size,
        })
    }
}

fn parse_ipv4(s: &str) -> Result<Ipv4Addr, RejectReason> {
    match s.parse::<IpAddr>() {
        Ok(IpAddr::V4(v4)) => Ok(v4),
        Ok(IpAddr::V6(_)) => Err(RejectReason::Ipv6),
        Err(_) => Err(RejectReason::BadAddress),
    }
}

fn parse_port(s: &str) -> Result<u16, RejectReason> {
    let port: i64 = s.parse().map_err(|_| RejectReason::BadPort)?;
    u16::try_from(port).map_err(|_| RejectReason::PortOutOfRange)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    Csv,
    Jsonl,
}

impl FromStr for LogFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(LogFormat::Csv),
            "jsonl" | "json" => Ok(LogFormat::Jsonl),
            other => Err(format!("unknown log format `{other}` (expected csv or jsonl)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RejectReason {
    #[error("expected 6 fields, found {0}")]
    FieldCount(usize),
    #[error("invalid JSON record")]
    BadJson,
    #[error("invalid timestamp")]
    BadTimestamp,
    #[error("invalid IPv4 address")]
    BadAddress,
    #[error("IPv6 address not supported")]
    Ipv6,
    #[error("invalid destination port")]
    BadPort,
    #[error("destination port outside 0..=65535")]
    PortOutOfRange,
    #[error("protocol must be TCP or UDP")]
    BadProtocol,
    #[error("invalid packet size")]
    BadSize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reject {
    pub line: u64,
    pub reason: RejectReason,
}

/// Counter of skipped input lines. Only the first `MAX_KEPT` details are
/// retained; `count` is always exact.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Rejects {
    pub count: u64,
    pub details: Vec<Reject>,
}

impl Rejects {
    const MAX_KEPT: usize = 1000;

    fn record(&mut self, line: u64, reason: RejectReason) {
        self.count += 1;
        if self.details.len() < Self::MAX_KEPT {
            self.details.push(Reject { line, reason });
        }
    }

    pub fn ipv6(&self) -> usize {
        self.details
            .iter()
            .filter(|r| r.reason == RejectReason::Ipv6)
            .count()
    }
}

/// Streaming parser over a line-oriented reader.
///
/// Iterates `io::Result<FlowRecord>`: an `Err` is a fatal read error, bad lines
/// are skipped and counted in [`FlowReader::rejects`].
pub struct FlowReader<R> {
    reader: R,
    format: LogFormat,
    line_no: u64,
    buf: String,
    rejects: Rejects,
}

impl<R: BufRead> FlowReader<R> {
    pub fn new(reader: R, format: LogFormat) -> Self {
        FlowReader {
            reader,
            format,
            line_no: 0,
            buf: String::new(),
            rejects: Rejects::default(),
        }
    }

    pub fn rejects(&self) -> &Rejects {
        &self.rejects
    }

    pub fn into_rejects(self) -> Rejects {
        self.rejects
    }
}

impl<R: BufRead> Iterator for FlowReader<R> {
    type Item = io::Result<FlowRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e)),
            }
            self.line_no += 1;
            let line = self.buf.trim();
            if line.is_empty() {
                continue;
            }
            let parsed = match self.format {
                LogFormat::Csv => FlowRecord::parse_csv(line),
                LogFormat::Jsonl => FlowRecord::parse_jsonl(line),
            };
            match parsed {
                Ok(rec) => return Some(Ok(rec)),
                Err(reason) => self.rejects.record(self.line_no, reason),
            }
        }
    }
}

/// Parse a complete input into records plus the reject tally.
pub fn parse_flow_log<R: BufRead>(input: R, format: LogFormat) -> io::Result<(Vec<FlowRecord>, Rejects)> {
    let mut reader = FlowReader::new(input, format);
    let mut out = Vec::new();
    for rec in reader.by_ref() {
        out.push(rec?);
    }
    Ok((out, reader.into_rejects()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceStats {
    pub src_ip: Ipv4Addr,
    pub packet_count: u64,
    pub first_seen: TimestampMs,
    pub last_seen: TimestampMs,
}

pub fn source_stats(records: &[FlowRecord]) -> HashMap<Ipv4Addr, SourceStats> {
    let mut stats: HashMap<Ipv4Addr, SourceStats> = HashMap::new();
    for r in records {
        stats
            .entry(r.src_ip)
            .and_modify(|s| {
                s.packet_count += 1;
                s.first_seen = s.first_seen.min(r.timestamp);
                s.last_seen = s.last_seen.max(r.timestamp);
            })
            .or_insert(SourceStats {
                src_ip: r.src_ip,
                packet_count: 1,
                first_seen: r.timestamp,
                last_seen: r.timestamp,
            });
    }
    stats
}

/// Drop every record whose source sent fewer than `min_packets` packets
/// within `records`. Order of the survivors is preserved.
pub fn filter_low_volume_sources(records: &[FlowRecord], min_packets: u64) -> Vec<FlowRecord> {
    if min_packets <= 1 {
        return records.to_vec();
    }
    let mut counts: HashMap<Ipv4Addr, u64> = HashMap::with_capacity(records.len() / 4);
    for r in records {
        *counts.entry(r.src_ip).or_default() += 1;
    }
    records
        .iter()
        .filter(|r| counts[&r.src_ip] >= min_packets)
        .copied()
        .collect()
}

/// A record tagged with the index of the input stream it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tagged {
    pub stream: usize,
    pub record: FlowRecord,
}

/// Per-stream diagnostics collected by [`merge_streams`].
#[derive(Debug, Clone, Default)]
pub struct StreamReport {
    pub records: u64,
    pub rejects: Rejects,
}

type BoxedStream = Box<dyn Iterator<Item = io::Result<FlowRecord>> + Send>;

/// Merge independently parsed streams by timestamp.
///
/// Each stream is drained by its own worker thread into a bounded channel;
/// the heap merge here is the only synchronisation point. Streams that are
/// internally out of order stay so; the windower absorbs bounded lateness.
pub struct MergedStreams {
    receivers: Vec<mpsc::Receiver<io::Result<FlowRecord>>>,
    heap: BinaryHeap<Reverse<(TimestampMs, usize, u64)>>,
    heads: Vec<Option<FlowRecord>>,
    seq: u64,
    primed: bool,
    error: Option<io::Error>,
}

impl MergedStreams {
    pub fn new(streams: Vec<BoxedStream>) -> Self {
        let mut receivers = Vec::with_capacity(streams.len());
        for stream in streams {
            let (tx, rx) = mpsc::sync_channel(4096);
            thread::spawn(move || {
                for item in stream {
                    let stop = item.is_err();
                    if tx.send(item).is_err() || stop {
                        break;
                    }
                }
            });
            receivers.push(rx);
        }
        let n = receivers.len();
        MergedStreams {
            receivers,
            heap: BinaryHeap::new(),
            heads: vec![None; n],
            seq: 0,
            primed: false,
            error: None,
        }
    }

    fn pull(&mut self, stream: usize) {
        match self.receivers[stream].recv() {
            Ok(Ok(rec)) => {
                self.seq += 1;
                self.heap.push(Reverse((rec.timestamp, stream, self.seq)));
                self.heads[stream] = Some(rec);
            }
            Ok(Err(e)) => {
                self.error.get_or_insert(e);
                self.heads[stream] = None;
            }
            Err(_) => self.heads[stream] = None,
        }
    }
}

impl Iterator for MergedStreams {
    type Item = io::Result<Tagged>;

    fn next(&mut self) -> Option<Self::Item> {
        if !self.primed {
            self.primed = true;
            for i in 0..self.receivers.len() {
                self.pull(i);
            }
        }
        if let Some(e) = self.error.take() {
            return Some(Err(e));
        }
        let Reverse((_, stream, _)) = self.heap.pop()?;
        let record = self.heads[stream].take().expect("heap entry without head");
        self.pull(stream);
        Some(Ok(Tagged { stream, record }))
    }
}

/// Convenience wrapper: one [`FlowReader`] per input, merged by timestamp.
pub fn merge_streams<R>(inputs: Vec<R>, format: LogFormat) -> MergedStreams
where
    R: BufRead + Send + 'static,
{
    let streams = inputs
        .into_iter()
        .map(|r| Box::new(FlowReader::new(r, format)) as BoxedStream)
        .collect();
    MergedStreams::new(streams)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(ts: i64, src: [u8; 4], port: u16) -> FlowRecord {
        FlowRecord {
            timestamp: ts,
            src_ip: Ipv4Addr::from(src),
            dst_ip: Ipv4Addr::new(198, 51, 100, 9),
            dst_port: port,
            protocol: Protocol::Tcp,
            packet_size: Some(60),
        }
    }

    #[test]
    fn csv_field_mapping() {
        let r = FlowRecord::parse_csv("1540512000000,203.0.113.7,198.51.100.9,23,TCP,60").unwrap();
        assert_eq!(r.timestamp, 1_540_512_000_000);
        assert_eq!(r.src_ip, Ipv4Addr::new(203, 0, 113, 7));
        assert_eq!(r.dst_port, 23);
        assert_eq!(r.protocol, Protocol::Tcp);
        assert_eq!(r.packet_size, Some(60));
    }

    #[test]
    fn empty_size_is_none() {
        let r = FlowRecord::parse_csv("1,203.0.113.7,198.51.100.9,53,udp,").unwrap();
        assert_eq!(r.packet_size, None);
        assert_eq!(r.protocol, Protocol::Udp);
        assert_eq!(r.to_csv_line(), "1,203.0.113.7,198.51.100.9,53,UDP,");
    }

    #[test]
    fn empty_input() {
        let (recs, rejects) = parse_flow_log(&b""[..], LogFormat::Csv).unwrap();
        assert!(recs.is_empty());
        assert_eq!(rejects.count, 0);
    }

    #[test]
    fn port_out_of_range_rejected() {
        let input = "1540512000000,203.0.113.7,198.51.100.9,70000,TCP,60\n";
        let (recs, rejects) = parse_flow_log(input.as_bytes(), LogFormat::Csv).unwrap();
        assert!(recs.is_empty());
        assert_eq!(rejects.count, 1);
        assert_eq!(rejects.details[0].line, 1);
        assert_eq!(rejects.details[0].reason, RejectReason::PortOutOfRange);
    }

    #[test]
    fn ipv6_has_distinct_reason() {
        let input = "1,2001:db8::1,198.51.100.9,23,TCP,60\nnot,a,record\n1,203.0.113.7,198.51.100.9,23,TCP,60\n";
        let (recs, rejects) = parse_flow_log(input.as_bytes(), LogFormat::Csv).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(rejects.count, 2);
        assert_eq!(rejects.details[0].reason, RejectReason::Ipv6);
        assert_eq!(rejects.details[1].line, 2);
        assert_eq!(rejects.ipv6(), 1);
    }

    #[test]
    fn jsonl_records() {
        let input = concat!(
            r#"{"ts":1540512000000,"src":"203.0.113.7","dst":"198.51.100.9","dport":23,"proto":"TCP","size":60}"#,
            "\n",
            r#"{"ts":1540512000001,"src":"203.0.113.7","dst":"198.51.100.9","dport":2323,"proto":"tcp"}"#,
            "\n",
            r#"{"ts":1540512000002,"src":"203.0.113.7","dst":"198.51.100.9","dport":-1,"proto":"TCP"}"#,
            "\n"
        );
        let (recs, rejects) = parse_flow_log(input.as_bytes(), LogFormat::Jsonl).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].packet_size, None);
        assert_eq!(rejects.count, 1);
        assert_eq!(rejects.details[0].reason, RejectReason::PortOutOfRange);
    }

    #[test]
    fn filter_keeps_sources_at_threshold() {
        let mut records = vec![rec(0, [1, 1, 1, 1], 23), rec(1, [1, 1, 1, 1], 23)];
        records.extend((0..3).map(|i| rec(i, [2, 2, 2, 2], 445)));
        let out = filter_low_volume_sources(&records, 3);
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|r| r.src_ip == Ipv4Addr::new(2, 2, 2, 2)));
        assert_eq!(filter_low_volume_sources(&records, 1), records);
    }

    #[test]
    fn filter_drops_all_two_packet_sources() {
        let records: Vec<_> = (0..100u8)
            .flat_map(|i| [rec(0, [10, 0, 0, i], 80), rec(1, [10, 0, 0, i], 80)])
            .collect();
        // counting oracle: every source has 2 < 3 packets
        let stats = source_stats(&records);
        let expected = stats.values().filter(|s| s.packet_count >= 3).count();
        assert_eq!(expected, 0);
        assert!(filter_low_volume_sources(&records, 3).is_empty());
    }

    #[test]
    fn merge_orders_by_timestamp() {
        let a = "1,192.0.2.1,198.51.100.1,23,TCP,\n5,192.0.2.1,198.51.100.1,23,TCP,\n";
        let b = "2,192.0.2.2,198.51.100.1,80,TCP,\n3,192.0.2.2,198.51.100.1,80,TCP,\n9,192.0.2.2,198.51.100.1,80,TCP,\n";
        let merged: Vec<_> = merge_streams(vec![a.as_bytes(), b.as_bytes()], LogFormat::Csv)
            .map(|t| t.unwrap())
            .collect();
        let ts: Vec<_> = merged.iter().map(|t| t.record.timestamp).collect();
        assert_eq!(ts, vec![1, 2, 3, 5, 9]);
        assert_eq!(merged[0].stream, 0);
        assert_eq!(merged[1].stream, 1);
    }

    fn arb_record() -> impl Strategy<Value = FlowRecord> {
        (
            0i64..4_000_000_000_000,
            any::<u32>(),
            any::<u32>(),
            any::<u16>(),
            any::<bool>(),
            proptest::option::of(any::<u32>()),
        )
            .prop_map(|(ts, s, d, port, tcp, size)| FlowRecord {
                timestamp: ts,
                src_ip: Ipv4Addr::from(s),
                dst_ip: Ipv4Addr::from(d),
                dst_port: port,
                protocol: if tcp { Protocol::Tcp } else { Protocol::Udp },
                packet_size: size,
            })
    }

    proptest! {
        #[test]
        fn csv_round_trip(r in arb_record()) {
            let line = r.to_csv_line();
            let back = FlowRecord::parse_csv(&line).unwrap();
            prop_assert_eq!(back, r);
            prop_assert_eq!(back.to_csv_line(), line);
        }

        #[test]
        fn filter_idempotent_and_counts_match(
            srcs in proptest::collection::vec(0u8..12, 0..200),
            min in 1u64..6,
        ) {
            let records: Vec<_> = srcs.iter().enumerate()
                .map(|(i, s)| rec(i as i64, [10, 0, 0, *s], 80))
                .collect();
            let once = filter_low_volume_sources(&records, min);
            let twice = filter_low_volume_sources(&once, min);
            prop_assert_eq!(&once, &twice);
            let surviving: u64 = source_stats(&records)
                .values()
                .filter(|s| s.packet_count >= min)
                .map(|s| s.packet_count)
                .sum();
            prop_assert_eq!(once.len() as u64, surviving);
        }
    }
}
