//! Seeded synthetic darknet traffic with planted campaigns and known ground
//! truth.
//!
//! Each campaign owns a pool of source addresses. During its active
//! intervals every scheduled source sends one session per period: the
//! campaign's port template (or the source's variant), cycled to the drawn
//! packet count, with jittered gaps. One-shot noise sources hit uniformly
//! random ports; optional scanners send a handful of random ports.

pub mod catalog;
mod scenario;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};
use std::net::Ipv4Addr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{FlowRecord, Protocol, TimestampMs};
use crate::window::{WindowConfig, HOUR_MS, MINUTE_MS};

pub use scenario::parse_scenario;

/// 2018-10-26T00:00:00Z
pub const DEFAULT_START_MS: TimestampMs = 1_540_512_000_000;

const CAMPAIGN_BLOCK: (Ipv4Addr, u8) = (Ipv4Addr::new(198, 18, 0, 0), 15);
const NOISE_BLOCK: (Ipv4Addr, u8) = (Ipv4Addr::new(100, 64, 0, 0), 10);
const MIMIC_BLOCK: (Ipv4Addr, u8) = (Ipv4Addr::new(100, 127, 0, 0), 16);
const DARKNET: (Ipv4Addr, u8) = (Ipv4Addr::new(203, 0, 113, 0), 24);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("campaign `{campaign}`: {msg}")]
    Campaign { campaign: String, msg: String },
    #[error("{0}")]
    Scenario(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Range32 {
    pub lo: u32,
    pub hi: u32,
}

impl Range32 {
    pub const fn new(lo: u32, hi: u32) -> Self {
        Range32 { lo, hi }
    }

    pub const fn exactly(n: u32) -> Self {
        Range32 { lo: n, hi: n }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        rng.gen_range(self.lo..=self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub fraction: f64,
    pub ports: Vec<u16>,
}

/// Minutes from scenario start, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start_min: u64,
    pub end_min: u64,
}

impl Interval {
    pub fn hours(start: u64, end: u64) -> Self {
        Interval {
            start_min: start * 60,
            end_min: end * 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSpec {
    pub name: String,
    pub ports: Vec<u16>,
    /// Per-source alternatives to `ports`; the remainder uses `ports`.
    pub variants: Vec<Variant>,
    pub sources: usize,
    /// Packets per session; `None` sends each template once.
    pub packets: Option<Range32>,
    pub active: Vec<Interval>,
    pub period_min: u32,
    /// Gap between consecutive packets of a session, seconds.
    pub jitter_s: Range32,
    /// Sources scheduled per period; defaults to the whole pool.
    pub concurrency: Option<usize>,
    /// Fraction of the scheduled set replaced by fresh pool sources each period.
    pub churn: f64,
    pub subnet: Option<(Ipv4Addr, u8)>,
    /// Fraction of the pool drawn from outside the campaign subnet.
    pub mimic_fraction: f64,
    pub protocol: Protocol,
}

impl CampaignSpec {
    pub fn new(name: &str, ports: &[u16], sources: usize) -> Self {
        CampaignSpec {
            name: name.to_string(),
            ports: ports.to_vec(),
            variants: Vec::new(),
            sources,
            packets: None,
            active: Vec::new(),
            period_min: 60,
            jitter_s: Range32::new(1, 30),
            concurrency: None,
            churn: 0.0,
            subnet: None,
            mimic_fraction: 0.0,
            protocol: Protocol::Tcp,
        }
    }

    pub fn variant(mut self, fraction: f64, ports: &[u16]) -> Self {
        self.variants.push(Variant {
            fraction,
            ports: ports.to_vec(),
        });
        self
    }

    pub fn active_hours(mut self, start: u64, end: u64) -> Self {
        self.active.push(Interval::hours(start, end));
        self
    }

    pub fn packets(mut self, lo: u32, hi: u32) -> Self {
        self.packets = Some(Range32::new(lo, hi));
        self
    }

    pub fn churn(mut self, churn: f64, concurrency: usize) -> Self {
        self.churn = churn;
        self.concurrency = Some(concurrency);
        self
    }

    fn err(&self, msg: impl Into<String>) -> SimError {
        SimError::Campaign {
            campaign: self.name.clone(),
            msg: msg.into(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.sources < 1 {
            return Err(self.err("source pool must hold at least one address"));
        }
        if self.ports.is_empty() || self.variants.iter().any(|v| v.ports.is_empty()) {
            return Err(self.err("port templates must not be empty"));
        }
        let share: f64 = self.variants.iter().map(|v| v.fraction).sum();
        if self.variants.iter().any(|v| !(0.0..=1.0).contains(&v.fraction)) || share > 1.0 + 1e-9 {
            return Err(self.err("variant fractions must lie in [0, 1] and sum to at most 1"));
        }
        for pair in self.active.windows(2) {
            if pair[1].start_min < pair[0].end_min {
                return Err(self.err("active intervals must be ordered and non-overlapping"));
            }
        }
        if self.active.iter().any(|i| i.end_min <= i.start_min) {
            return Err(self.err("empty active interval"));
        }
        if self.period_min == 0 {
            return Err(self.err("period must be positive"));
        }
        if self.packets.is_some_and(|p| p.lo == 0 || p.lo > p.hi) || self.jitter_s.lo > self.jitter_s.hi {
            return Err(self.err("bad range"));
        }
        if !(0.0..=1.0).contains(&self.churn) || !(0.0..=1.0).contains(&self.mimic_fraction) {
            return Err(self.err("churn and mimic fraction must lie in [0, 1]"));
        }
        if self.concurrency.is_some_and(|k| k == 0 || k > self.sources) {
            return Err(self.err("concurrency must lie in [1, sources]"));
        }
        if let Some((_, len)) = self.subnet {
            if len > 32 || (1u64 << (32 - len)) < self.sources as u64 + 1 {
                return Err(self.err("subnet too small for the source pool"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub start_ms: TimestampMs,
    pub duration_min: u64,
    /// One-shot noise packets per minute.
    pub noise_rate: f64,
    /// New random-port scanner sources per hour.
    pub scanner_rate: f64,
    pub scanner_packets: Range32,
    pub scanner_ports: (u16, u16),
    pub campaigns: Vec<CampaignSpec>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            seed: 1,
            start_ms: DEFAULT_START_MS,
            duration_min: 48 * 60,
            noise_rate: 0.0,
            scanner_rate: 0.0,
            scanner_packets: Range32::new(3, 8),
            scanner_ports: (1, 65535),
            campaigns: Vec::new(),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.duration_min == 0 {
            return Err(SimError::Scenario("duration must be positive".into()));
        }
        if !(self.noise_rate >= 0.0 && self.scanner_rate >= 0.0) {
            return Err(SimError::Scenario("rates must be non-negative".into()));
        }
        if self.scanner_packets.lo == 0 || self.scanner_packets.lo > self.scanner_packets.hi || self.scanner_ports.0 > self.scanner_ports.1 {
            return Err(SimError::Scenario("bad scanner range".into()));
        }
        let mut names = BTreeSet::new();
        for c in &self.campaigns {
            c.validate()?;
            if !names.insert(&c.name) {
                return Err(SimError::Scenario(format!("duplicate campaign `{}`", c.name)));
            }
        }
        let pool: usize = self.campaigns.iter().filter(|c| c.subnet.is_none()).map(|c| c.sources).sum();
        if pool as u64 >= 1 << (32 - CAMPAIGN_BLOCK.1) {
            return Err(SimError::Scenario("campaign pools exceed the campaign address block".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CampaignTruth {
    pub sources: usize,
    pub packets: usize,
    pub windows: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub origin_ms: Option<TimestampMs>,
    pub window_length_min: u32,
    pub window_step_min: u32,
    pub campaigns: BTreeMap<String, CampaignTruth>,
    /// Campaign sources only; any other source is noise.
    pub sources: BTreeMap<Ipv4Addr, String>,
    pub noise_sources: usize,
    pub scanner_sources: usize,
}

impl GroundTruth {
    pub fn label(&self, ip: Ipv4Addr) -> &str {
        self.sources.get(&ip).map(String::as_str).unwrap_or("noise")
    }

    pub fn members_of<'a>(&'a self, campaign: &'a str) -> impl Iterator<Item = Ipv4Addr> + 'a {
        self.sources.iter().filter(move |(_, c)| c.as_str() == campaign).map(|(ip, _)| *ip)
    }
}

fn block_addr(block: (Ipv4Addr, u8), offset: u64) -> Ipv4Addr {
    let size = 1u64 << (32 - block.1);
    Ipv4Addr::from(u32::from(block.0).wrapping_add((offset % size) as u32))
}

fn darknet_addr(rng: &mut ChaCha8Rng) -> Ipv4Addr {
    block_addr(DARKNET, rng.gen_range(1..255))
}

fn cycled(template: &[u16], n: usize) -> Vec<u16> {
    template.iter().copied().cycle().take(n).collect()
}

fn size(rng: &mut ChaCha8Rng) -> Option<u32> {
    Some(rng.gen_range(40..=74))
}

struct CampaignPlan {
    pool: Vec<Ipv4Addr>,
    template: Vec<usize>,
}

fn plan_campaign(spec: &CampaignSpec, base: u64, rng: &mut ChaCha8Rng, mimic_base: &mut u64) -> CampaignPlan {
    let n = spec.sources;
    let mimics = (spec.mimic_fraction * n as f64).round() as usize;
    let mut pool: Vec<Ipv4Addr> = (0..n)
        .map(|k| match spec.subnet {
            Some(net) => block_addr(net, k as u64 + 1),
            None => block_addr(CAMPAIGN_BLOCK, base + k as u64 + 1),
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for &k in order.iter().take(mimics) {
        *mimic_base += 1;
        pool[k] = block_addr(MIMIC_BLOCK, *mimic_base);
    }
    // variant 0 is the base template; variants are dealt out in exact shares
    let mut template = vec![0usize; n];
    order.shuffle(rng);
    let mut next = 0;
    for (v, var) in spec.variants.iter().enumerate() {
        let count = (var.fraction * n as f64).round() as usize;
        for &k in order.iter().skip(next).take(count) {
            template[k] = v + 1;
        }
        next += count;
    }
    CampaignPlan { pool, template }
}

/// Generate the scenario's records, sorted by time, and its ground truth.
pub fn generate(scenario: &Scenario) -> Result<(Vec<FlowRecord>, GroundTruth), SimError> {
    scenario.validate()?;
    let end_ms = scenario.start_ms + scenario.duration_min as i64 * MINUTE_MS;
    let mut records = Vec::new();
    let mut truth = GroundTruth {
        seed: scenario.seed,
        ..Default::default()
    };
    let mut base = 0u64;
    let mut mimic_base = 0u64;
    let mut spans: BTreeMap<String, Vec<TimestampMs>> = BTreeMap::new();

    for (ci, spec) in scenario.campaigns.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        rng.set_stream(ci as u64 + 1);
        let plan = plan_campaign(spec, base, &mut rng, &mut mimic_base);
        if spec.subnet.is_none() {
            // round pools up to whole /24s
            base += (spec.sources as u64).div_ceil(256) * 256;
        }
        let templates: Vec<&[u16]> = std::iter::once(spec.ports.as_slice())
            .chain(spec.variants.iter().map(|v| v.ports.as_slice()))
            .collect();
        let k = spec.concurrency.unwrap_or(spec.sources);
        let replace = (spec.churn * k as f64).round() as usize;
        let mut scheduled: std::collections::VecDeque<usize> = (0..k).collect();
        let mut next_source = k % spec.sources;
        let mut first_slot = true;
        let mut used = BTreeSet::new();
        let mut times = Vec::new();
        let mut packets = 0usize;

        for iv in &spec.active {
            let mut slot = iv.start_min;
            while slot < iv.end_min {
                if !first_slot {
                    for _ in 0..replace {
                        scheduled.pop_front();
                        scheduled.push_back(next_source);
                        next_source = (next_source + 1) % spec.sources;
                    }
                }
                first_slot = false;
                let slot_end = (slot + spec.period_min as u64).min(iv.end_min);
                let slot_start_ms = scenario.start_ms + slot as i64 * MINUTE_MS;
                let slot_end_ms = (scenario.start_ms + slot_end as i64 * MINUTE_MS).min(end_ms);
                let mut members: Vec<usize> = scheduled.iter().copied().collect();
                members.sort_unstable();
                for s in members {
                    let template = templates[plan.template[s]];
                    let n = spec.packets.map(|p| p.sample(&mut rng) as usize).unwrap_or(template.len());
                    let ports = cycled(template, n);
                    let gaps: Vec<i64> = (1..n).map(|_| spec.jitter_s.sample(&mut rng) as i64 * 1000).collect();
                    let span: i64 = gaps.iter().sum();
                    let room = (slot_end_ms - slot_start_ms - span).max(1);
                    let mut t = slot_start_ms + rng.gen_range(0..room);
                    for (i, port) in ports.into_iter().enumerate() {
                        if i > 0 {
                            t += gaps[i - 1];
                        }
                        if t >= end_ms {
                            break;
                        }
                        records.push(FlowRecord {
                            timestamp: t,
                            src_ip: plan.pool[s],
                            dst_ip: darknet_addr(&mut rng),
                            dst_port: port,
                            protocol: spec.protocol,
                            packet_size: size(&mut rng),
                        });
                        times.push(t);
                        packets += 1;
                        used.insert(s);
                    }
                }
                slot = slot_end;
            }
        }
        for s in &used {
            truth.sources.insert(plan.pool[*s], spec.name.clone());
        }
        truth.campaigns.insert(
            spec.name.clone(),
            CampaignTruth {
                sources: used.len(),
                packets,
                windows: Vec::new(),
            },
        );
        spans.insert(spec.name.clone(), times);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    rng.set_stream(0);
    let mut next_noise = 0u64;
    let noise = (scenario.noise_rate * scenario.duration_min as f64).round() as u64;
    for _ in 0..noise {
        next_noise += 1;
        records.push(FlowRecord {
            timestamp: rng.gen_range(scenario.start_ms..end_ms),
            src_ip: block_addr(NOISE_BLOCK, next_noise),
            dst_ip: darknet_addr(&mut rng),
            dst_port: rng.gen(),
            protocol: if rng.gen_bool(0.8) { Protocol::Tcp } else { Protocol::Udp },
            packet_size: size(&mut rng),
        });
    }
    truth.noise_sources = noise as usize;
    let scanners = (scenario.scanner_rate * scenario.duration_min as f64 / 60.0).round() as u64;
    for _ in 0..scanners {
        next_noise += 1;
        let src = block_addr(NOISE_BLOCK, next_noise);
        let n = scenario.scanner_packets.sample(&mut rng);
        let mut t = rng.gen_range(scenario.start_ms..end_ms);
        for _ in 0..n {
            if t >= end_ms {
                break;
            }
            records.push(FlowRecord {
                timestamp: t,
                src_ip: src,
                dst_ip: darknet_addr(&mut rng),
                dst_port: rng.gen_range(scenario.scanner_ports.0..=scenario.scanner_ports.1),
                protocol: Protocol::Tcp,
                packet_size: size(&mut rng),
            });
            t += rng.gen_range(1..=5) * 1000;
        }
    }
    truth.scanner_sources = scanners as usize;

    records.sort_by_key(|r| (r.timestamp, r.src_ip, r.dst_ip, r.dst_port));

    let config = WindowConfig::default();
    truth.window_length_min = config.length_min();
    truth.window_step_min = config.step_min();
    truth.origin_ms = records.first().map(|r| r.timestamp.div_euclid(HOUR_MS) * HOUR_MS);
    if let Some(origin) = truth.origin_ms {
        for (name, times) in spans {
            let windows: BTreeSet<u64> = times.iter().flat_map(|t| config.windows_containing(origin, *t)).collect();
            truth.campaigns.get_mut(&name).expect("campaign recorded").windows = windows.into_iter().collect();
        }
    }
    Ok((records, truth))
}

pub fn write_csv<W: Write>(records: &[FlowRecord], mut out: W) -> io::Result<()> {
    for r in records {
        out.write_all(r.to_csv_line().as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
