//! Scenario text format.
//!
//! ```text
//! seed = 7
//! duration = 48h
//! noise_rate = 10
//!
//! [campaign camera]
//! template = ip-camera        # start from a catalog campaign
//! ports = 9527 9527 9527
//! variant = 0.08: 9527 9527 9527 5555 5555 5555
//! sources = 500
//! active = 4h-11h, 24h-31h
//! ```
//!
//! Durations take an `m`, `h` or `d` suffix (bare numbers are minutes);
//! ranges are `lo-hi` or a single value.

use std::net::Ipv4Addr;

use super::{catalog, CampaignSpec, Interval, Range32, Scenario, SimError};

fn parse_minutes(s: &str) -> Option<u64> {
    let s = s.trim();
    let (num, mult) = match s.chars().last()? {
        'm' => (&s[..s.len() - 1], 1),
        'h' => (&s[..s.len() - 1], 60),
        'd' => (&s[..s.len() - 1], 24 * 60),
        _ => (s, 1),
    };
    num.trim().parse::<u64>().ok().map(|n| n * mult)
}

fn parse_range(s: &str) -> Option<Range32> {
    match s.split_once('-') {
        Some((a, b)) => {
            let r = Range32::new(a.trim().parse().ok()?, b.trim().parse().ok()?);
            (r.lo <= r.hi).then_some(r)
        }
        None => s.trim().parse().ok().map(Range32::exactly),
    }
}

fn parse_ports(s: &str) -> Option<Vec<u16>> {
    let ports: Option<Vec<u16>> = s
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().ok())
        .collect();
    ports.filter(|p| !p.is_empty())
}

fn parse_subnet(s: &str) -> Option<(Ipv4Addr, u8)> {
    let (a, l) = s.trim().split_once('/')?;
    let len: u8 = l.parse().ok().filter(|l| *l <= 32)?;
    Some((a.parse().ok()?, len))
}

fn parse_fraction(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|f| (0.0..=1.0).contains(f))
}

fn parse_start(s: &str) -> Option<i64> {
    let s = s.trim();
    s.parse::<i64>()
        .ok()
        .or_else(|| chrono::DateTime::parse_from_rfc3339(s).ok().map(|t| t.timestamp_millis()))
}

/// Parse a scenario file. Unknown keys are errors.
pub fn parse_scenario(text: &str) -> Result<Scenario, SimError> {
    let mut scenario = Scenario::default();
    let mut current: Option<CampaignSpec> = None;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |msg: String| SimError::Parse { line: line_no, msg };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('[') {
            let header = header
                .strip_suffix(']')
                .ok_or_else(|| err("unterminated block header".into()))?;
            let name = header
                .strip_prefix("campaign")
                .map(str::trim)
                .filter(|n| !n.is_empty())
                .ok_or_else(|| err("expected `[campaign <name>]`".into()))?;
            scenario.campaigns.extend(current.take());
            current = Some(CampaignSpec::new(name, &[], 0));
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
        let bad = || err(format!("bad value for `{key}`: `{value}`"));

        match current.as_mut() {
            None => match key {
                "seed" => scenario.seed = value.parse().map_err(|_| bad())?,
                "start" => scenario.start_ms = parse_start(value).ok_or_else(bad)?,
                "duration" => scenario.duration_min = parse_minutes(value).ok_or_else(bad)?,
                "noise_rate" => scenario.noise_rate = value.parse().map_err(|_| bad())?,
                "scanner_rate" => scenario.scanner_rate = value.parse().map_err(|_| bad())?,
                "scanner_packets" => scenario.scanner_packets = parse_range(value).ok_or_else(bad)?,
                "scanner_ports" => {
                    let r = parse_range(value).filter(|r| r.hi <= u16::MAX as u32).ok_or_else(bad)?;
                    scenario.scanner_ports = (r.lo as u16, r.hi as u16);
                }
                _ => return Err(err(format!("unknown scenario key `{key}`"))),
            },
            Some(c) => match key {
                "template" => {
                    let base = catalog::campaign(value).ok_or_else(|| err(format!("unknown catalog campaign `{value}`")))?;
                    *c = CampaignSpec {
                        name: c.name.clone(),
                        ..base
                    };
                }
                "ports" => c.ports = parse_ports(value).ok_or_else(bad)?,
                "variant" => {
                    let (f, ports) = value.split_once(':').ok_or_else(bad)?;
                    c.variants.push(super::Variant {
                        fraction: parse_fraction(f).ok_or_else(bad)?,
                        ports: parse_ports(ports).ok_or_else(bad)?,
                    });
                }
                "sources" => c.sources = value.parse().map_err(|_| bad())?,
                "packets" => c.packets = Some(parse_range(value).ok_or_else(bad)?),
                "active" => {
                    c.active.clear();
                    for part in value.split(',') {
                        let (a, b) = part.split_once('-').ok_or_else(bad)?;
                        c.active.push(Interval {
                            start_min: parse_minutes(a).ok_or_else(bad)?,
                            end_min: parse_minutes(b).ok_or_else(bad)?,
                        });
                    }
                }
                "period" => c.period_min = parse_minutes(value).and_then(|m| u32::try_from(m).ok()).ok_or_else(bad)?,
                "jitter" => c.jitter_s = parse_range(value).ok_or_else(bad)?,
                "concurrency" => c.concurrency = Some(value.parse().map_err(|_| bad())?),
                "churn" => c.churn = parse_fraction(value).ok_or_else(bad)?,
                "subnet" => c.subnet = Some(parse_subnet(value).ok_or_else(bad)?),
                "mimic" => c.mimic_fraction = parse_fraction(value).ok_or_else(bad)?,
                "protocol" => c.protocol = value.parse().map_err(|_| bad())?,
                _ => return Err(err(format!("unknown campaign key `{key}`"))),
            },
        }
    }
    scenario.campaigns.extend(current);
    scenario.validate()?;
    Ok(scenario)
}
