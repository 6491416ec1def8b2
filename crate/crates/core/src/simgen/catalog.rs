//! Built-in campaigns shaped after well-known darknet patterns, and the
//! scenarios used by the evaluation harness.

use std::net::Ipv4Addr;

use super::{CampaignSpec, Scenario};

pub const CAMPAIGNS: [&str; 8] = [
    "censys-like",
    "http-alternates",
    "smb",
    "port-11390",
    "telnet",
    "ip-camera",
    "router-probe",
    "triple-port",
];

pub const SCENARIOS: [&str; 6] = ["telnet", "table2", "cluster-f", "pause-resume", "tracking", "novel-895"];

/// Forty ports probed in a fixed order by a research scanner.
pub const CENSYS_PORTS: [u16; 40] = [
    2077, 2077, 8877, 7080, 2082, 2083, 2086, 2087, 5985, 5986, 7001, 7548, 8009, 8089, 8139, 8200, 8333, 8880,
    8888, 9000, 9090, 9200, 9418, 9600, 9944, 10000, 10250, 11211, 12345, 13579, 16010, 20000, 25565, 27017,
    28017, 37777, 49152, 50000, 9304, 3556,
];

pub const HTTP_ALTERNATES: [u16; 17] = [
    80, 81, 88, 8000, 8001, 8008, 8010, 8080, 8081, 8082, 8088, 8090, 8181, 8443, 8880, 8888, 9080,
];

pub fn campaign(name: &str) -> Option<CampaignSpec> {
    let c = match name {
        "censys-like" => {
            let mut c = CampaignSpec::new(name, &CENSYS_PORTS, 141).packets(40, 60);
            c.subnet = Some((Ipv4Addr::new(198, 19, 200, 0), 24));
            c.mimic_fraction = 0.022;
            c.jitter_s = super::Range32::new(1, 3);
            c
        }
        "http-alternates" => CampaignSpec::new(name, &[8000, 88, 80, 8000, 8081, 80, 80], 400)
            .variant(0.2, &[8080, 8008, 80, 8181, 8080])
            .variant(0.2, &[80, 8888, 8443, 8088, 8001, 81])
            .variant(0.15, &[8082, 8090, 80, 8010, 9080])
            .variant(0.1, &[8880, 8080, 80, 8081]),
        "smb" => CampaignSpec::new(name, &[445, 445, 445], 600),
        "port-11390" => CampaignSpec::new(name, &[11390], 895).packets(60, 90),
        "telnet" => CampaignSpec::new(name, &[23, 23, 2323], 300),
        "ip-camera" => CampaignSpec::new(name, &[9527, 9527, 9527], 500).variant(0.08, &[9527, 9527, 9527, 5555, 5555, 5555]),
        "router-probe" => CampaignSpec::new(name, &[7550, 7550, 7547, 7547, 7547], 200),
        "triple-port" => CampaignSpec::new(name, &[7379, 7379, 5379, 5379, 6379, 6379], 300)
            .variant(0.25, &[5379, 5379, 6379, 6379])
            .variant(0.25, &[7379, 6379, 7379, 6379]),
        _ => return None,
    };
    Some(c.active_hours(0, 4))
}

fn at(name: &str, start: u64, end: u64) -> CampaignSpec {
    let mut c = campaign(name).expect("catalog campaign");
    c.active.clear();
    c.active_hours(start, end)
}

pub fn scenario(name: &str) -> Option<Scenario> {
    let s = match name {
        "telnet" => Scenario {
            duration_min: 8 * 60,
            noise_rate: 10.0,
            campaigns: vec![at("telnet", 1, 5)],
            ..Default::default()
        },
        "table2" => Scenario {
            duration_min: 12 * 60,
            noise_rate: 20.0,
            campaigns: CAMPAIGNS.iter().map(|n| at(n, 1, 9)).collect(),
            ..Default::default()
        },
        "cluster-f" => Scenario {
            duration_min: 8 * 60,
            noise_rate: 20.0,
            campaigns: vec![at("ip-camera", 2, 6)],
            ..Default::default()
        },
        // active in windows 1-10 and 21-30; a fresh-port campaign from window 15
        "pause-resume" => Scenario {
            duration_min: 34 * 60,
            noise_rate: 10.0,
            campaigns: vec![
                at("router-probe", 4, 11).active_hours(24, 31),
                at("triple-port", 18, 31),
            ],
            ..Default::default()
        },
        // windows 0-47 all see the campaign with a quarter of it replaced every hour
        "tracking" => Scenario {
            duration_min: 51 * 60,
            noise_rate: 10.0,
            campaigns: vec![{
                let mut c = at("telnet", 0, 51).churn(0.25, 200);
                c.sources = 4000;
                c
            }],
            ..Default::default()
        },
        "novel-895" => Scenario {
            duration_min: 12 * 60,
            noise_rate: 10.0,
            campaigns: vec![at("smb", 0, 12), at("port-11390", 5, 7)],
            ..Default::default()
        },
        _ => return None,
    };
    Some(s)
}
