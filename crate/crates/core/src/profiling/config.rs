use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::net::Ipv4Addr;
use std::path::Path;
use std::str::FromStr;

use crate::packet::Mac;

use super::ProfileError;

pub const DEFAULT_CHECKPOINT_INTERVAL: usize = 20_000;

/// An IPv4 prefix such as `192.168.0.0/16`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ipv4Cidr {
    network: Ipv4Addr,
    prefix: u8,
}

impl Ipv4Cidr {
    pub fn new(addr: Ipv4Addr, prefix: u8) -> Option<Self> {
        (prefix <= 32).then(|| Ipv4Cidr {
            network: Ipv4Addr::from(u32::from(addr) & Self::mask(prefix)),
            prefix,
        })
    }

    fn mask(prefix: u8) -> u32 {
        if prefix == 0 {
            0
        } else {
            u32::MAX << (32 - u32::from(prefix))
        }
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & Self::mask(self.prefix) == u32::from(self.network)
    }
}

impl fmt::Display for Ipv4Cidr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.network, self.prefix)
    }
}

impl FromStr for Ipv4Cidr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, prefix) = s
            .trim()
            .split_once('/')
            .ok_or_else(|| format!("{s:?} lacks /prefix"))?;
        let addr: Ipv4Addr = addr.parse().map_err(|_| format!("bad address in {s:?}"))?;
        let prefix: u8 = prefix.parse().map_err(|_| format!("bad prefix in {s:?}"))?;
        Ipv4Cidr::new(addr, prefix).ok_or_else(|| format!("prefix out of range in {s:?}"))
    }
}

pub fn default_local_cidrs() -> Vec<Ipv4Cidr> {
    ["192.168.0.0/16", "10.0.0.0/8", "172.16.0.0/12"]
        .iter()
        .map(|s| s.parse().expect("static cidr"))
        .collect()
}

/// Gateway-side view of the LAN.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub monitored_macs: BTreeSet<Mac>,
    pub gateway_mac: Mac,
    pub local_cidrs: Vec<Ipv4Cidr>,
    /// Injected reverse lookup table; never a live query.
    pub reverse_dns: HashMap<Ipv4Addr, String>,
    pub device_names: BTreeMap<Mac, String>,
    /// Profile mDNS (port 5353) traffic instead of filtering it.
    pub keep_multicast: bool,
    pub checkpoint_interval: usize,
}

impl NetworkConfig {
    pub fn new(gateway_mac: Mac, monitored: impl IntoIterator<Item = Mac>) -> Self {
        NetworkConfig {
            monitored_macs: monitored.into_iter().collect(),
            gateway_mac,
            local_cidrs: default_local_cidrs(),
            reverse_dns: HashMap::new(),
            device_names: BTreeMap::new(),
            keep_multicast: false,
            checkpoint_interval: DEFAULT_CHECKPOINT_INTERVAL,
        }
    }

    pub fn with_name(mut self, mac: Mac, name: &str) -> Self {
        self.device_names.insert(mac, name.to_string());
        self
    }

    pub fn is_local(&self, ip: Ipv4Addr) -> bool {
        self.local_cidrs.iter().any(|c| c.contains(ip))
    }

    pub fn is_monitored(&self, mac: &Mac) -> bool {
        self.monitored_macs.contains(mac)
    }

    pub fn device_name(&self, mac: &Mac) -> &str {
        self.device_names.get(mac).map(String::as_str).unwrap_or("")
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.monitored_macs.contains(&self.gateway_mac) {
            return Err(ProfileError::Config(format!(
                "gateway {} is listed as a monitored device",
                self.gateway_mac
            )));
        }
        if self.checkpoint_interval == 0 {
            return Err(ProfileError::Config(
                "checkpoint_interval must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Parses the flat `key = value` format. `reverse_dns` paths are resolved
    /// against `base_dir`.
    ///
    /// ```text
    /// gateway_mac = dc:a6:32:ce:31:63
    /// monitored_macs = 34:6f:92:1d:ba:50, b8:27:eb:01:02:03
    /// local_cidrs = 192.168.0.0/16, 10.0.0.0/8
    /// reverse_dns = reverse.csv
    /// keep_multicast = false
    /// checkpoint_interval = 20000
    /// device_name.34:6f:92:1d:ba:50 = Sensi Thermostat
    /// ```
    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self, ProfileError> {
        let mut cfg = NetworkConfig::new(Mac::default(), []);
        let mut have_gateway = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| ProfileError::Parse {
                row: n + 1,
                message: msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let list = || value.split(',').map(str::trim).filter(|s| !s.is_empty());
            match key {
                "gateway_mac" => {
                    cfg.gateway_mac = value.parse().map_err(|e| bad(format!("{e}")))?;
                    have_gateway = true;
                }
                "monitored_macs" => {
                    cfg.monitored_macs = list()
                        .map(|s| s.parse::<Mac>())
                        .collect::<Result<_, _>>()
                        .map_err(|e| bad(format!("{e}")))?;
                }
                "local_cidrs" => {
                    cfg.local_cidrs = list()
                        .map(|s| s.parse::<Ipv4Cidr>())
                        .collect::<Result<_, _>>()
                        .map_err(bad)?;
                }
                "reverse_dns" => {
                    let path = match base_dir {
                        Some(dir) => dir.join(value),
                        None => value.into(),
                    };
                    let map = super::csv_io::load_hostname_map(&path)?;
                    cfg.reverse_dns = map.into_inner();
                }
                "keep_multicast" => {
                    cfg.keep_multicast = value
                        .parse()
                        .map_err(|_| bad(format!("bad bool {value:?}")))?;
                }
                "checkpoint_interval" => {
                    cfg.checkpoint_interval = value
                        .parse()
                        .map_err(|_| bad(format!("bad integer {value:?}")))?;
                }
                _ => match key.strip_prefix("device_name.") {
                    Some(mac) => {
                        let mac: Mac = mac.parse().map_err(|e| bad(format!("{e}")))?;
                        cfg.device_names.insert(mac, value.to_string());
                    }
                    None => return Err(bad(format!("unknown key {key:?}"))),
                },
            }
        }
        if !have_gateway {
            return Err(ProfileError::Config("gateway_mac is required".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ProfileError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent())
    }

    /// Serializes everything except the reverse lookup table, which lives in
    /// its own file.
    pub fn to_config_text(&self, reverse_dns_path: Option<&str>) -> String {
        let join = |items: Vec<String>| items.join(",");
        let mut out = String::new();
        out.push_str(&format!("gateway_mac = {}\n", self.gateway_mac));
        out.push_str(&format!(
            "monitored_macs = {}\n",
            join(self.monitored_macs.iter().map(Mac::to_string).collect())
        ));
        out.push_str(&format!(
            "local_cidrs = {}\n",
            join(self.local_cidrs.iter().map(Ipv4Cidr::to_string).collect())
        ));
        if let Some(path) = reverse_dns_path {
            out.push_str(&format!("reverse_dns = {path}\n"));
        }
        out.push_str(&format!("keep_multicast = {}\n", self.keep_multicast));
        out.push_str(&format!(
            "checkpoint_interval = {}\n",
            self.checkpoint_interval
        ));
        for (mac, name) in &self.device_names {
            out.push_str(&format!("device_name.{mac} = {name}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cidr_membership() {
        let c: Ipv4Cidr = "172.16.0.0/12".parse().unwrap();
        assert!(c.contains(Ipv4Addr::new(172, 31, 255, 255)));
        assert!(!c.contains(Ipv4Addr::new(172, 32, 0, 0)));
        let all: Ipv4Cidr = "0.0.0.0/0".parse().unwrap();
        assert!(all.contains(Ipv4Addr::new(8, 8, 8, 8)));
        assert!("10.0.0.0/33".parse::<Ipv4Cidr>().is_err());
        assert_eq!(
            "10.1.2.3/8".parse::<Ipv4Cidr>().unwrap().to_string(),
            "10.0.0.0/8"
        );
    }

    #[test]
    fn parse_config_text() {
        let text = "\
# lab network
gateway_mac = dc:a6:32:ce:31:63
monitored_macs = 34:6f:92:1d:ba:50, 64:16:66:49:3e:cb
keep_multicast = true
checkpoint_interval = 500
device_name.34:6f:92:1d:ba:50 = Sensi Thermostat
";
        let cfg = NetworkConfig::parse(text, None).unwrap();
        assert_eq!(cfg.monitored_macs.len(), 2);
        assert!(cfg.keep_multicast);
        assert_eq!(cfg.checkpoint_interval, 500);
        assert_eq!(cfg.local_cidrs, default_local_cidrs());
        let thermostat: Mac = "34:6f:92:1d:ba:50".parse().unwrap();
        assert_eq!(cfg.device_name(&thermostat), "Sensi Thermostat");

        let again = NetworkConfig::parse(&cfg.to_config_text(None), None).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn gateway_cannot_be_monitored() {
        let text = "gateway_mac = dc:a6:32:ce:31:63\nmonitored_macs = dc:a6:32:ce:31:63\n";
        assert!(matches!(
            NetworkConfig::parse(text, None),
            Err(ProfileError::Config(_))
        ));
    }

    #[test]
    fn unknown_key_names_the_line() {
        let text = "gateway_mac = dc:a6:32:ce:31:63\ncolour = blue\n";
        assert!(matches!(
            NetworkConfig::parse(text, None),
            Err(ProfileError::Parse { row: 2, .. })
        ));
    }
}
