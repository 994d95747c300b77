//! CSV persistence for profiles and hostname maps.

use std::io::{Read, Write};
use std::net::Ipv4Addr;
use std::path::Path;

use crate::packet::Mac;

use super::{DeviceProfile, Direction, HostnameMap, ProfileEntry, ProfileError, ProfileSet};

pub const PROFILE_HEADER: [&str; 5] = [
    "DEVICE MAC",
    "PACKET DIRECTION",
    "EXTERNAL ADDRESS",
    "PACKET LENGTH",
    "DEVICE NAME",
];

pub const HOSTNAME_HEADER: [&str; 2] = ["IP", "HOSTNAME"];

fn csv_err(row: usize, e: impl std::fmt::Display) -> ProfileError {
    ProfileError::Parse {
        row,
        message: e.to_string(),
    }
}

fn io_err(e: csv::Error) -> ProfileError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => ProfileError::Io(io),
        other => ProfileError::Parse {
            row: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Writes all entries, sorted by (mac, external address, direction, length).
pub fn write_profiles<W: Write>(profiles: &ProfileSet, out: W) -> Result<(), ProfileError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(PROFILE_HEADER).map_err(io_err)?;
    // BTreeMap iteration is already MAC-ordered; entries() sorts the rest.
    for profile in profiles.values() {
        for e in profile.entries() {
            w.write_record([
                e.device_mac.to_string(),
                e.direction.to_string(),
                e.external_address,
                e.length.to_string(),
                e.device_name,
            ])
            .map_err(io_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_profiles(profiles: &ProfileSet, path: &Path) -> Result<(), ProfileError> {
    let file = std::fs::File::create(path)?;
    write_profiles(profiles, std::io::BufWriter::new(file))
}

fn parse_entry(fields: &csv::StringRecord, row: usize) -> Result<ProfileEntry, ProfileError> {
    if fields.len() != PROFILE_HEADER.len() {
        return Err(csv_err(
            row,
            format!("expected 5 fields, found {}", fields.len()),
        ));
    }
    let device_mac: Mac = fields[0].parse().map_err(|e| csv_err(row, e))?;
    let direction: Direction = fields[1]
        .trim()
        .parse()
        .map_err(|e: String| csv_err(row, e))?;
    let external_address = fields[2].trim().to_ascii_lowercase();
    if external_address.is_empty() {
        return Err(csv_err(row, "empty external address"));
    }
    let length: u32 = fields[3]
        .trim()
        .parse()
        .map_err(|_| csv_err(row, format!("bad packet length {:?}", &fields[3])))?;
    if length == 0 {
        return Err(csv_err(row, "packet length must be positive"));
    }
    Ok(ProfileEntry {
        device_mac,
        external_address,
        direction,
        length,
        device_name: fields[4].to_string(),
    })
}

/// Parses the profile CSV. Row numbers in errors count the header as row 1.
pub fn parse_profiles<R: Read>(input: R) -> Result<ProfileSet, ProfileError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut profiles = ProfileSet::new();
    for (i, result) in r.records().enumerate() {
        let row = i + 1;
        let fields = result.map_err(|e| csv_err(row, e))?;
        if i == 0 {
            let header: Vec<&str> = fields.iter().map(str::trim).collect();
            if header != PROFILE_HEADER {
                return Err(csv_err(row, format!("unexpected header {header:?}")));
            }
            continue;
        }
        if fields.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        let entry = parse_entry(&fields, row)?;
        profiles
            .entry(entry.device_mac)
            .or_insert_with(|| DeviceProfile::new(entry.device_mac, entry.device_name.clone()))
            .insert(&entry);
    }
    Ok(profiles)
}

pub fn load_profiles(path: &Path) -> Result<ProfileSet, ProfileError> {
    parse_profiles(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn write_hostname_map<W: Write>(map: &HostnameMap, out: W) -> Result<(), ProfileError> {
    let mut rows: Vec<(&Ipv4Addr, &String)> = map.iter().collect();
    rows.sort();
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(HOSTNAME_HEADER).map_err(io_err)?;
    for (ip, name) in rows {
        w.write_record([ip.to_string().as_str(), name])
            .map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_hostname_map(map: &HostnameMap, path: &Path) -> Result<(), ProfileError> {
    write_hostname_map(map, std::fs::File::create(path)?)
}

/// Reads `IP,HOSTNAME` rows; a header row is optional.
pub fn parse_hostname_map<R: Read>(input: R) -> Result<HostnameMap, ProfileError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut map = HostnameMap::new();
    for (i, result) in r.records().enumerate() {
        let row = i + 1;
        let fields = result.map_err(|e| csv_err(row, e))?;
        if i == 0 && fields.get(0).map(str::trim) == Some("IP") {
            continue;
        }
        if fields.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        if fields.len() != 2 {
            return Err(csv_err(
                row,
                format!("expected 2 fields, found {}", fields.len()),
            ));
        }
        let ip: Ipv4Addr = fields[0]
            .trim()
            .parse()
            .map_err(|_| csv_err(row, format!("bad IPv4 address {:?}", &fields[0])))?;
        let name = fields[1].trim();
        if name.is_empty() {
            return Err(csv_err(row, "empty hostname"));
        }
        map.insert(ip, name);
    }
    Ok(map)
}

pub fn load_hostname_map(path: &Path) -> Result<HostnameMap, ProfileError> {
    parse_hostname_map(std::fs::File::open(path)?)
}
