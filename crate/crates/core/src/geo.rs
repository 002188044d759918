use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const MAX_LAT_E7: i32 = 900_000_000;
pub const MAX_LON_E7: i32 = 1_800_000_000;
/// `lat_e7 || lon_e7`, both big-endian.
pub const GEO_WIRE_LEN: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeoError {
    #[error("latitude {0} out of range")]
    Latitude(i64),
    #[error("longitude {0} out of range")]
    Longitude(i64),
    #[error("cannot parse coordinate {0:?}")]
    Parse(String),
}

/// A position in fixed-point degrees (units of 1e-7 degree).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GeoLocation {
    lat_e7: i32,
    lon_e7: i32,
}

impl GeoLocation {
    pub fn new(lat_e7: i32, lon_e7: i32) -> Result<Self, GeoError> {
        if lat_e7.unsigned_abs() > MAX_LAT_E7 as u32 {
            return Err(GeoError::Latitude(lat_e7 as i64));
        }
        if lon_e7.unsigned_abs() > MAX_LON_E7 as u32 {
            return Err(GeoError::Longitude(lon_e7 as i64));
        }
        Ok(Self { lat_e7, lon_e7 })
    }

    /// Parses two decimal-degree strings without going through floats.
    pub fn from_degrees(lat: &str, lon: &str) -> Result<Self, GeoError> {
        let lat = parse_e7(lat)?;
        let lon = parse_e7(lon)?;
        let lat = i32::try_from(lat).map_err(|_| GeoError::Latitude(lat))?;
        let lon = i32::try_from(lon).map_err(|_| GeoError::Longitude(lon))?;
        Self::new(lat, lon)
    }

    pub fn lat_e7(&self) -> i32 {
        self.lat_e7
    }

    pub fn lon_e7(&self) -> i32 {
        self.lon_e7
    }

    pub fn to_bytes(&self) -> [u8; GEO_WIRE_LEN] {
        let mut out = [0u8; GEO_WIRE_LEN];
        out[..4].copy_from_slice(&self.lat_e7.to_be_bytes());
        out[4..].copy_from_slice(&self.lon_e7.to_be_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8; GEO_WIRE_LEN]) -> Result<Self, GeoError> {
        let lat = i32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
        let lon = i32::from_be_bytes(bytes[4..].try_into().expect("4 bytes"));
        Self::new(lat, lon)
    }
}

impl fmt::Display for GeoLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", format_e7(self.lat_e7), format_e7(self.lon_e7))
    }
}

fn format_e7(v: i32) -> String {
    let sign = if v < 0 { "-" } else { "" };
    let abs = v.unsigned_abs();
    format!("{sign}{}.{:07}", abs / 10_000_000, abs % 10_000_000)
}

fn parse_e7(s: &str) -> Result<i64, GeoError> {
    let err = || GeoError::Parse(s.to_string());
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let (int_part, frac_part) = body.split_once('.').unwrap_or((body, ""));
    if int_part.is_empty()
        || int_part.len() > 3
        || frac_part.len() > 7
        || !int_part.bytes().all(|b| b.is_ascii_digit())
        || !frac_part.bytes().all(|b| b.is_ascii_digit())
    {
        return Err(err());
    }
    let int: i64 = int_part.parse().map_err(|_| err())?;
    let frac: i64 = if frac_part.is_empty() {
        0
    } else {
        format!("{frac_part:0<7}").parse().map_err(|_| err())?
    };
    let v = int * 10_000_000 + frac;
    Ok(if neg { -v } else { v })
}

impl FromStr for GeoLocation {
    type Err = GeoError;

    /// Accepts `"<lat> <lon>"` or `"<lat>,<lon>"` in decimal degrees.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|p| !p.is_empty());
        match (parts.next(), parts.next(), parts.next()) {
            (Some(lat), Some(lon), None) => Self::from_degrees(lat, lon),
            _ => Err(GeoError::Parse(s.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_decimal_degrees_exactly() {
        let g: GeoLocation = "52.52 13.405".parse().unwrap();
        assert_eq!((g.lat_e7(), g.lon_e7()), (525_200_000, 134_050_000));
        let g = GeoLocation::from_degrees("-33.8688197", "151.2092955").unwrap();
        assert_eq!((g.lat_e7(), g.lon_e7()), (-338_688_197, 1_512_092_955));
        assert_eq!(g.to_string(), "-33.8688197 151.2092955");
    }

    #[test]
    fn rejects_out_of_range_and_garbage() {
        assert!(GeoLocation::new(900_000_001, 0).is_err());
        assert!(GeoLocation::new(0, -1_800_000_001).is_err());
        assert!(GeoLocation::new(-900_000_000, 1_800_000_000).is_ok());
        assert!(GeoLocation::from_degrees("1.12345678", "0").is_err());
        assert!(GeoLocation::from_degrees("abc", "0").is_err());
        assert!("1 2 3".parse::<GeoLocation>().is_err());
    }

    #[test]
    fn wire_encoding_is_big_endian() {
        let g = GeoLocation::new(525_200_000, 134_050_000).unwrap();
        assert_eq!(hex::encode(g.to_bytes()), "1f4dea8007fd70d0");
        assert_eq!(GeoLocation::from_bytes(&g.to_bytes()).unwrap(), g);
    }
}
