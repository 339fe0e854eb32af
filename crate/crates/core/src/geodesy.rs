//! WGS-84 geodetic <-> UTM conversion.
//!
//! The projection uses the 6th-order Krüger series for the transverse
//! Mercator (forward and inverse), which is accurate to well below a
//! millimetre inside a zone. Distances are planar: one UTM unit is one metre.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const WGS84_A: f64 = 6_378_137.0;
const WGS84_F: f64 = 1.0 / 298.257_223_563;
const UTM_K0: f64 = 0.9996;
const FALSE_EASTING: f64 = 500_000.0;
const FALSE_NORTHING_SOUTH: f64 = 10_000_000.0;
/// Validity band of the UTM system.
pub const MAX_UTM_LATITUDE: f64 = 84.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Hemisphere {
    North,
    South,
}

/// A UTM zone: number 1..=60 and hemisphere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UtmZone {
    pub number: u8,
    pub hemisphere: Hemisphere,
}

impl UtmZone {
    pub fn new(number: u8, hemisphere: Hemisphere) -> Result<Self> {
        if !(1..=60).contains(&number) {
            return Err(Error::Domain(format!(
                "UTM zone number {number} outside 1..=60"
            )));
        }
        Ok(Self { number, hemisphere })
    }

    /// Longitude of the zone's central meridian, degrees.
    pub fn central_meridian(&self) -> f64 {
        f64::from(self.number) * 6.0 - 183.0
    }
}

impl fmt::Display for UtmZone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = match self.hemisphere {
            Hemisphere::North => 'N',
            Hemisphere::South => 'S',
        };
        write!(f, "{}{}", self.number, h)
    }
}

impl std::str::FromStr for UtmZone {
    type Err = Error;

    /// Parses `10N`, `56S`, `10n`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Domain(format!("invalid UTM zone `{s}` (expected e.g. `10N`)"));
        let (num, hemi) = s.split_at(s.len().checked_sub(1).ok_or_else(bad)?);
        let hemisphere = match hemi {
            "N" | "n" => Hemisphere::North,
            "S" | "s" => Hemisphere::South,
            _ => return Err(bad()),
        };
        let number: u8 = num.parse().map_err(|_| bad())?;
        UtmZone::new(number, hemisphere)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub latitude: f64,
    pub longitude: f64,
}

impl LatLon {
    /// Validates latitude and normalizes longitude into [-180, 180).
    pub fn new(latitude: f64, longitude: f64) -> Result<Self> {
        if !latitude.is_finite() || !longitude.is_finite() {
            return Err(Error::Domain("non-finite latitude/longitude".into()));
        }
        if !(-90.0..=90.0).contains(&latitude) {
            return Err(Error::Domain(format!(
                "latitude {latitude} outside [-90, 90]"
            )));
        }
        Ok(Self {
            latitude,
            longitude: normalize_longitude(longitude),
        })
    }
}

fn normalize_longitude(lon: f64) -> f64 {
    let l = (lon + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360 for tiny negative inputs.
    if l >= 180.0 {
        l - 360.0
    } else {
        l
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtmCoord {
    pub east: f64,
    pub north: f64,
    pub zone: UtmZone,
}

/// Zone number from longitude by the plain 6-degree rule (no Norway/Svalbard exceptions).
pub fn zone_number_for(longitude: f64) -> u8 {
    let lon = normalize_longitude(longitude);
    let z = ((lon + 180.0) / 6.0).floor() as i64 + 1;
    z.clamp(1, 60) as u8
}

struct Series {
    e: f64,
    /// Rectifying radius A times k0.
    k0a: f64,
    alpha: [f64; 6],
    beta: [f64; 6],
}

fn series() -> Series {
    let f = WGS84_F;
    let n = f / (2.0 - f);
    let e = (f * (2.0 - f)).sqrt();
    let n2 = n * n;
    let n3 = n2 * n;
    let n4 = n3 * n;
    let n5 = n4 * n;
    let n6 = n5 * n;
    let a_rect = WGS84_A / (1.0 + n) * (1.0 + n2 / 4.0 + n4 / 64.0 + n6 / 256.0);
    let alpha = [
        n / 2.0 - 2.0 * n2 / 3.0 + 5.0 * n3 / 16.0 + 41.0 * n4 / 180.0 - 127.0 * n5 / 288.0
            + 7891.0 * n6 / 37800.0,
        13.0 * n2 / 48.0 - 3.0 * n3 / 5.0 + 557.0 * n4 / 1440.0 + 281.0 * n5 / 630.0
            - 1_983_433.0 * n6 / 1_935_360.0,
        61.0 * n3 / 240.0 - 103.0 * n4 / 140.0 + 15061.0 * n5 / 26880.0
            + 167_603.0 * n6 / 181_440.0,
        49561.0 * n4 / 161_280.0 - 179.0 * n5 / 168.0 + 6_601_661.0 * n6 / 7_257_600.0,
        34729.0 * n5 / 80640.0 - 3_418_889.0 * n6 / 1_995_840.0,
        212_378_941.0 * n6 / 319_334_400.0,
    ];
    let beta = [
        n / 2.0 - 2.0 * n2 / 3.0 + 37.0 * n3 / 96.0 - n4 / 360.0 - 81.0 * n5 / 512.0
            + 96199.0 * n6 / 604_800.0,
        n2 / 48.0 + n3 / 15.0 - 437.0 * n4 / 1440.0 + 46.0 * n5 / 105.0
            - 1_118_711.0 * n6 / 3_870_720.0,
        17.0 * n3 / 480.0 - 37.0 * n4 / 840.0 - 209.0 * n5 / 4480.0 + 5569.0 * n6 / 90720.0,
        4397.0 * n4 / 161_280.0 - 11.0 * n5 / 504.0 - 830_251.0 * n6 / 7_257_600.0,
        4583.0 * n5 / 161_280.0 - 108_847.0 * n6 / 3_991_680.0,
        20_648_693.0 * n6 / 638_668_800.0,
    ];
    Series {
        e,
        k0a: UTM_K0 * a_rect,
        alpha,
        beta,
    }
}

/// Forward projection into the zone picked by the 6-degree rule.
pub fn latlon_to_utm(p: LatLon) -> Result<UtmCoord> {
    let zone = UtmZone::new(
        zone_number_for(p.longitude),
        if p.latitude >= 0.0 {
            Hemisphere::North
        } else {
            Hemisphere::South
        },
    )?;
    latlon_to_utm_in_zone(p, zone)
}

/// Forward projection into an explicit zone (for points slightly outside their natural zone).
pub fn latlon_to_utm_in_zone(p: LatLon, zone: UtmZone) -> Result<UtmCoord> {
    if !(p.latitude.abs() <= MAX_UTM_LATITUDE) {
        return Err(Error::Domain(format!(
            "latitude {} outside the UTM band [-{MAX_UTM_LATITUDE}, {MAX_UTM_LATITUDE}]",
            p.latitude
        )));
    }
    let s = series();
    let phi = p.latitude.to_radians();
    let mut dlon = p.longitude - zone.central_meridian();
    dlon = (dlon + 180.0).rem_euclid(360.0) - 180.0;
    let lam = dlon.to_radians();

    // Conformal latitude via tau' = tan(chi).
    let tau = phi.tan();
    let sigma = (s.e * (s.e * tau / (1.0 + tau * tau).sqrt()).atanh()).sinh();
    let tau_c = tau * (1.0 + sigma * sigma).sqrt() - sigma * (1.0 + tau * tau).sqrt();

    let xi_p = tau_c.atan2(lam.cos());
    let eta_p = (lam.sin() / (tau_c * tau_c + lam.cos() * lam.cos()).sqrt()).asinh();

    let mut xi = xi_p;
    let mut eta = eta_p;
    for (j, a) in s.alpha.iter().enumerate() {
        let k = 2.0 * (j as f64 + 1.0);
        xi += a * (k * xi_p).sin() * (k * eta_p).cosh();
        eta += a * (k * xi_p).cos() * (k * eta_p).sinh();
    }

    let east = FALSE_EASTING + s.k0a * eta;
    let mut north = s.k0a * xi;
    if zone.hemisphere == Hemisphere::South {
        north += FALSE_NORTHING_SOUTH;
    }
    Ok(UtmCoord { east, north, zone })
}

/// Inverse projection.
pub fn utm_to_latlon(c: UtmCoord) -> Result<LatLon> {
    let zone = UtmZone::new(c.zone.number, c.zone.hemisphere)?;
    if !c.east.is_finite() || !c.north.is_finite() {
        return Err(Error::Domain("non-finite UTM coordinate".into()));
    }
    let s = series();
    let north = match zone.hemisphere {
        Hemisphere::North => c.north,
        Hemisphere::South => c.north - FALSE_NORTHING_SOUTH,
    };
    let xi = north / s.k0a;
    let eta = (c.east - FALSE_EASTING) / s.k0a;

    let mut xi_p = xi;
    let mut eta_p = eta;
    for (j, b) in s.beta.iter().enumerate() {
        let k = 2.0 * (j as f64 + 1.0);
        xi_p -= b * (k * xi).sin() * (k * eta).cosh();
        eta_p -= b * (k * xi).cos() * (k * eta).sinh();
    }

    let sinh_eta = eta_p.sinh();
    let cos_xi = xi_p.cos();
    let tau_c = xi_p.sin() / (sinh_eta * sinh_eta + cos_xi * cos_xi).sqrt();
    let lam = sinh_eta.atan2(cos_xi);

    let tau = tau_from_conformal(tau_c, s.e);
    let latitude = tau.atan().to_degrees();
    let longitude = zone.central_meridian() + lam * 180.0 / PI;
    LatLon::new(latitude, longitude)
}

/// Newton iteration for tan(phi) given tan(chi).
fn tau_from_conformal(tau_c: f64, e: f64) -> f64 {
    let e2m = 1.0 - e * e;
    let mut tau = tau_c / e2m;
    for _ in 0..8 {
        let tau1 = (1.0 + tau * tau).sqrt();
        let sig = (e * (e * tau / tau1).atanh()).sinh();
        let taup = (1.0 + sig * sig).sqrt() * tau - sig * tau1;
        let dtau = (tau_c - taup) * (1.0 + e2m * tau * tau)
            / (e2m * tau1 * (1.0 + taup * taup).sqrt());
        tau += dtau;
        if dtau.abs() < 1e-15 * tau.abs().max(1.0) {
            break;
        }
    }
    tau
}

/// Planar Euclidean distance in metres between two points of the same zone.
pub fn utm_distance(a: &UtmCoord, b: &UtmCoord) -> Result<f64> {
    if a.zone != b.zone {
        return Err(Error::ZoneMismatch {
            left: a.zone.to_string(),
            right: b.zone.to_string(),
        });
    }
    Ok((a.east - b.east).hypot(a.north - b.north))
}
