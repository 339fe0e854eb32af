//! Dataset manifests: CSV parsing and writing, the filename codec, and the
//! train/validation split.
//!
//! Manifest columns (header names are exact):
//!
//! | column        | required                         |
//! |---------------|----------------------------------|
//! | `id`          | yes                              |
//! | `east`,`north`| unless `lat`,`lon` are present   |
//! | `heading`     | yes, degrees in [0, 720)         |
//! | `zone`        | no, e.g. `10N`                   |
//! | `lat`,`lon`   | no, degrees                      |
//! | `uri`         | no                               |
//! | `features_ref`| no                               |
//!
//! Rows without any zone information (no `zone`, no `lat`/`lon`) live in an
//! unnamed local planar frame. All rows of one manifest must share one frame.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesy::{latlon_to_utm, LatLon, UtmZone};
use crate::partition::GeoPose;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub pose: GeoPose,
    /// `None` for records in a local planar frame.
    pub zone: Option<UtmZone>,
    pub latlon: Option<LatLon>,
    pub source_uri: Option<String>,
    pub features_ref: Option<String>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, pose: GeoPose) -> Self {
        Self {
            id: id.into(),
            pose,
            zone: None,
            latlon: None,
            source_uri: None,
            features_ref: None,
        }
    }

    pub fn with_zone(mut self, zone: UtmZone) -> Self {
        self.zone = Some(zone);
        self
    }
}

pub(crate) fn zone_label(z: Option<UtmZone>) -> String {
    z.map(|z| z.to_string()).unwrap_or_else(|| "local frame".into())
}

const KNOWN_COLUMNS: &[&str] = &["id", "east", "north", "heading", "zone", "lat", "lon", "uri", "features_ref"];

/// Parses a manifest, validating ids, headings and the single-zone rule.
pub fn parse_manifest<R: Read>(reader: R) -> Result<Vec<ImageRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut col: HashMap<&str, usize> = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        let known = KNOWN_COLUMNS
            .iter()
            .find(|k| **k == h)
            .ok_or_else(|| Error::Parse { line: 1, msg: format!("unknown column `{h}`") })?;
        if col.insert(known, i).is_some() {
            return Err(Error::Parse { line: 1, msg: format!("column `{h}` repeated") });
        }
    }
    for req in ["id", "heading"] {
        if !col.contains_key(req) {
            return Err(Error::Parse { line: 1, msg: format!("missing required column `{req}`") });
        }
    }
    let planar = col.contains_key("east") && col.contains_key("north");
    let geodetic = col.contains_key("lat") && col.contains_key("lon");
    if !planar && !geodetic {
        return Err(Error::Parse {
            line: 1,
            msg: "need `east`,`north` or `lat`,`lon` columns".into(),
        });
    }

    let mut out = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut frame: Option<(Option<UtmZone>, usize)> = None;
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |name: &str| col.get(name).and_then(|&i| row.get(i)).filter(|s| !s.is_empty());
        let num = |name: &str| -> Result<Option<f64>> {
            field(name)
                .map(|s| {
                    s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Parse {
                        line,
                        msg: format!("column `{name}`: `{s}` is not a finite number"),
                    })
                })
                .transpose()
        };

        let id = field("id")
            .ok_or_else(|| Error::Parse { line, msg: "empty id".into() })?
            .to_owned();
        if let Some(first) = seen.get(&id) {
            return Err(Error::DuplicateId { id, first: *first, second: line });
        }

        let heading = num("heading")?.ok_or_else(|| Error::Parse { line, msg: "missing heading".into() })?;
        if !(0.0..720.0).contains(&heading) {
            return Err(Error::Parse {
                line,
                msg: format!("heading {heading} outside [0, 720)"),
            });
        }

        let latlon = match (num("lat")?, num("lon")?) {
            (Some(lat), Some(lon)) => {
                Some(LatLon::new(lat, lon).map_err(|e| Error::Parse { line, msg: e.to_string() })?)
            }
            (None, None) => None,
            _ => return Err(Error::Parse { line, msg: "lat and lon must both be set".into() }),
        };
        let mut zone = field("zone")
            .map(|z| z.parse::<UtmZone>().map_err(|e| Error::Parse { line, msg: e.to_string() }))
            .transpose()?;

        let (east, north) = match (num("east")?, num("north")?) {
            (Some(e), Some(n)) => {
                if zone.is_none() {
                    if let Some(ll) = latlon {
                        zone = Some(
                            latlon_to_utm(ll).map_err(|e| Error::Parse { line, msg: e.to_string() })?.zone,
                        );
                    }
                }
                (e, n)
            }
            (None, None) => {
                let ll = latlon.ok_or_else(|| Error::Parse {
                    line,
                    msg: "row has neither east/north nor lat/lon".into(),
                })?;
                let utm = match zone {
                    Some(z) => crate::geodesy::latlon_to_utm_in_zone(ll, z),
                    None => latlon_to_utm(ll),
                }
                .map_err(|e| Error::Parse { line, msg: e.to_string() })?;
                zone = Some(utm.zone);
                (utm.east, utm.north)
            }
            _ => return Err(Error::Parse { line, msg: "east and north must both be set".into() }),
        };

        match frame {
            None => frame = Some((zone, line)),
            Some((z, _)) if z != zone => {
                return Err(Error::MixedZones {
                    line,
                    expected: zone_label(z),
                    found: zone_label(zone),
                });
            }
            _ => {}
        }

        seen.insert(id.clone(), line);
        out.push(ImageRecord {
            id,
            pose: GeoPose::new(east, north, heading)?,
            zone,
            latlon,
            source_uri: field("uri").map(str::to_owned),
            features_ref: field("features_ref").map(str::to_owned),
        });
    }
    Ok(out)
}

/// Writes records in the manifest format. Optional columns are emitted when
/// at least one record carries the value. Floats use the shortest exact
/// representation, so parse -> write -> parse is the identity.
pub fn write_manifest<W: Write>(records: &[ImageRecord], writer: W) -> Result<()> {
    let has_zone = records.iter().any(|r| r.zone.is_some());
    let has_ll = records.iter().any(|r| r.latlon.is_some());
    let has_uri = records.iter().any(|r| r.source_uri.is_some());
    let has_feat = records.iter().any(|r| r.features_ref.is_some());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id", "east", "north", "heading"];
    if has_zone {
        header.push("zone");
    }
    if has_ll {
        header.extend(["lat", "lon"]);
    }
    if has_uri {
        header.push("uri");
    }
    if has_feat {
        header.push("features_ref");
    }
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.id.clone(),
            r.pose.east.to_string(),
            r.pose.north.to_string(),
            r.pose.heading.to_string(),
        ];
        if has_zone {
            row.push(r.zone.map(|z| z.to_string()).unwrap_or_default());
        }
        if has_ll {
            match r.latlon {
                Some(ll) => row.extend([ll.latitude.to_string(), ll.longitude.to_string()]),
                None => row.extend([String::new(), String::new()]),
            }
        }
        if has_uri {
            row.push(r.source_uri.clone().unwrap_or_default());
        }
        if has_feat {
            row.push(r.features_ref.clone().unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `@{east:010.2}@{north:011.2}@{heading:05.1}@{id}@`
pub fn encode_record_name(r: &ImageRecord) -> Result<String> {
    if r.id.contains('@') || r.id.is_empty() {
        return Err(Error::Invalid(format!("id `{}` cannot be encoded in a file name", r.id)));
    }
    Ok(format!(
        "@{:010.2}@{:011.2}@{:05.1}@{}@",
        r.pose.east, r.pose.north, r.pose.heading, r.id
    ))
}

pub fn decode_record_name(s: &str) -> Result<ImageRecord> {
    let bad = |msg: String| Error::Parse { line: 0, msg };
    let parts: Vec<&str> = s.split('@').collect();
    if parts.len() != 6 || !parts[0].is_empty() || !parts[5].is_empty() {
        return Err(bad(format!(
            "`{s}`: expected 4 `@`-delimited fields, found {}",
            parts.len().saturating_sub(2)
        )));
    }
    let num = |i: usize, what: &str| -> Result<f64> {
        parts[i]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| bad(format!("`{s}`: {what} `{}` is not a number", parts[i])))
    };
    let (east, north, heading) = (num(1, "east")?, num(2, "north")?, num(3, "heading")?);
    if parts[4].is_empty() {
        return Err(bad(format!("`{s}`: empty id")));
    }
    Ok(ImageRecord::new(parts[4], GeoPose::new(east, north, heading)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<ImageRecord>,
    pub val_db: Vec<ImageRecord>,
    pub val_queries: Vec<ImageRecord>,
}

/// Random-by-record split. `⌊n·fraction⌋` records go to each of the
/// validation queries and the validation database; the rest train. Each list
/// keeps the input order.
pub fn split_validation(records: &[ImageRecord], fraction: f64, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(Error::Invalid(format!("validation fraction {fraction} outside (0, 0.5]")));
    }
    let n = records.len();
    let k = (n as f64 * fraction).floor() as usize;
    if k == 0 || n - 2 * k == 0 {
        return Err(Error::Invalid(format!(
            "{n} records are not enough for a validation fraction of {fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // 0 = train, 1 = db, 2 = query
    let mut role = vec![0u8; n];
    for &i in &order[..k] {
        role[i] = 2;
    }
    for &i in &order[k..2 * k] {
        role[i] = 1;
    }
    let mut split = Split { train: Vec::new(), val_db: Vec::new(), val_queries: Vec::new() };
    for (r, rec) in role.into_iter().zip(records) {
        match r {
            0 => split.train.push(rec.clone()),
            1 => split.val_db.push(rec.clone()),
            _ => split.val_queries.push(rec.clone()),
        }
    }
    Ok(split)
}
