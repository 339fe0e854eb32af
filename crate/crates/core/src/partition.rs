//! Geographic classes and CosPlace groups.
//!
//! A class is the set of images whose `(east, north, heading)` fall in the same
//! floor-quantized cell: `(⌊east/M⌋, ⌊north/M⌋, ⌊heading/α⌋)`. A group collects
//! the classes whose indices agree modulo `(N, N, L)`. Classes of one group are
//! never adjacent (for `N > 1` and `L > 1`) and are at least `M·(N-1)` metres
//! or `α·(L-1)` degrees apart, so each group can be trained as an ordinary
//! classification dataset.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ImageRecord;

/// Position in metres (UTM east/north) plus compass heading in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPose {
    pub east: f64,
    pub north: f64,
    pub heading: f64,
}

impl GeoPose {
    /// Builds a pose, wrapping the heading into [0, 360).
    pub fn new(east: f64, north: f64, heading: f64) -> Result<Self> {
        if !east.is_finite() || !north.is_finite() || !heading.is_finite() {
            return Err(Error::NonFinite("pose".into()));
        }
        Ok(Self {
            east,
            north,
            heading: normalize_heading(heading),
        })
    }

    /// Planar distance in metres; both poses must be in the same frame.
    pub fn distance(&self, other: &GeoPose) -> f64 {
        (self.east - other.east).hypot(self.north - other.north)
    }
}

pub fn normalize_heading(h: f64) -> f64 {
    let w = h.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Smallest absolute difference between two headings, in [0, 180].
pub fn heading_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    /// Cell side `M`, metres.
    #[serde(default = "defaults::cell_size")]
    pub cell_size: f64,
    /// Heading bin width `α`, degrees; must divide 360.
    #[serde(default = "defaults::heading_bin")]
    pub heading_bin: f64,
    /// Spatial separation factor `N`.
    #[serde(default = "defaults::spatial_groups")]
    pub spatial_groups: u32,
    /// Heading separation factor `L`.
    #[serde(default = "defaults::heading_groups")]
    pub heading_groups: u32,
    #[serde(default = "defaults::min_images_per_class")]
    pub min_images_per_class: usize,
}

mod defaults {
    pub fn cell_size() -> f64 {
        10.0
    }
    pub fn heading_bin() -> f64 {
        30.0
    }
    pub fn spatial_groups() -> u32 {
        5
    }
    pub fn heading_groups() -> u32 {
        2
    }
    pub fn min_images_per_class() -> usize {
        10
    }
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            cell_size: defaults::cell_size(),
            heading_bin: defaults::heading_bin(),
            spatial_groups: defaults::spatial_groups(),
            heading_groups: defaults::heading_groups(),
            min_images_per_class: defaults::min_images_per_class(),
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::Config(format!("cell_size must be > 0, got {}", self.cell_size)));
        }
        if !(self.heading_bin > 0.0 && self.heading_bin <= 360.0) {
            return Err(Error::Config(format!(
                "heading_bin must be in (0, 360], got {}",
                self.heading_bin
            )));
        }
        let bins = 360.0 / self.heading_bin;
        if (bins - bins.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "heading_bin {} does not divide 360",
                self.heading_bin
            )));
        }
        if self.spatial_groups == 0 || self.heading_groups == 0 {
            return Err(Error::Config("spatial_groups and heading_groups must be >= 1".into()));
        }
        let bins = self.heading_bins();
        if !bins.is_multiple_of(self.heading_groups) {
            return Err(Error::Config(format!(
                "heading_groups {} must divide the number of heading bins {bins}",
                self.heading_groups
            )));
        }
        if bins == 1 && self.heading_groups != 1 {
            return Err(Error::Config("heading_bin 360 requires heading_groups 1".into()));
        }
        Ok(())
    }

    /// Number of heading bins, `360 / α`.
    pub fn heading_bins(&self) -> u32 {
        (360.0 / self.heading_bin).round() as u32
    }

    /// `N · N · L`.
    pub fn group_count(&self) -> usize {
        (self.spatial_groups as usize).pow(2) * self.heading_groups as usize
    }
}

/// Quantized cell and heading bin of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassId {
    pub cell_east: i64,
    pub cell_north: i64,
    pub heading_bin: u32,
}

impl ClassId {
    pub fn new(cell_east: i64, cell_north: i64, heading_bin: u32) -> Self {
        Self { cell_east, cell_north, heading_bin }
    }
}

impl std::fmt::Display for ClassId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.cell_east, self.cell_north, self.heading_bin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupId {
    pub east_residue: u32,
    pub north_residue: u32,
    pub heading_residue: u32,
}

impl GroupId {
    pub fn new(east_residue: u32, north_residue: u32, heading_residue: u32) -> Self {
        Self { east_residue, north_residue, heading_residue }
    }
}

impl std::fmt::Display for GroupId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "G{}:{}:{}", self.east_residue, self.north_residue, self.heading_residue)
    }
}

impl std::str::FromStr for GroupId {
    type Err = Error;

    /// Parses the display form `G<e>:<n>:<h>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad group id `{s}`"));
        let parts: Vec<u32> = s
            .strip_prefix('G')
            .ok_or_else(bad)?
            .split(':')
            .map(|p| p.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        match parts[..] {
            [e, n, h] => Ok(GroupId::new(e, n, h)),
            _ => Err(bad()),
        }
    }
}

pub fn assign_class(pose: &GeoPose, cfg: &PartitionConfig) -> ClassId {
    let bins = cfg.heading_bins();
    let h = (normalize_heading(pose.heading) / cfg.heading_bin).floor() as i64;
    ClassId {
        cell_east: (pose.east / cfg.cell_size).floor() as i64,
        cell_north: (pose.north / cfg.cell_size).floor() as i64,
        heading_bin: h.clamp(0, i64::from(bins) - 1) as u32,
    }
}

pub fn assign_group(class: &ClassId, cfg: &PartitionConfig) -> GroupId {
    let n = i64::from(cfg.spatial_groups);
    GroupId {
        east_residue: class.cell_east.rem_euclid(n) as u32,
        north_residue: class.cell_north.rem_euclid(n) as u32,
        heading_residue: class.heading_bin % cfg.heading_groups,
    }
}

/// All `N·N·L` groups in lexicographic `(u, v, w)` order.
pub fn enumerate_groups(cfg: &PartitionConfig) -> Vec<GroupId> {
    let n = cfg.spatial_groups;
    let l = cfg.heading_groups;
    let mut out = Vec::with_capacity(cfg.group_count());
    for u in 0..n {
        for v in 0..n {
            for w in 0..l {
                out.push(GroupId::new(u, v, w));
            }
        }
    }
    out
}

/// Whether an infinitesimal change of position or heading can move an image
/// between the two classes: Chebyshev distance ≤ 1 on cells (diagonals count)
/// and circular bin distance ≤ 1 on headings.
pub fn adjacent(a: &ClassId, b: &ClassId, cfg: &PartitionConfig) -> bool {
    if a == b {
        return false;
    }
    let bins = i64::from(cfg.heading_bins());
    let dh = (i64::from(a.heading_bin) - i64::from(b.heading_bin)).rem_euclid(bins);
    let dh = dh.min(bins - dh);
    (a.cell_east - b.cell_east).abs() <= 1 && (a.cell_north - b.cell_north).abs() <= 1 && dh <= 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    config: PartitionConfig,
    pub(crate) class_members: BTreeMap<ClassId, Vec<String>>,
    pub(crate) class_group: BTreeMap<ClassId, GroupId>,
    pub(crate) group_classes: BTreeMap<GroupId, Vec<ClassId>>,
    discarded_classes: usize,
    discarded_images: usize,
}

pub fn build_partition(records: &[ImageRecord], cfg: &PartitionConfig) -> Result<Partition> {
    cfg.validate()?;
    if let Some(first) = records.first() {
        if let Some(bad) = records.iter().find(|r| r.zone != first.zone) {
            return Err(Error::MixedZones {
                line: 0,
                expected: crate::ingest::zone_label(first.zone),
                found: format!("{} (record `{}`)", crate::ingest::zone_label(bad.zone), bad.id),
            });
        }
    }

    let assigned: Vec<(ClassId, &str)> = records
        .par_iter()
        .map(|r| (assign_class(&r.pose, cfg), r.id.as_str()))
        .collect();

    let mut all: BTreeMap<ClassId, Vec<String>> = BTreeMap::new();
    for (class, id) in assigned {
        all.entry(class).or_default().push(id.to_owned());
    }

    let mut class_members = BTreeMap::new();
    let mut discarded_classes = 0;
    let mut discarded_images = 0;
    for (class, mut members) in all {
        if members.len() < cfg.min_images_per_class {
            discarded_classes += 1;
            discarded_images += members.len();
            continue;
        }
        members.sort_unstable();
        class_members.insert(class, members);
    }
    if class_members.is_empty() {
        return Err(Error::EmptyPartition {
            min_images: cfg.min_images_per_class,
            discarded_classes,
        });
    }

    let mut class_group = BTreeMap::new();
    let mut group_classes: BTreeMap<GroupId, Vec<ClassId>> = BTreeMap::new();
    // BTreeMap iteration is lexicographic on ClassId, so each group's list is sorted.
    for class in class_members.keys() {
        let g = assign_group(class, cfg);
        class_group.insert(*class, g);
        group_classes.entry(g).or_default().push(*class);
    }

    Ok(Partition {
        config: *cfg,
        class_members,
        class_group,
        group_classes,
        discarded_classes,
        discarded_images,
    })
}

impl Partition {
    pub fn config(&self) -> &PartitionConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.class_members.len()
    }

    pub fn num_images(&self) -> usize {
        self.class_members.values().map(Vec::len).sum()
    }

    pub fn discarded_classes(&self) -> usize {
        self.discarded_classes
    }

    pub fn discarded_images(&self) -> usize {
        self.discarded_images
    }

    pub fn classes(&self) -> impl Iterator<Item = (&ClassId, &[String])> {
        self.class_members.iter().map(|(c, m)| (c, m.as_slice()))
    }

    pub fn members(&self, class: &ClassId) -> Option<&[String]> {
        self.class_members.get(class).map(Vec::as_slice)
    }

    pub fn group_of(&self, class: &ClassId) -> Option<GroupId> {
        self.class_group.get(class).copied()
    }

    /// Classes of a group; the position in the slice is the class's label index.
    pub fn classes_in(&self, group: &GroupId) -> &[ClassId] {
        self.group_classes.get(group).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn nonempty_groups(&self) -> impl Iterator<Item = (&GroupId, &[ClassId])> {
        self.group_classes.iter().map(|(g, c)| (g, c.as_slice()))
    }

    pub fn stats(&self) -> PartitionStats {
        partition_stats(self)
    }

    pub fn to_json(&self) -> Result<String> {
        self.to_json_with_provenance(None)
    }

    /// Like [`Partition::to_json`], recording `provenance` (e.g. the run config) in the document.
    pub fn to_json_with_provenance(&self, provenance: Option<&str>) -> Result<String> {
        let doc = PartitionDocument {
            format: PARTITION_FORMAT.into(),
            version: PARTITION_VERSION,
            provenance: provenance.map(str::to_owned),
            config: self.config,
            discarded_classes: self.discarded_classes,
            discarded_images: self.discarded_images,
            classes: self
                .class_members
                .iter()
                .map(|(c, m)| ClassEntry {
                    class: [c.cell_east, c.cell_north, i64::from(c.heading_bin)],
                    group: group_triple(&self.class_group[c]),
                    members: m.clone(),
                })
                .collect(),
            groups: self
                .group_classes
                .iter()
                .map(|(g, cs)| GroupEntry {
                    group: group_triple(g),
                    classes: cs
                        .iter()
                        .map(|c| [c.cell_east, c.cell_north, i64::from(c.heading_bin)])
                        .collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parses and fully re-validates a partition document.
    pub fn from_json(s: &str) -> Result<Self> {
        let doc: PartitionDocument = serde_json::from_str(s)?;
        if doc.format != PARTITION_FORMAT || doc.version != PARTITION_VERSION {
            return Err(Error::Format(format!(
                "unsupported partition document {} v{}",
                doc.format, doc.version
            )));
        }
        let cfg = doc.config;
        cfg.validate()?;
        let mut class_members = BTreeMap::new();
        let mut class_group = BTreeMap::new();
        for e in doc.classes {
            let class = class_from_triple(e.class)?;
            let group = GroupId::new(e.group[0], e.group[1], e.group[2]);
            if group != assign_group(&class, &cfg) {
                return Err(Error::Format(format!("class {class} stored in wrong group {group}")));
            }
            if e.members.len() < cfg.min_images_per_class || e.members.is_empty() {
                return Err(Error::Format(format!("class {class} has too few members")));
            }
            if class_members.insert(class, e.members).is_some() {
                return Err(Error::Format(format!("class {class} listed twice")));
            }
            class_group.insert(class, group);
        }
        let mut group_classes = BTreeMap::new();
        for g in doc.groups {
            let group = GroupId::new(g.group[0], g.group[1], g.group[2]);
            let classes = g
                .classes
                .into_iter()
                .map(class_from_triple)
                .collect::<Result<Vec<_>>>()?;
            group_classes.insert(group, classes);
        }
        let mut expected: BTreeMap<GroupId, Vec<ClassId>> = BTreeMap::new();
        for (c, g) in &class_group {
            expected.entry(*g).or_default().push(*c);
        }
        if expected != group_classes {
            return Err(Error::Format("group tables disagree with class tables".into()));
        }
        Ok(Self {
            config: cfg,
            class_members,
            class_group,
            group_classes,
            discarded_classes: doc.discarded_classes,
            discarded_images: doc.discarded_images,
        })
    }
}

fn group_triple(g: &GroupId) -> [u32; 3] {
    [g.east_residue, g.north_residue, g.heading_residue]
}

fn class_from_triple(t: [i64; 3]) -> Result<ClassId> {
    let h = u32::try_from(t[2]).map_err(|_| Error::Format(format!("bad heading bin {}", t[2])))?;
    Ok(ClassId::new(t[0], t[1], h))
}

pub const PARTITION_FORMAT: &str = "cosplace-partition";
pub const PARTITION_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionDocument {
    format: String,
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<String>,
    config: PartitionConfig,
    discarded_classes: usize,
    discarded_images: usize,
    classes: Vec<ClassEntry>,
    groups: Vec<GroupEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassEntry {
    class: [i64; 3],
    group: [u32; 3],
    members: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupEntry {
    group: [u32; 3],
    classes: Vec<[i64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub total_groups: usize,
    pub nonempty_groups: usize,
    /// Class count for every enumerated group, in enumeration order.
    pub classes_per_group: Vec<(GroupId, usize)>,
    pub retained_classes: usize,
    pub retained_images: usize,
    pub discarded_classes: usize,
    pub discarded_images: usize,
    pub min_images_per_class: usize,
    pub max_images_per_class: usize,
    pub mean_images_per_class: f64,
    /// Class size -> number of classes with that size.
    pub class_size_histogram: BTreeMap<usize, usize>,
}

pub fn partition_stats(p: &Partition) -> PartitionStats {
    let classes_per_group: Vec<(GroupId, usize)> = enumerate_groups(&p.config)
        .into_iter()
        .map(|g| (g, p.classes_in(&g).len()))
        .collect();
    let mut hist = BTreeMap::new();
    for m in p.class_members.values() {
        *hist.entry(m.len()).or_insert(0) += 1;
    }
    let retained_classes = p.num_classes();
    let retained_images = p.num_images();
    PartitionStats {
        total_groups: p.config.group_count(),
        nonempty_groups: p.group_classes.len(),
        classes_per_group,
        retained_classes,
        retained_images,
        discarded_classes: p.discarded_classes,
        discarded_images: p.discarded_images,
        min_images_per_class: hist.keys().next().copied().unwrap_or(0),
        max_images_per_class: hist.keys().next_back().copied().unwrap_or(0),
        mean_images_per_class: if retained_classes == 0 {
            0.0
        } else {
            retained_images as f64 / retained_classes as f64
        },
        class_size_histogram: hist,
    }
}

impl PartitionStats {
    /// Stats of a partition with nothing in it.
    pub fn empty(cfg: &PartitionConfig) -> Self {
        PartitionStats {
            total_groups: cfg.group_count(),
            nonempty_groups: 0,
            classes_per_group: enumerate_groups(cfg).into_iter().map(|g| (g, 0)).collect(),
            retained_classes: 0,
            retained_images: 0,
            discarded_classes: 0,
            discarded_images: 0,
            min_images_per_class: 0,
            max_images_per_class: 0,
            mean_images_per_class: 0.0,
            class_size_histogram: BTreeMap::new(),
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "groups: {} ({} non-empty)\nclasses: {} retained, {} discarded\nimages: {} retained, {} discarded\nimages/class: min {} max {} mean {:.2}\n",
            self.total_groups,
            self.nonempty_groups,
            self.retained_classes,
            self.discarded_classes,
            self.retained_images,
            self.discarded_images,
            self.min_images_per_class,
            self.max_images_per_class,
            self.mean_images_per_class,
        ));
        s.push_str("group\tclasses\n");
        for (g, n) in &self.classes_per_group {
            s.push_str(&format!("{g}\t{n}\n"));
        }
        s
    }
}
