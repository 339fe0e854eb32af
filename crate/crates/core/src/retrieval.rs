//! Exhaustive inner-product search over unit descriptors and recall@N
//! evaluation with a metric distance threshold.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, put_string, ByteReader, Section};
use crate::embed::{dot, l2_norm, Descriptor};
use crate::error::{Error, Result};
use crate::geodesy::UtmZone;
use crate::partition::GeoPose;

/// Norm tolerance for indexed rows.
pub const INDEX_NORM_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 20];
pub const DEFAULT_THRESHOLD_M: f64 = 25.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorIndex {
    ids: Vec<String>,
    poses: Vec<GeoPose>,
    zone: Option<UtmZone>,
    dim: usize,
    matrix: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub id: String,
    pub similarity: f64,
}

/// Work done by one search, for complexity checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SearchStats {
    pub dot_products: u64,
    pub multiply_adds: u64,
}

pub fn build_index(
    descriptors: &[Descriptor],
    ids: &[String],
    poses: &[GeoPose],
    zone: Option<UtmZone>,
) -> Result<DescriptorIndex> {
    if descriptors.len() != ids.len() || ids.len() != poses.len() {
        return Err(Error::Shape(format!(
            "{} descriptors, {} ids, {} poses",
            descriptors.len(),
            ids.len(),
            poses.len()
        )));
    }
    let dim = descriptors.first().map_or(0, Descriptor::dim);
    let mut seen = HashSet::with_capacity(ids.len());
    let mut matrix = Vec::with_capacity(descriptors.len() * dim);
    for (d, id) in descriptors.iter().zip(ids) {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateKey(id.clone()));
        }
        if d.dim() != dim {
            return Err(Error::Shape(format!("descriptor `{id}` has dim {}, expected {dim}", d.dim())));
        }
        let n = l2_norm(d.values());
        if !((n - 1.0).abs() <= INDEX_NORM_TOLERANCE) {
            return Err(Error::Degenerate(format!("descriptor `{id}` has norm {n}")));
        }
        matrix.extend_from_slice(d.values());
    }
    Ok(DescriptorIndex { ids: ids.to_vec(), poses: poses.to_vec(), zone, dim, matrix })
}

fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

impl DescriptorIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn zone(&self) -> Option<UtmZone> {
        self.zone
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn pose(&self, i: usize) -> &GeoPose {
        &self.poses[i]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn knn(&self, query: &Descriptor, k: usize) -> Result<Vec<Neighbor>> {
        Ok(self.knn_with_stats(query, k)?.0)
    }

    /// Top-`k` rows by inner product, descending; ties go to the earlier row.
    pub fn knn_with_stats(&self, query: &Descriptor, k: usize) -> Result<(Vec<Neighbor>, SearchStats)> {
        if k == 0 {
            return Err(Error::Invalid("k must be >= 1".into()));
        }
        if self.is_empty() {
            return Ok((Vec::new(), SearchStats::default()));
        }
        if query.dim() != self.dim {
            return Err(Error::Shape(format!("query dim {} vs index dim {}", query.dim(), self.dim)));
        }
        let q = query.values();
        let mut scored: Vec<(f64, usize)> = self
            .matrix
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(i, row)| (dot(row, q), i))
            .collect();
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(rank_order);
        let stats = SearchStats {
            dot_products: self.len() as u64,
            multiply_adds: (self.len() * self.dim) as u64,
        };
        let out = scored
            .into_iter()
            .map(|(similarity, index)| Neighbor { index, id: self.ids[index].clone(), similarity })
            .collect();
        Ok((out, stats))
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let mut head = Vec::new();
        head.extend_from_slice(&(self.len() as u64).to_le_bytes());
        head.extend_from_slice(&(self.dim as u32).to_le_bytes());
        put_string(&mut head, &self.zone.map(|z| z.to_string()).unwrap_or_default());
        let mut ids = Vec::new();
        for id in &self.ids {
            put_string(&mut ids, id);
        }
        let poses: Vec<f64> = self.poses.iter().flat_map(|p| [p.east, p.north, p.heading]).collect();
        checkpoint::write_container(
            w,
            INDEX_MAGIC,
            &[
                Section::new(b"HEAD", head),
                Section::new(b"IDS ", ids),
                Section::new(b"POSE", checkpoint::f64s_to_bytes(&poses)),
                Section::new(b"DESC", checkpoint::f64s_to_bytes(&self.matrix)),
            ],
        )
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let sections = checkpoint::read_container(r, INDEX_MAGIC)?;
        let get = |tag: &[u8; 4]| {
            sections
                .iter()
                .find(|s| &s.tag == tag)
                .map(|s| s.payload.as_slice())
                .ok_or_else(|| Error::Format(format!("index lacks {} section", String::from_utf8_lossy(tag))))
        };
        let mut h = ByteReader::new(get(b"HEAD")?);
        let count = h.u64()? as usize;
        let dim = h.u32()? as usize;
        let zone_s = h.string()?;
        let zone = if zone_s.is_empty() { None } else { Some(zone_s.parse()?) };
        let mut ir = ByteReader::new(get(b"IDS ")?);
        let ids = (0..count).map(|_| ir.string()).collect::<Result<Vec<_>>>()?;
        let pose_vals = checkpoint::bytes_to_f64s(get(b"POSE")?)?;
        let matrix = checkpoint::bytes_to_f64s(get(b"DESC")?)?;
        if pose_vals.len() != 3 * count || matrix.len() != dim * count {
            return Err(Error::Format("index payload sizes disagree with header".into()));
        }
        let poses = pose_vals
            .chunks_exact(3)
            .map(|p| GeoPose::new(p[0], p[1], p[2]))
            .collect::<Result<Vec<_>>>()?;
        let descriptors = matrix
            .chunks_exact(dim.max(1))
            .take(count)
            .map(|r| Descriptor::new(r.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        build_index(&descriptors, &ids, &poses, zone)
    }
}

pub const INDEX_MAGIC: &[u8; 4] = b"CPIX";

#[derive(Debug, Clone)]
pub struct EvalQuery {
    pub descriptor: Descriptor,
    pub pose: GeoPose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold_m: f64,
    pub num_queries: usize,
    pub database_size: usize,
    /// K -> fraction of queries with a correct match in the top K.
    pub recall_at: BTreeMap<usize, f64>,
    /// 1-based rank of the first correct match within the largest K searched.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub first_correct_rank: Vec<Option<usize>>,
}

pub fn recall_at_n(
    index: &DescriptorIndex,
    queries: &[EvalQuery],
    query_zone: Option<UtmZone>,
    ks: &[usize],
    threshold_m: f64,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Invalid("no queries".into()));
    }
    if ks.is_empty() || ks.contains(&0) || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid(format!("Ks must be strictly ascending and >= 1, got {ks:?}")));
    }
    if !(threshold_m >= 0.0) {
        return Err(Error::Invalid(format!("threshold {threshold_m} must be >= 0")));
    }
    if index.zone != query_zone {
        return Err(Error::ZoneMismatch {
            left: crate::ingest::zone_label(index.zone),
            right: crate::ingest::zone_label(query_zone),
        });
    }
    let kmax = *ks.last().unwrap();
    let ranks: Vec<Option<usize>> = queries
        .par_iter()
        .map(|q| {
            let hits = index.knn(&q.descriptor, kmax)?;
            Ok(hits
                .iter()
                .position(|n| index.poses[n.index].distance(&q.pose) <= threshold_m)
                .map(|r| r + 1))
        })
        .collect::<Result<_>>()?;
    let nq = queries.len() as f64;
    let recall_at = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64 / nq))
        .collect();
    Ok(EvalReport {
        threshold_m,
        num_queries: queries.len(),
        database_size: index.len(),
        recall_at,
        first_correct_rank: ranks,
    })
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }

    /// Header line for a table of reports, e.g. `method  R@1  R@5 ...`.
    pub fn table_header(&self) -> String {
        let mut s = format!("{:<24}", "method");
        for k in self.recall_at.keys() {
            s.push_str(&format!("{:>8}", format!("R@{k}")));
        }
        s
    }

    /// One table row with recalls in percent.
    pub fn table_row(&self, label: &str) -> String {
        let mut s = format!("{label:<24}");
        for v in self.recall_at.values() {
            s.push_str(&format!("{:>8.1}", v * 100.0));
        }
        s
    }
}
