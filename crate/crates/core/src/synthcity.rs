//! Synthetic geo-tagged worlds with known appearance structure.
//!
//! Places sit on a jittered grid, snapped to the centres of `cell_size`
//! cells; each place is photographed at `headings_per_place` headings centred
//! in `heading_bin` bins. All images of one (place, heading) share a latent
//! vector, so they depict the same scene and land in the same class.
//!
//! Features are a fixed random lift of the latent into `C×H×W`, plus
//! per-image nuisance confined to a low-rank channel subspace and small pixel
//! noise. A random projection keeps the nuisance, a trained one can remove it.
//! Query images additionally get a full-rank per-channel domain shift.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embed::{dot, l2_norm, Descriptor, FeatureMap, FeatureStore};
use crate::error::{Error, Result};
use crate::geodesy::{utm_to_latlon, Hemisphere, UtmCoord, UtmZone};
use crate::ingest::ImageRecord;
use crate::partition::{ClassId, GeoPose, GroupId, Partition};
use crate::seed::{derive_seed, hash_str};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CityConfig {
    /// Side of the square world, metres.
    pub extent: f64,
    pub place_spacing: f64,
    pub headings_per_place: usize,
    pub images_per_place_heading: usize,
    pub latent_dim: usize,
    /// `[C, H, W]`.
    pub feature_shape: [usize; 3],
    pub noise_sigma: f64,
    pub domain_shift_sigma: f64,
    /// Rank of the per-image nuisance subspace.
    pub nuisance_rank: usize,
    /// Cell side the world is laid out for (positions jitter by < cell_size/4).
    pub cell_size: f64,
    /// Heading bin the world is laid out for (headings jitter by < heading_bin/4).
    pub heading_bin: f64,
    pub origin_east: f64,
    pub origin_north: f64,
    pub zone_number: u8,
    pub seed: u64,
}

impl Default for CityConfig {
    fn default() -> Self {
        Self {
            extent: 1000.0,
            place_spacing: 100.0,
            headings_per_place: 4,
            images_per_place_heading: 12,
            latent_dim: 32,
            feature_shape: [64, 2, 2],
            noise_sigma: 1.5,
            domain_shift_sigma: 0.2,
            nuisance_rank: 16,
            cell_size: 10.0,
            heading_bin: 30.0,
            origin_east: 550_000.0,
            origin_north: 4_180_000.0,
            zone_number: 10,
            seed: 0,
        }
    }
}

impl CityConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be > 0, got {v}")))
            }
        };
        pos("extent", self.extent)?;
        pos("place_spacing", self.place_spacing)?;
        pos("cell_size", self.cell_size)?;
        pos("heading_bin", self.heading_bin)?;
        if self.headings_per_place == 0 || self.images_per_place_heading == 0 || self.latent_dim == 0 {
            return Err(Error::Config("counts must be >= 1".into()));
        }
        if self.feature_shape.contains(&0) {
            return Err(Error::Config("feature_shape entries must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.domain_shift_sigma >= 0.0) {
            return Err(Error::Config("noise sigmas must be >= 0".into()));
        }
        if self.place_spacing < self.cell_size {
            return Err(Error::Config("place_spacing must be at least cell_size".into()));
        }
        if 360.0 / self.headings_per_place as f64 + 1e-9 < self.heading_bin {
            return Err(Error::Config(format!(
                "{} headings per place do not fit in distinct {}-degree bins",
                self.headings_per_place, self.heading_bin
            )));
        }
        UtmZone::new(self.zone_number, Hemisphere::North)?;
        Ok(())
    }

    pub fn places_per_axis(&self) -> usize {
        (self.extent / self.place_spacing).floor() as usize
    }

    pub fn zone(&self) -> UtmZone {
        UtmZone { number: self.zone_number, hemisphere: Hemisphere::North }
    }
}

const FEATURE_OFFSET: f64 = 4.0;
const PIXEL_NOISE_FRACTION: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub config: CityConfig,
    pub records: Vec<ImageRecord>,
    pub features: FeatureStore,
    /// Unit latent per scene (place × heading), scene-major.
    latents: Vec<Vec<f64>>,
    scene_of: HashMap<String, usize>,
    place_centers: Vec<(f64, f64)>,
}

pub fn generate_city(cfg: &CityConfig) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let per_axis = cfg.places_per_axis();
    if per_axis == 0 {
        return Err(Error::Invalid(format!(
            "extent {} is smaller than one place spacing {}",
            cfg.extent, cfg.place_spacing
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1]));

    // Each place owns the whole cells of its grid square and sits at the
    // centre of one drawn uniformly, so with aligned origins the cell residues
    // modulo any divisor of the square's width in cells are uniform.
    let cells = |k: usize, origin: f64| {
        let lo = ((origin + k as f64 * cfg.place_spacing) / cfg.cell_size).ceil() as i64;
        let hi = ((origin + (k + 1) as f64 * cfg.place_spacing) / cfg.cell_size).floor() as i64 - 1;
        lo..=hi.max(lo)
    };
    let mut place_centers = Vec::with_capacity(per_axis * per_axis);
    for i in 0..per_axis {
        for j in 0..per_axis {
            let ce = rng.random_range(cells(i, cfg.origin_east));
            let cn = rng.random_range(cells(j, cfg.origin_north));
            place_centers.push(((ce as f64 + 0.5) * cfg.cell_size, (cn as f64 + 0.5) * cfg.cell_size));
        }
    }

    let headings: Vec<f64> = (0..cfg.headings_per_place)
        .map(|j| {
            let base = j as f64 * 360.0 / cfg.headings_per_place as f64;
            ((base / cfg.heading_bin).floor() + 0.5) * cfg.heading_bin
        })
        .collect();

    let num_scenes = place_centers.len() * headings.len();
    let latents = draw_latents(num_scenes, cfg.latent_dim, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2])))?;

    let [c, h, w] = cfg.feature_shape;
    let mut lift_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[3]));
    let lift: Vec<f64> = (0..c * cfg.latent_dim).map(|_| StandardNormal.sample(&mut lift_rng)).collect();
    let modulation: Vec<f64> = (0..c * h * w).map(|_| lift_rng.random_range(0.5..1.5)).collect();
    let nuisance_basis: Vec<f64> = (0..c * cfg.nuisance_rank)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut lift_rng);
            v / (cfg.nuisance_rank as f64).sqrt()
        })
        .collect();

    let zone = cfg.zone();
    let mut records = Vec::with_capacity(num_scenes * cfg.images_per_place_heading);
    let mut features = FeatureStore::new();
    let mut scene_of = HashMap::new();
    let quarter_cell = cfg.cell_size / 4.0;
    let quarter_bin = cfg.heading_bin / 4.0;
    for (p, &(pe, pn)) in place_centers.iter().enumerate() {
        for (hj, &heading) in headings.iter().enumerate() {
            let scene = p * headings.len() + hj;
            let signal: Vec<f64> = (0..c)
                .map(|ch| dot(&lift[ch * cfg.latent_dim..(ch + 1) * cfg.latent_dim], &latents[scene]))
                .collect();
            for k in 0..cfg.images_per_place_heading {
                let id = format!("p{p:04}_h{hj}_i{k:02}");
                let east = pe + rng.random_range(-quarter_cell..quarter_cell) * 0.999;
                let north = pn + rng.random_range(-quarter_cell..quarter_cell) * 0.999;
                let hd = heading + rng.random_range(-quarter_bin..quarter_bin) * 0.999;
                let pose = GeoPose::new(east, north, hd)?;
                let mut rec = ImageRecord::new(id.clone(), pose).with_zone(zone);
                rec.latlon = Some(utm_to_latlon(UtmCoord { east, north, zone })?);

                let mut img_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[4, hash_str(&id)]));
                let xi: Vec<f64> = (0..cfg.nuisance_rank).map(|_| StandardNormal.sample(&mut img_rng)).collect();
                let mut values = Vec::with_capacity(c * h * w);
                for ch in 0..c {
                    let nuisance = cfg.noise_sigma
                        * dot(&nuisance_basis[ch * cfg.nuisance_rank..(ch + 1) * cfg.nuisance_rank], &xi);
                    for px in 0..h * w {
                        let pixel: f64 = StandardNormal.sample(&mut img_rng);
                        values.push(
                            FEATURE_OFFSET
                                + modulation[ch * h * w + px] * signal[ch]
                                + nuisance
                                + cfg.noise_sigma * PIXEL_NOISE_FRACTION * pixel,
                        );
                    }
                }
                features.insert(id.clone(), FeatureMap::new(c, h, w, values)?)?;
                scene_of.insert(id, scene);
                records.push(rec);
            }
        }
    }

    Ok(SyntheticWorld { config: cfg.clone(), records, features, latents, scene_of, place_centers })
}

/// Unit latents: orthonormal when they fit, otherwise spread by pairwise repulsion.
fn draw_latents(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let mut z: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let nrm = l2_norm(&v);
            v.into_iter().map(|x| x / nrm).collect()
        })
        .collect();
    if dim >= n {
        // modified Gram-Schmidt
        for i in 0..n {
            for j in 0..i {
                let p = dot(&z[i], &z[j]);
                let zj = z[j].clone();
                z[i].iter_mut().zip(&zj).for_each(|(a, b)| *a -= p * b);
            }
            let nrm = l2_norm(&z[i]);
            if nrm < 1e-9 {
                return Err(Error::Degenerate("latent orthogonalization collapsed".into()));
            }
            z[i].iter_mut().for_each(|a| *a /= nrm);
        }
    } else {
        // gradient steps on the frame potential; the step stays below the
        // inverse of the frame operator's top eigenvalue (about n/dim)
        let step = dim as f64 / (4.0 * n as f64);
        for _ in 0..60 {
            let grads: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let mut g = vec![0.0; dim];
                    for j in 0..n {
                        if i != j {
                            let c = dot(&z[i], &z[j]);
                            g.iter_mut().zip(&z[j]).for_each(|(a, b)| *a += c * b);
                        }
                    }
                    g
                })
                .collect();
            for (zi, g) in z.iter_mut().zip(&grads) {
                zi.iter_mut().zip(g).for_each(|(a, b)| *a -= step * b);
                let nrm = l2_norm(zi);
                zi.iter_mut().for_each(|a| *a /= nrm);
            }
        }
    }
    // every scene must be distinguishable from every other
    for i in 0..n {
        for j in 0..i {
            if dot(&z[i], &z[j]) > 1.0 - 1e-6 {
                return Err(Error::Degenerate(format!("latents {i} and {j} coincide")));
            }
        }
    }
    Ok(z)
}

impl SyntheticWorld {
    pub fn zone(&self) -> UtmZone {
        self.config.zone()
    }

    pub fn num_places(&self) -> usize {
        self.place_centers.len()
    }

    pub fn num_scenes(&self) -> usize {
        self.latents.len()
    }

    pub fn scene_of(&self, id: &str) -> Result<usize> {
        self.scene_of.get(id).copied().ok_or_else(|| Error::Invalid(format!("unknown image `{id}`")))
    }

    pub fn place_of(&self, id: &str) -> Result<usize> {
        Ok(self.scene_of(id)? / self.config.headings_per_place)
    }

    /// Normalized ground-truth latent of the image's scene.
    pub fn oracle_descriptor(&self, id: &str) -> Result<Descriptor> {
        Descriptor::normalized(self.latents[self.scene_of(id)?].clone())
    }

    /// Features of an image as seen from the query side: the stored map plus a
    /// deterministic per-image, per-channel shift.
    pub fn query_feature_map(&self, id: &str) -> Result<FeatureMap> {
        let base = self.features.require(id)?;
        let (c, h, w) = base.shape();
        let sigma = self.config.domain_shift_sigma;
        if sigma == 0.0 {
            return Ok(base.clone());
        }
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &[5, hash_str(id)]));
        let shift: Vec<f64> = (0..c).map(|_| normal.sample(&mut rng)).collect();
        let values = base
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v + shift[i / (h * w)])
            .collect();
        FeatureMap::new(c, h, w, values)
    }

    /// Oracle descriptors as a `latent_dim × 1 × 1` feature store.
    pub fn oracle_store(&self) -> Result<FeatureStore> {
        let mut s = FeatureStore::new();
        for r in &self.records {
            let d = self.oracle_descriptor(&r.id)?;
            s.insert(r.id.clone(), FeatureMap::new(d.dim(), 1, 1, d.into_inner())?)?;
        }
        Ok(s)
    }

    /// Largest cosine between latents of two different places.
    pub fn max_cross_place_similarity(&self) -> f64 {
        let hp = self.config.headings_per_place;
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.latents.len() {
            for j in 0..i {
                if i / hp != j / hp {
                    worst = worst.max(dot(&self.latents[i], &self.latents[j]));
                }
            }
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    /// An image listed under a class its pose does not quantize to.
    WrongClass { image: String, listed: ClassId, computed: ClassId },
    /// A retained class missing from every group table.
    Ungrouped { class: ClassId },
    /// A class listed in more than one group, or in a group other than its mapping.
    MultipleGroups { class: ClassId, groups: Vec<GroupId> },
    /// Group differs from the modular rule.
    GroupRule { class: ClassId, expected: GroupId, found: GroupId },
    GroupOutOfRange { group: GroupId },
    GroupCount { expected: usize, found: usize },
    /// Two images of different classes in one group that are too close in both position and heading.
    TooClose { class_a: ClassId, class_b: ClassId, image_a: String, image_b: String, distance: f64, heading_difference: f64 },
    AdjacentInGroup { class_a: ClassId, class_b: ClassId, group: GroupId },
}

impl Violation {
    /// Classes the violation refers to.
    pub fn classes(&self) -> Vec<ClassId> {
        match self {
            Violation::WrongClass { listed, computed, .. } => vec![*listed, *computed],
            Violation::Ungrouped { class }
            | Violation::MultipleGroups { class, .. }
            | Violation::GroupRule { class, .. } => vec![*class],
            Violation::TooClose { class_a, class_b, .. } | Violation::AdjacentInGroup { class_a, class_b, .. } => {
                vec![*class_a, *class_b]
            }
            Violation::GroupOutOfRange { .. } | Violation::GroupCount { .. } => vec![],
        }
    }
}

/// Brute-force check of the four group properties, computed from the image
/// poses and the partition's published tables only.
pub fn oracle_pairwise_check(records: &[ImageRecord], partition: &Partition) -> Vec<Violation> {
    let cfg = partition.config();
    let m = cfg.cell_size;
    let alpha = cfg.heading_bin;
    let n = i64::from(cfg.spatial_groups);
    let l = i64::from(cfg.heading_groups);
    let bins = (360.0 / alpha).round() as i64;
    let mut out = Vec::new();

    let quantize = |p: &GeoPose| -> ClassId {
        let h = ((p.heading.rem_euclid(360.0) / alpha).floor() as i64).min(bins - 1);
        ClassId::new((p.east / m).floor() as i64, (p.north / m).floor() as i64, h as u32)
    };
    let rule = |c: &ClassId| -> GroupId {
        GroupId::new(
            c.cell_east.rem_euclid(n) as u32,
            c.cell_north.rem_euclid(n) as u32,
            (i64::from(c.heading_bin) % l) as u32,
        )
    };

    // Property 3
    let expected_groups = (n * n * l) as usize;
    let enumerated = crate::partition::enumerate_groups(cfg);
    if enumerated.len() != expected_groups {
        out.push(Violation::GroupCount { expected: expected_groups, found: enumerated.len() });
    }

    // Property 1: membership in exactly one group, consistent with the mapping and the rule.
    let mut listed_in: BTreeMap<ClassId, Vec<GroupId>> = BTreeMap::new();
    for (g, classes) in partition.nonempty_groups() {
        if i64::from(g.east_residue) >= n || i64::from(g.north_residue) >= n || i64::from(g.heading_residue) >= l {
            out.push(Violation::GroupOutOfRange { group: *g });
        }
        for c in classes {
            listed_in.entry(*c).or_default().push(*g);
        }
    }
    let mut group_of: BTreeMap<ClassId, GroupId> = BTreeMap::new();
    for (class, _) in partition.classes() {
        let mapped = partition.group_of(class);
        let lists = listed_in.get(class).cloned().unwrap_or_default();
        match (mapped, lists.as_slice()) {
            (None, []) => {
                out.push(Violation::Ungrouped { class: *class });
                continue;
            }
            (Some(g), [only]) if *only == g => {}
            (m, ls) => {
                let mut groups = ls.to_vec();
                groups.extend(m);
                groups.sort();
                groups.dedup();
                out.push(Violation::MultipleGroups { class: *class, groups });
            }
        }
        let found = mapped.or_else(|| lists.first().copied()).expect("mapped or listed");
        let expected = rule(class);
        if expected != found {
            out.push(Violation::GroupRule { class: *class, expected, found });
        }
        group_of.insert(*class, found);
    }

    // Images as the partition sees them.
    let poses: HashMap<&str, &GeoPose> = records.iter().map(|r| (r.id.as_str(), &r.pose)).collect();
    let mut by_group: BTreeMap<GroupId, Vec<(&str, ClassId, &GeoPose)>> = BTreeMap::new();
    for (class, members) in partition.classes() {
        for id in members {
            let Some(pose) = poses.get(id.as_str()) else { continue };
            let computed = quantize(pose);
            if computed != *class {
                out.push(Violation::WrongClass { image: id.clone(), listed: *class, computed });
            }
            by_group.entry(group_of[class]).or_default().push((id.as_str(), *class, pose));
        }
    }

    // Property 2
    let min_dist = m * (n - 1) as f64;
    let min_turn = alpha * (l - 1) as f64;
    for imgs in by_group.values() {
        for (i, a) in imgs.iter().enumerate() {
            for b in &imgs[i + 1..] {
                if a.1 == b.1 {
                    continue;
                }
                let dist = (a.2.east - b.2.east).hypot(a.2.north - b.2.north);
                let dh = {
                    let d = (a.2.heading - b.2.heading).rem_euclid(360.0);
                    d.min(360.0 - d)
                };
                if !(dist >= min_dist || dh > min_turn) {
                    out.push(Violation::TooClose {
                        class_a: a.1,
                        class_b: b.1,
                        image_a: a.0.to_owned(),
                        image_b: b.0.to_owned(),
                        distance: dist,
                        heading_difference: dh,
                    });
                }
            }
        }
    }

    // Property 4 (exempt when N = 1 or L = 1)
    if n > 1 && l > 1 {
        let classes: Vec<(&ClassId, &GroupId)> = group_of.iter().collect();
        for (i, (a, ga)) in classes.iter().enumerate() {
            for (b, gb) in &classes[i + 1..] {
                if ga != gb {
                    continue;
                }
                let dh = (i64::from(a.heading_bin) - i64::from(b.heading_bin)).rem_euclid(bins);
                let touching = (a.cell_east - b.cell_east).abs() <= 1
                    && (a.cell_north - b.cell_north).abs() <= 1
                    && dh.min(bins - dh) <= 1;
                if touching {
                    out.push(Violation::AdjacentInGroup { class_a: **a, class_b: **b, group: **ga });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{build_partition, PartitionConfig};

    fn small(seed: u64) -> CityConfig {
        CityConfig {
            extent: 300.0,
            place_spacing: 50.0,
            headings_per_place: 4,
            images_per_place_heading: 3,
            latent_dim: 8,
            feature_shape: [12, 2, 1],
            nuisance_rank: 2,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn record_count_and_layout() {
        let cfg = CityConfig { images_per_place_heading: 12, ..Default::default() };
        let w = generate_city(&cfg).unwrap();
        assert_eq!(w.records.len(), 4800);
        assert_eq!(w.num_places(), 100);
        for r in &w.records {
            assert!((0.0..360.0).contains(&r.pose.heading));
            assert!(r.pose.east >= cfg.origin_east && r.pose.east <= cfg.origin_east + cfg.extent);
            assert!(r.pose.north >= cfg.origin_north && r.pose.north <= cfg.origin_north + cfg.extent);
            assert_eq!(r.zone, Some(w.zone()));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_city(&small(4)).unwrap();
        let b = generate_city(&small(4)).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.features, b.features);
        assert_ne!(a.features, generate_city(&small(5)).unwrap().features);
    }

    #[test]
    fn noiseless_scenes_share_features() {
        let w = generate_city(&CityConfig { noise_sigma: 0.0, ..small(1) }).unwrap();
        let a = w.features.get("p0003_h1_i00").unwrap();
        for k in 1..3 {
            assert_eq!(w.features.get(&format!("p0003_h1_i{k:02}")).unwrap(), a);
        }
        assert_ne!(w.features.get("p0003_h2_i00").unwrap(), a);
    }

    #[test]
    fn scene_images_share_a_class_and_oracle() {
        let w = generate_city(&small(2)).unwrap();
        let cfg = PartitionConfig { min_images_per_class: 0, ..Default::default() };
        let p = build_partition(&w.records, &cfg).unwrap();
        assert_eq!(p.num_classes(), w.num_scenes());
        assert_eq!(w.oracle_descriptor("p0001_h0_i00").unwrap(), w.oracle_descriptor("p0001_h0_i02").unwrap());
        assert!(w.oracle_descriptor("nope").is_err());
        // every cross-scene similarity is below the within-scene similarity of 1
        assert!(w.max_cross_place_similarity() < 1.0 - 1e-6);
    }

    #[test]
    fn oracle_latents_are_orthogonal_when_they_fit() {
        let w = generate_city(&CityConfig { latent_dim: 40, extent: 100.0, place_spacing: 50.0, ..small(3) }).unwrap();
        assert_eq!(w.num_scenes(), 16);
        assert!(w.max_cross_place_similarity().abs() < 1e-12);
    }

    #[test]
    fn extent_must_hold_a_place() {
        assert!(generate_city(&CityConfig { extent: 40.0, ..small(0) }).is_err());
    }

    #[test]
    fn valid_partitions_have_no_violations() {
        for (n, l) in [(5, 2), (1, 1), (3, 3), (2, 4)] {
            let w = generate_city(&small(7)).unwrap();
            let cfg = PartitionConfig { spatial_groups: n, heading_groups: l, min_images_per_class: 0, ..Default::default() };
            let p = build_partition(&w.records, &cfg).unwrap();
            assert!(oracle_pairwise_check(&w.records, &p).is_empty());
        }
    }

    #[test]
    fn moved_class_is_reported() {
        let w = generate_city(&CityConfig { place_spacing: 10.0, extent: 60.0, ..small(9) }).unwrap();
        let cfg = PartitionConfig { min_images_per_class: 0, ..Default::default() };
        let mut p = build_partition(&w.records, &cfg).unwrap();
        let (victim, from) = p.class_group.iter().map(|(c, g)| (*c, *g)).nth(5).unwrap();
        let to = GroupId::new((from.east_residue + 1) % 5, from.north_residue, from.heading_residue);
        p.class_group.insert(victim, to);
        p.group_classes.get_mut(&from).unwrap().retain(|c| *c != victim);
        let list = p.group_classes.entry(to).or_default();
        list.push(victim);
        list.sort();

        let v = oracle_pairwise_check(&w.records, &p);
        assert!(v.contains(&Violation::GroupRule { class: victim, expected: from, found: to }));
        assert!(v.iter().all(|x| x.classes().contains(&victim)), "{v:?}");
        // dense layout: the moved class now touches a same-group neighbour
        assert!(v.iter().any(|x| matches!(x, Violation::AdjacentInGroup { .. })));
    }

    #[test]
    fn half_moved_class_is_reported() {
        let w = generate_city(&small(10)).unwrap();
        let cfg = PartitionConfig { min_images_per_class: 0, ..Default::default() };
        let mut p = build_partition(&w.records, &cfg).unwrap();
        let victim = *p.class_group.keys().next().unwrap();
        p.class_group.insert(victim, GroupId::new(4, 4, 1));
        let v = oracle_pairwise_check(&w.records, &p);
        assert!(v.iter().any(|x| matches!(x, Violation::MultipleGroups { class, .. } if *class == victim)));
        assert!(v.iter().all(|x| x.classes().contains(&victim)));
    }

    #[test]
    fn single_spatial_group_skips_adjacency() {
        let w = generate_city(&CityConfig { place_spacing: 10.0, extent: 40.0, ..small(11) }).unwrap();
        let cfg = PartitionConfig { spatial_groups: 1, heading_groups: 2, min_images_per_class: 0, ..Default::default() };
        let p = build_partition(&w.records, &cfg).unwrap();
        assert!(oracle_pairwise_check(&w.records, &p).is_empty());
    }

    #[test]
    fn query_shift_is_deterministic() {
        let w = generate_city(&small(12)).unwrap();
        let a = w.query_feature_map("p0000_h0_i00").unwrap();
        assert_eq!(a, w.query_feature_map("p0000_h0_i00").unwrap());
        assert_ne!(&a, w.features.get("p0000_h0_i00").unwrap());
        let w0 = generate_city(&CityConfig { domain_shift_sigma: 0.0, ..small(12) }).unwrap();
        assert_eq!(&w0.query_feature_map("p0000_h0_i00").unwrap(), w0.features.get("p0000_h0_i00").unwrap());
    }
}
