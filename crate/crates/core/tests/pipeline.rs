use cosplace::embed::FeatureStore;
use cosplace::ingest::{parse_manifest, write_manifest};
use cosplace::partition::{build_partition, Partition, PartitionConfig};
use cosplace::retrieval::{build_index, DescriptorIndex};
use cosplace::synthcity::{generate_city, oracle_pairwise_check, CityConfig};

fn small_city() -> CityConfig {
    CityConfig {
        extent: 300.0,
        place_spacing: 50.0,
        images_per_place_heading: 4,
        latent_dim: 8,
        feature_shape: [8, 2, 2],
        nuisance_rank: 2,
        seed: 21,
        ..Default::default()
    }
}

#[test]
fn world_survives_every_file_format() {
    let world = generate_city(&small_city()).unwrap();

    let mut csv = Vec::new();
    write_manifest(&world.records, &mut csv).unwrap();
    let records = parse_manifest(csv.as_slice()).unwrap();
    assert_eq!(records, world.records);

    let mut again = Vec::new();
    write_manifest(&records, &mut again).unwrap();
    assert_eq!(csv, again);

    let mut store = Vec::new();
    world.features.save(&mut store).unwrap();
    assert_eq!(FeatureStore::load(store.as_slice()).unwrap(), world.features);

    let cfg = PartitionConfig { min_images_per_class: 2, ..Default::default() };
    let p = build_partition(&records, &cfg).unwrap();
    let json = p.to_json().unwrap();
    let back = Partition::from_json(&json).unwrap();
    assert_eq!(back.to_json().unwrap(), json);
    assert!(oracle_pairwise_check(&records, &back).is_empty());

    let oracle = world.oracle_store().unwrap();
    let descriptors: Vec<_> = records.iter().map(|r| world.oracle_descriptor(&r.id).unwrap()).collect();
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let poses: Vec<_> = records.iter().map(|r| r.pose).collect();
    let index = build_index(&descriptors, &ids, &poses, Some(world.zone())).unwrap();
    let mut bytes = Vec::new();
    index.save(&mut bytes).unwrap();
    assert_eq!(DescriptorIndex::load(bytes.as_slice()).unwrap(), index);
    assert_eq!(oracle.len(), records.len());
}

#[test]
fn latlon_only_manifest_projects_into_the_world_zone() {
    let world = generate_city(&small_city()).unwrap();
    let mut text = String::from("id,lat,lon,heading\n");
    for r in world.records.iter().take(20) {
        let ll = r.latlon.unwrap();
        text.push_str(&format!("{},{},{},{}\n", r.id, ll.latitude, ll.longitude, r.pose.heading));
    }
    let parsed = parse_manifest(text.as_bytes()).unwrap();
    for (a, b) in parsed.iter().zip(&world.records) {
        assert_eq!(a.zone, Some(world.zone()));
        assert!(a.pose.distance(&b.pose) < 1e-3, "{} vs {}", a.pose.east, b.pose.east);
    }
}
