use proptest::prelude::*;

use cosplace::embed::{l2_norm, Descriptor, EmbedConfig, EmbeddingModel, FeatureMap, PoolingKind};
use cosplace::ingest::ImageRecord;
use cosplace::partition::{build_partition, GeoPose, PartitionConfig};
use cosplace::retrieval::{build_index, recall_at_n, EvalQuery};
use cosplace::synthcity::oracle_pairwise_check;

fn layout() -> impl Strategy<Value = PartitionConfig> {
    (prop::sample::select(vec![(30.0, 3u32), (45.0, 2), (90.0, 2), (360.0, 1)]), 1u32..=5, 1u32..=3, prop::sample::select(vec![1.0, 7.5, 10.0]))
        .prop_map(|((alpha, max_l), n, l, m)| PartitionConfig {
            cell_size: m,
            heading_bin: alpha,
            spatial_groups: n,
            heading_groups: l.min(max_l),
            min_images_per_class: 0,
        })
        .prop_filter("L divides the bin count", |c| c.validate().is_ok())
}

fn poses(n: usize) -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    prop::collection::vec((-200.0..200.0f64, -200.0..200.0f64, 0.0..360.0f64), 1..n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn arbitrary_records_satisfy_group_properties(cfg in layout(), ps in poses(300)) {
        let records: Vec<ImageRecord> = ps
            .iter()
            .enumerate()
            .map(|(i, &(e, n, h))| ImageRecord::new(format!("r{i}"), GeoPose::new(e, n, h).unwrap()))
            .collect();
        let p = build_partition(&records, &cfg).unwrap();
        prop_assert_eq!(p.num_images(), records.len());
        let v = oracle_pairwise_check(&records, &p);
        prop_assert!(v.is_empty(), "{:?}", v.first());
    }

    #[test]
    fn recall_is_monotone(
        rows in prop::collection::vec((prop::collection::vec(-1.0..1.0f64, 4), 0.0..300.0f64), 2..60),
        queries in prop::collection::vec((prop::collection::vec(-1.0..1.0f64, 4), 0.0..300.0f64), 1..20),
    ) {
        let keep = |v: &Vec<f64>| l2_norm(v) > 1e-3;
        let rows: Vec<_> = rows.into_iter().filter(|(v, _)| keep(v)).collect();
        let queries: Vec<_> = queries.into_iter().filter(|(v, _)| keep(v)).collect();
        prop_assume!(!rows.is_empty() && !queries.is_empty());
        let d: Vec<Descriptor> = rows.iter().map(|(v, _)| Descriptor::normalized(v.clone()).unwrap()).collect();
        let ids: Vec<String> = (0..rows.len()).map(|i| format!("x{i}")).collect();
        let ps: Vec<GeoPose> = rows.iter().map(|(_, e)| GeoPose::new(*e, 0.0, 0.0).unwrap()).collect();
        let index = build_index(&d, &ids, &ps, None).unwrap();
        let q: Vec<EvalQuery> = queries
            .iter()
            .map(|(v, e)| EvalQuery { descriptor: Descriptor::normalized(v.clone()).unwrap(), pose: GeoPose::new(*e, 0.0, 0.0).unwrap() })
            .collect();
        let ks = [1, 3, 5, 10];
        let mut last = vec![0.0; ks.len()];
        for thr in [0.0, 5.0, 25.0, 100.0, 1000.0] {
            let r = recall_at_n(&index, &q, None, &ks, thr).unwrap();
            let vals: Vec<f64> = ks.iter().map(|&k| r.recall(k).unwrap()).collect();
            prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(vals.iter().zip(&last).all(|(a, b)| a >= b));
            last = vals;
        }
        prop_assert!(last.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn model_outputs_are_unit_norm(
        seed in any::<u64>(),
        values in prop::collection::vec(0.0..5.0f64, 12),
        kind in prop::sample::select(vec![PoolingKind::Gem, PoolingKind::Average, PoolingKind::Max]),
    ) {
        let cfg = EmbedConfig { pooling: kind, output_dim: 5, ..Default::default() };
        let m = EmbeddingModel::random(&cfg, 3, seed).unwrap();
        let fm = FeatureMap::new(3, 2, 2, values).unwrap();
        if let Ok(d) = m.forward(&fm) {
            prop_assert!((l2_norm(d.values()) - 1.0).abs() < 1e-12);
        }
    }
}
