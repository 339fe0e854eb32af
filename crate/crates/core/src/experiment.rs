//! End-to-end runs on synthetic worlds: generate, split, partition, train,
//! and evaluate the trained model against a random-init baseline and the
//! ground-truth oracle.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::embed::{Descriptor, EmbeddingModel, FeatureStore};
use crate::error::{Error, Result};
use crate::geodesy::UtmZone;
use crate::ingest::{split_validation, write_manifest, ImageRecord, Split};
use crate::partition::{build_partition, Partition};
use crate::retrieval::{build_index, recall_at_n, EvalQuery, EvalReport};
use crate::seed::derive_seed;
use crate::synthcity::{generate_city, CityConfig, SyntheticWorld};
use crate::train::{embed_records, export_inference_model, train_epochs, TrainData, TrainObserver, TrainState};

/// Recall of descriptors already computed for a database and a query set.
pub fn evaluate_descriptors(
    db: &[ImageRecord],
    db_descriptors: &[Descriptor],
    queries: &[ImageRecord],
    query_descriptors: &[Descriptor],
    zone: Option<UtmZone>,
    ks: &[usize],
    threshold_m: f64,
) -> Result<EvalReport> {
    if queries.len() != query_descriptors.len() {
        return Err(Error::Shape("one descriptor per query expected".into()));
    }
    let ids: Vec<String> = db.iter().map(|r| r.id.clone()).collect();
    let poses: Vec<_> = db.iter().map(|r| r.pose).collect();
    let index = build_index(db_descriptors, &ids, &poses, zone)?;
    let q: Vec<EvalQuery> = query_descriptors
        .iter()
        .zip(queries)
        .map(|(d, r)| EvalQuery { descriptor: d.clone(), pose: r.pose })
        .collect();
    recall_at_n(&index, &q, zone, ks, threshold_m)
}

/// Embeds both sides with `model` and evaluates.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    model: &EmbeddingModel,
    db: &[ImageRecord],
    db_features: &FeatureStore,
    queries: &[ImageRecord],
    query_features: &FeatureStore,
    zone: Option<UtmZone>,
    ks: &[usize],
    threshold_m: f64,
) -> Result<EvalReport> {
    let dd = embed_records(model, db, db_features)?;
    let qd = embed_records(model, queries, query_features)?;
    evaluate_descriptors(db, &dd, queries, &qd, zone, ks, threshold_m)
}

/// Random-init model for `channels` input channels, seeded from the run config.
pub fn initial_model(cfg: &RunConfig, channels: usize) -> Result<EmbeddingModel> {
    EmbeddingModel::random(&cfg.embed, channels, derive_seed(cfg.train.seed, &[0x30de1]))
}

/// A generated world cut into database/test queries, with the database
/// further split for training and validation.
#[derive(Debug, Clone)]
pub struct SyntheticSetup {
    pub world: SyntheticWorld,
    pub database: Vec<ImageRecord>,
    pub test_queries: Vec<ImageRecord>,
    /// Query-side (domain-shifted) features of the test queries.
    pub query_features: FeatureStore,
    pub split: Split,
    pub partition: Partition,
}

pub fn prepare_synthetic(cfg: &RunConfig) -> Result<SyntheticSetup> {
    prepare_synthetic_in(cfg, &cfg.world_config())
}

/// Like [`prepare_synthetic`] but with the world generated from `city`
/// instead of the config's own (partition-aligned) city, so that partition
/// parameters can vary over one fixed world.
pub fn prepare_synthetic_in(cfg: &RunConfig, city: &CityConfig) -> Result<SyntheticSetup> {
    cfg.validate()?;
    let world = generate_city(city)?;
    let test = split_validation(&world.records, cfg.eval.query_fraction, derive_seed(cfg.city.seed, &[0x7e57]))?;
    let test_queries = test.val_queries;
    let mut database = test.train;
    database.extend(test.val_db);
    // keep generation order in the database
    let order: std::collections::HashMap<&str, usize> =
        world.records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    database.sort_by_key(|r| order[r.id.as_str()]);

    let mut query_features = FeatureStore::new();
    for r in &test_queries {
        query_features.insert(r.id.clone(), world.query_feature_map(&r.id)?)?;
    }
    let split = split_validation(&database, cfg.train.val_fraction, derive_seed(cfg.train.seed, &[0x5a11]))?;
    let partition = build_partition(&split.train, &cfg.partition)?;
    Ok(SyntheticSetup { world, database, test_queries, query_features, split, partition })
}

impl SyntheticSetup {
    pub fn zone(&self) -> Option<UtmZone> {
        Some(self.world.zone())
    }

    pub fn train_data(&self) -> TrainData<'_> {
        TrainData {
            partition: &self.partition,
            features: &self.world.features,
            val_db: &self.split.val_db,
            val_queries: &self.split.val_queries,
            zone: self.zone(),
        }
    }

    pub fn initial_model(&self, cfg: &RunConfig) -> Result<EmbeddingModel> {
        initial_model(cfg, self.world.config.feature_shape[0])
    }

    /// Writes the world as ingest manifests and feature stores:
    /// `database.csv`, `queries.csv`, `train.csv`, `val_db.csv`,
    /// `val_queries.csv`, `features.bin` (database-side features of every
    /// image), `queries.bin` (query-side features) and `oracle.bin`
    /// (ground-truth descriptors as 1x1 maps).
    pub fn write_files(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut put = |name: &str, f: &dyn Fn(&mut BufWriter<File>) -> Result<()>| -> Result<()> {
            let path = dir.join(name);
            let mut w = BufWriter::new(File::create(&path)?);
            f(&mut w)?;
            w.flush()?;
            written.push(path);
            Ok(())
        };
        for (name, records) in [
            ("database.csv", &self.database),
            ("queries.csv", &self.test_queries),
            ("train.csv", &self.split.train),
            ("val_db.csv", &self.split.val_db),
            ("val_queries.csv", &self.split.val_queries),
        ] {
            put(name, &|w| write_manifest(records, w))?;
        }
        put("features.bin", &|w| self.world.features.save(w))?;
        put("queries.bin", &|w| self.query_features.save(w))?;
        let oracle = self.world.oracle_store()?;
        put("oracle.bin", &|w| oracle.save(w))?;
        Ok(written)
    }

    /// Test recall of `model` (database features vs domain-shifted query features).
    pub fn evaluate(&self, model: &EmbeddingModel, cfg: &RunConfig) -> Result<EvalReport> {
        evaluate_model(
            model,
            &self.database,
            &self.world.features,
            &self.test_queries,
            &self.query_features,
            self.zone(),
            &cfg.eval.ks,
            cfg.eval.threshold_m,
        )
    }

    /// Test recall of the ground-truth latents.
    pub fn evaluate_oracle(&self, cfg: &RunConfig) -> Result<EvalReport> {
        let dd = self.database.iter().map(|r| self.world.oracle_descriptor(&r.id)).collect::<Result<Vec<_>>>()?;
        let qd = self.test_queries.iter().map(|r| self.world.oracle_descriptor(&r.id)).collect::<Result<Vec<_>>>()?;
        evaluate_descriptors(&self.database, &dd, &self.test_queries, &qd, self.zone(), &cfg.eval.ks, cfg.eval.threshold_m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub trained: EvalReport,
    pub baseline: EvalReport,
    pub oracle: EvalReport,
    pub best_val_recall1: f64,
    pub best_epoch: Option<usize>,
    pub peak_resident_descriptors: usize,
}

pub struct ExperimentRun {
    pub outcome: ExperimentOutcome,
    pub state: TrainState,
    pub exported: EmbeddingModel,
}

pub fn run_synthetic(cfg: &RunConfig) -> Result<ExperimentRun> {
    run_synthetic_observed(cfg, &mut ())
}

pub fn run_synthetic_observed(cfg: &RunConfig, observer: &mut dyn TrainObserver) -> Result<ExperimentRun> {
    run_synthetic_in(cfg, &cfg.world_config(), observer)
}

pub fn run_synthetic_in(cfg: &RunConfig, city: &CityConfig, observer: &mut dyn TrainObserver) -> Result<ExperimentRun> {
    let setup = prepare_synthetic_in(cfg, city)?;
    let init = setup.initial_model(cfg)?;
    let baseline = setup.evaluate(&init, cfg)?;
    let mut state = TrainState::new(init, &setup.partition, &cfg.train)?;
    train_epochs(&mut state, &setup.train_data(), &cfg.train, observer)?;
    let exported = export_inference_model(&state)?;
    let outcome = ExperimentOutcome {
        trained: setup.evaluate(&exported, cfg)?,
        baseline,
        oracle: setup.evaluate_oracle(cfg)?,
        best_val_recall1: state.best_val_recall1,
        best_epoch: state.best_epoch,
        peak_resident_descriptors: state.peak_resident_descriptors,
    };
    Ok(ExperimentRun { outcome, state, exported })
}
