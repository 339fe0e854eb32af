use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use cosplace::config::RunConfig;
use cosplace::embed::{Descriptor, EmbeddingModel, FeatureStore};
use cosplace::experiment::{evaluate_descriptors, evaluate_model, initial_model, prepare_synthetic, run_synthetic_in};
use cosplace::geodesy::UtmZone;
use cosplace::ingest::{parse_manifest, split_validation, write_manifest, ImageRecord};
use cosplace::partition::{build_partition, GroupId, Partition};
use cosplace::retrieval::EvalReport;
use cosplace::seed::derive_seed;
use cosplace::train::{
    export_inference_model, read_history_csv, train_epochs, write_history_csv, EpochRecord, TrainData, TrainObserver,
    TrainState,
};
use cosplace::Error;

use crate::{Command, Failure, PartitionArgs, SweepDimension};

type Result<T> = std::result::Result<T, Failure>;

pub fn dispatch(cmd: Command, cfg: RunConfig) -> Result<()> {
    match cmd {
        Command::Convert { input, output } => convert(&input, &output),
        Command::Partition { manifest, output, layout } => {
            let mut cfg = cfg;
            let manifest = resolve(manifest, &mut cfg.paths.manifest, "--manifest", "paths.manifest")?;
            let output = resolve(output, &mut cfg.paths.partition, "--output", "paths.partition")?;
            partition(cfg, &manifest, &output, &layout)
        }
        Command::Train {
            manifest,
            features,
            partition,
            val_db,
            val_queries,
            out_dir,
            layout,
            groups,
            epochs,
            iterations,
            batch_size,
            lr,
            resume,
        } => {
            let mut cfg = cfg;
            let manifest = resolve(manifest, &mut cfg.paths.manifest, "--manifest", "paths.manifest")?;
            let features = resolve(features, &mut cfg.paths.features, "--features", "paths.features")?;
            let out_dir = resolve(out_dir, &mut cfg.paths.out_dir, "--out-dir", "paths.out_dir")?;
            let partition = partition.or_else(|| cfg.paths.partition.clone());
            cfg.paths.partition = partition.clone();
            apply_layout(&mut cfg, &layout);
            let t = &mut cfg.train;
            t.groups_used = groups.unwrap_or(t.groups_used);
            t.total_epochs = epochs.unwrap_or(t.total_epochs);
            t.iterations_per_epoch = iterations.unwrap_or(t.iterations_per_epoch);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.learning_rate = lr.unwrap_or(t.learning_rate);
            let inputs = TrainInputs {
                manifest,
                features,
                partition,
                val: val_db.zip(val_queries),
                layout_overridden: layout.any(),
            };
            train(cfg, &inputs, &out_dir, resume)
        }
        Command::Eval {
            checkpoint,
            baseline,
            oracle,
            db_manifest,
            db_features,
            query_manifest,
            query_features,
            threshold,
            ks,
            json,
        } => {
            let mut cfg = cfg;
            if let Some(t) = threshold {
                cfg.eval.threshold_m = t;
            }
            if let Some(ks) = ks {
                cfg.eval.ks = ks;
            }
            let sources = EvalSources { checkpoint, baseline, oracle };
            let sides = [(db_manifest, db_features), (query_manifest, query_features)];
            eval(cfg, &sources, &sides, json.as_deref())
        }
        Command::Synth { out_dir } => synth(cfg, &out_dir),
        Command::Sweep { dimension, values, output } => sweep(cfg, dimension, &values, output.as_deref()),
    }
}

/// Flag value, else the config's path; the result is recorded in the config.
fn resolve(flag: Option<PathBuf>, slot: &mut Option<PathBuf>, name: &str, key: &str) -> Result<PathBuf> {
    match flag.or_else(|| slot.clone()) {
        Some(p) => {
            *slot = Some(p.clone());
            Ok(p)
        }
        None => Err(Failure::usage(format!("{name} is required (or set {key} in the config)"))),
    }
}

impl PartitionArgs {
    fn any(&self) -> bool {
        self.cell_size.is_some()
            || self.heading_bin.is_some()
            || self.spatial_groups.is_some()
            || self.heading_groups.is_some()
            || self.min_images.is_some()
    }
}

fn apply_layout(cfg: &mut RunConfig, a: &PartitionArgs) {
    let p = &mut cfg.partition;
    p.cell_size = a.cell_size.unwrap_or(p.cell_size);
    p.heading_bin = a.heading_bin.unwrap_or(p.heading_bin);
    p.spatial_groups = a.spatial_groups.unwrap_or(p.spatial_groups);
    p.heading_groups = a.heading_groups.unwrap_or(p.heading_groups);
    p.min_images_per_class = a.min_images.unwrap_or(p.min_images_per_class);
}

fn read_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    Ok(parse_manifest(BufReader::new(open(path)?))?)
}

fn read_store(path: &Path) -> Result<FeatureStore> {
    Ok(FeatureStore::load(BufReader::new(open(path)?))?)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Failure::from(Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> cosplace::Result<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    // write-then-rename so that a failed run never leaves a truncated file
    let tmp = path.with_extension("partial");
    let mut w = BufWriter::new(File::create(&tmp)?);
    f(&mut w)?;
    w.flush()?;
    drop(w);
    fs::rename(&tmp, path)?;
    Ok(())
}

fn invalid_output(path: &Path, why: impl std::fmt::Display) -> Failure {
    Error::Format(format!("{} failed validation after writing: {why}", path.display())).into()
}

/// The single zone shared by all record sets.
fn common_zone(sets: &[&[ImageRecord]]) -> Result<Option<UtmZone>> {
    let mut zone: Option<Option<UtmZone>> = None;
    for set in sets {
        if let Some(first) = set.first() {
            match zone {
                None => zone = Some(first.zone),
                Some(z) if z != first.zone => {
                    return Err(Error::ZoneMismatch {
                        left: zone_name(z),
                        right: zone_name(first.zone),
                    }
                    .into())
                }
                _ => {}
            }
        }
    }
    Ok(zone.flatten())
}

fn zone_name(z: Option<UtmZone>) -> String {
    z.map(|z| z.to_string()).unwrap_or_else(|| "local frame".into())
}

fn convert(input: &Path, output: &Path) -> Result<()> {
    let records = read_manifest(input)?;
    write_file(output, |w| write_manifest(&records, w))?;
    if read_manifest(output)? != records {
        return Err(invalid_output(output, "records differ on re-read"));
    }
    eprintln!(
        "converted {} records ({}) -> {}",
        records.len(),
        zone_name(records.first().and_then(|r| r.zone)),
        output.display()
    );
    Ok(())
}

fn partition(mut cfg: RunConfig, manifest: &Path, output: &Path, layout: &PartitionArgs) -> Result<()> {
    apply_layout(&mut cfg, layout);
    cfg.partition.validate()?;
    let records = read_manifest(manifest)?;
    let p = build_partition(&records, &cfg.partition)?;
    let json = p.to_json_with_provenance(Some(&cfg.to_toml()))?;
    write_file(output, |w| Ok(w.write_all(json.as_bytes())?))?;
    let back = Partition::from_json(&fs::read_to_string(output)?)?;
    if back != p {
        return Err(invalid_output(output, "partition differs on re-read"));
    }
    print!("{}", p.stats().to_table());
    Ok(())
}

struct TrainInputs {
    manifest: PathBuf,
    features: PathBuf,
    partition: Option<PathBuf>,
    val: Option<(PathBuf, PathBuf)>,
    layout_overridden: bool,
}

/// Prints one line per epoch and checkpoints the full state after it.
struct EpochLog<'a> {
    checkpoint: &'a Path,
    total: usize,
    error: Option<Failure>,
}

impl TrainObserver for EpochLog<'_> {
    fn on_epoch_start(&mut self, state: &TrainState, epoch: usize, group: &GroupId) {
        let g = state.groups.iter().position(|x| x == group).unwrap_or(0);
        let classes = state.heads.get(g).map_or(0, |h| h.num_classes);
        eprintln!("epoch {}/{}: group {group} ({classes} classes)", epoch + 1, self.total);
    }

    fn on_epoch_end(&mut self, state: &TrainState, r: &EpochRecord) {
        eprintln!(
            "epoch {}/{}: loss {:.4}  val R@1 {:.1}  R@5 {:.1}  R@10 {:.1}{}",
            r.epoch + 1,
            self.total,
            r.mean_loss,
            r.recall_at_1 * 100.0,
            r.recall_at_5 * 100.0,
            r.recall_at_10 * 100.0,
            if state.best_epoch == Some(r.epoch) { "  (best)" } else { "" }
        );
        if self.error.is_none() {
            if let Err(e) = write_file(self.checkpoint, |w| state.save(w)) {
                self.error = Some(e);
            }
        }
    }
}

fn train(mut cfg: RunConfig, inputs: &TrainInputs, out_dir: &Path, resume: bool) -> Result<()> {
    let records = read_manifest(&inputs.manifest)?;
    let (train_records, val_db, val_queries) = match &inputs.val {
        Some((db, q)) => (records, read_manifest(db)?, read_manifest(q)?),
        None => {
            if inputs.partition.is_some() {
                return Err(Failure::usage(
                    "--partition needs --val-db/--val-queries: without them the manifest is split here and a \
                     precomputed partition would include validation images",
                ));
            }
            let s = split_validation(&records, cfg.train.val_fraction, derive_seed(cfg.train.seed, &[0x5a11]))?;
            (s.train, s.val_db, s.val_queries)
        }
    };
    let zone = common_zone(&[&train_records, &val_db, &val_queries])?;

    let partition = match &inputs.partition {
        Some(path) => {
            if inputs.layout_overridden {
                return Err(Failure::usage("partition flags cannot be combined with --partition"));
            }
            let p = Partition::from_json(&fs::read_to_string(path)?)?;
            cfg.partition = *p.config();
            p
        }
        None => {
            cfg.partition.validate()?;
            build_partition(&train_records, &cfg.partition)?
        }
    };
    cfg.validate()?;

    let features = read_store(&inputs.features)?;
    let channels = features
        .shape()
        .ok_or_else(|| Failure::from(Error::Invalid(format!("{} holds no features", inputs.features.display()))))?
        .0;
    if cfg.train.groups_used == 1 {
        eprintln!("note: groups_used = 1: a single group, so training is plain CosFace over that group's classes");
    }

    fs::create_dir_all(out_dir)?;
    let ckpt = out_dir.join("training.ckpt");
    let mut state = if resume {
        let s = TrainState::load(BufReader::new(open(&ckpt)?))?;
        eprintln!("resuming after epoch {} of {}", s.epoch, cfg.train.total_epochs);
        s
    } else {
        TrainState::new(initial_model(&cfg, channels)?, &partition, &cfg.train)?
    };
    let data = TrainData {
        partition: &partition,
        features: &features,
        val_db: &val_db,
        val_queries: &val_queries,
        zone,
    };
    let mut log = EpochLog { checkpoint: &ckpt, total: cfg.train.total_epochs, error: None };
    train_epochs(&mut state, &data, &cfg.train, &mut log)?;
    if let Some(e) = log.error {
        return Err(e);
    }
    write_file(&ckpt, |w| state.save(w))?;

    let provenance = cfg.to_toml();
    let exported = export_inference_model(&state)?;
    let model_path = out_dir.join("model.bin");
    let history_path = out_dir.join("history.csv");
    let config_path = out_dir.join("run.toml");
    write_file(&model_path, |w| exported.save(w, Some(&provenance)))?;
    write_file(&history_path, |w| write_history_csv(&state.history, Some(&provenance), w))?;
    write_file(&config_path, |w| Ok(w.write_all(provenance.as_bytes())?))?;

    if EmbeddingModel::load(BufReader::new(open(&model_path)?))? != exported {
        return Err(invalid_output(&model_path, "model differs on re-read"));
    }
    if TrainState::load(BufReader::new(open(&ckpt)?))? != state {
        return Err(invalid_output(&ckpt, "state differs on re-read"));
    }
    if read_history_csv(BufReader::new(open(&history_path)?))?.len() != state.history.len() {
        return Err(invalid_output(&history_path, "row count differs"));
    }
    RunConfig::load(&config_path)?;

    match state.best_epoch {
        Some(e) => println!("best epoch {} with validation R@1 {:.1}", e + 1, state.best_val_recall1 * 100.0),
        None => println!("no epoch trained"),
    }
    println!("model: {}", model_path.display());
    println!("history: {}", history_path.display());
    Ok(())
}

struct EvalSources {
    checkpoint: Option<PathBuf>,
    baseline: bool,
    oracle: Option<PathBuf>,
}

fn eval(cfg: RunConfig, src: &EvalSources, sides: &[(PathBuf, PathBuf); 2], json: Option<&Path>) -> Result<()> {
    if src.checkpoint.is_none() && !src.baseline && src.oracle.is_none() {
        return Err(Failure::usage("nothing to evaluate: give --checkpoint, --baseline and/or --oracle"));
    }
    cfg.validate()?;
    let db = read_manifest(&sides[0].0)?;
    let queries = read_manifest(&sides[1].0)?;
    let zone = common_zone(&[&db, &queries])?;
    let (ks, thr) = (&cfg.eval.ks, cfg.eval.threshold_m);

    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    if src.checkpoint.is_some() || src.baseline {
        let db_features = read_store(&sides[0].1)?;
        let q_features = read_store(&sides[1].1)?;
        if let Some(path) = &src.checkpoint {
            let model = EmbeddingModel::load(BufReader::new(open(path)?))?;
            let r = evaluate_model(&model, &db, &db_features, &queries, &q_features, zone, ks, thr)?;
            reports.push(("trained".into(), r));
        }
        if src.baseline {
            let channels = db_features.shape().map_or(0, |s| s.0);
            let model = initial_model(&cfg, channels)?;
            let r = evaluate_model(&model, &db, &db_features, &queries, &q_features, zone, ks, thr)?;
            reports.push(("random-init".into(), r));
        }
    }
    if let Some(path) = &src.oracle {
        let store = read_store(path)?;
        let describe = |recs: &[ImageRecord]| -> cosplace::Result<Vec<Descriptor>> {
            recs.iter().map(|r| Descriptor::normalized(store.require(&r.id)?.values().to_vec())).collect()
        };
        let r = evaluate_descriptors(&db, &describe(&db)?, &queries, &describe(&queries)?, zone, ks, thr)?;
        reports.push(("oracle".into(), r));
    }

    println!("{}", reports[0].1.table_header());
    for (label, r) in &reports {
        println!("{}", r.table_row(label));
    }
    if let Some(path) = json {
        let doc = serde_json::json!({
            "config": cfg.to_toml(),
            "reports": reports
                .iter()
                .map(|(label, r)| serde_json::json!({ "method": label, "report": r }))
                .collect::<Vec<_>>(),
        });
        let text = serde_json::to_string_pretty(&doc).map_err(Error::from)?;
        write_file(path, |w| Ok(w.write_all(text.as_bytes())?))?;
        let back: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?).map_err(Error::from)?;
        if back["reports"].as_array().map(Vec::len) != Some(reports.len()) {
            return Err(invalid_output(path, "report count differs"));
        }
    }
    Ok(())
}

fn synth(cfg: RunConfig, out_dir: &Path) -> Result<()> {
    let setup = prepare_synthetic(&cfg)?;
    let written = setup.write_files(out_dir)?;
    let config_path = out_dir.join("run.toml");
    write_file(&config_path, |w| Ok(w.write_all(cfg.to_toml().as_bytes())?))?;
    for path in &written {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => drop(read_manifest(path)?),
            _ => drop(read_store(path)?),
        }
    }
    RunConfig::load(&config_path)?;
    println!(
        "{} places, {} images: {} database ({} train, {} val db, {} val queries), {} test queries",
        setup.world.num_places(),
        setup.world.records.len(),
        setup.database.len(),
        setup.split.train.len(),
        setup.split.val_db.len(),
        setup.split.val_queries.len(),
        setup.test_queries.len()
    );
    for path in written.iter().chain([&config_path]) {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn sweep_config(base: &RunConfig, dim: SweepDimension, value: &str) -> Result<RunConfig> {
    let bad = |e: &dyn std::fmt::Display| Failure::usage(format!("bad {} value `{value}`: {e}", dim.name()));
    let mut cfg = base.clone();
    match dim {
        SweepDimension::M => cfg.partition.cell_size = value.parse().map_err(|e| bad(&e))?,
        SweepDimension::Alpha => cfg.partition.heading_bin = value.parse().map_err(|e| bad(&e))?,
        SweepDimension::N => cfg.partition.spatial_groups = value.parse().map_err(|e| bad(&e))?,
        SweepDimension::L => cfg.partition.heading_groups = value.parse().map_err(|e| bad(&e))?,
        SweepDimension::GroupsUsed => cfg.train.groups_used = value.parse().map_err(|e| bad(&e))?,
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sweep(base: RunConfig, dim: SweepDimension, values: &[String], output: Option<&Path>) -> Result<()> {
    let values: Vec<&str> = values.iter().map(|v| v.trim()).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Failure::usage("--values needs at least one value"));
    }
    // validate every row before spending time on any of them
    let configs = values.iter().map(|v| sweep_config(&base, dim, v)).collect::<Result<Vec<_>>>()?;
    // the world stays that of the base config so only the swept parameter changes
    let world = base.world_config();

    let ks = &base.eval.ks;
    let mut text = String::new();
    for line in base.to_toml().lines() {
        text.push_str(&format!("# {line}\n"));
    }
    let mut header = vec!["dimension".to_string(), "value".into()];
    header.extend(ks.iter().map(|k| format!("trained_r@{k}")));
    header.extend(["baseline_r@1".into(), "oracle_r@1".into(), "best_epoch".into()]);
    text.push_str(&header.join(","));
    text.push('\n');
    for (value, cfg) in values.iter().zip(&configs) {
        eprintln!("sweep {} = {value}", dim.name());
        let o = run_synthetic_in(cfg, &world, &mut ())?.outcome;
        let mut row = vec![dim.name().to_string(), value.to_string()];
        row.extend(ks.iter().map(|&k| o.trained.recall(k).unwrap_or(f64::NAN).to_string()));
        row.push(o.baseline.recall(1).unwrap_or(f64::NAN).to_string());
        row.push(o.oracle.recall(1).unwrap_or(f64::NAN).to_string());
        row.push(o.best_epoch.map(|e| e.to_string()).unwrap_or_default());
        eprintln!("  trained R@1 {:.1}", o.trained.recall(1).unwrap_or(f64::NAN) * 100.0);
        text.push_str(&row.join(","));
        text.push('\n');
    }
    match output {
        Some(path) => {
            write_file(path, |w| Ok(w.write_all(text.as_bytes())?))?;
            let rows = fs::read_to_string(path)?.lines().filter(|l| !l.starts_with('#')).count();
            if rows != values.len() + 1 {
                return Err(invalid_output(path, format!("{rows} lines for {} values", values.len())));
            }
        }
        None => print!("{text}"),
    }
    Ok(())
}
