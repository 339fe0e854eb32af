//! Group-cycling training loop: epoch `e` trains the `(e mod G)`-th used
//! group's classifier head together with the shared embedding model, then
//! runs retrieval validation and keeps the best model by recall@1.
//!
//! Only one batch of descriptors exists at a time; nothing is mined or cached.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ByteReader, Section};
use crate::embed::{Descriptor, EmbeddingModel, FeatureStore, ModelGradients};
use crate::error::{Error, Result};
use crate::geodesy::UtmZone;
use crate::ingest::ImageRecord;
use crate::loss::{lmcl_backward, new_head, ClassifierHead, LossConfig};
use crate::partition::{enumerate_groups, GroupId, Partition};
use crate::retrieval::{build_index, recall_at_n, EvalQuery, EvalReport};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub groups_used: usize,
    pub iterations_per_epoch: usize,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss: LossConfig,
    pub seed: u64,
    /// Fixed-order gradient reduction, bitwise reproducible across thread counts.
    pub deterministic: bool,
    /// Fraction of records held out for validation queries (and the same again for the validation database).
    pub val_fraction: f64,
    pub val_threshold_m: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            groups_used: 8,
            iterations_per_epoch: 10_000,
            total_epochs: 50,
            batch_size: 32,
            learning_rate: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossConfig::default(),
            seed: 0,
            deterministic: false,
            val_fraction: 0.1,
            val_threshold_m: 25.0,
        }
    }
}

impl TrainConfig {
    /// Small schedule that finishes in seconds on synthetic worlds.
    pub fn desk() -> Self {
        Self {
            groups_used: 4,
            iterations_per_epoch: 200,
            total_epochs: 10,
            learning_rate: 3e-3,
            deterministic: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups_used == 0 {
            return Err(Error::Config("groups_used must be >= 1".into()));
        }
        if self.iterations_per_epoch == 0 || self.total_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations_per_epoch, total_epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be > 0".into()));
        }
        if !(self.val_threshold_m >= 0.0) {
            return Err(Error::Config("val_threshold_m must be >= 0".into()));
        }
        self.loss.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

/// First and second moments of one parameter tensor plus its own step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// Advances the step counter and applies one update.
    pub fn step(&mut self, name: &str, params: &mut [f64], grads: &[f64], cfg: &AdamConfig) -> Result<()> {
        adam_step(name, params, grads, self, self.t + 1, cfg)?;
        self.t += 1;
        Ok(())
    }
}

/// Bias-corrected Adam update at step `t` (1-based). Leaves everything
/// untouched when a gradient is not finite.
pub fn adam_step(
    name: &str,
    params: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || moments.m.len() != params.len() || moments.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "`{name}`: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            moments.m.len()
        )));
    }
    if t == 0 {
        return Err(Error::Invalid("Adam step count starts at 1".into()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of `{name}`[{i}] is {}", grads[i])));
    }
    let c1 = 1.0 - cfg.beta1.powi(t.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - cfg.beta2.powi(t.min(i32::MAX as u64) as i32);
    for i in 0..params.len() {
        let g = grads[i];
        moments.m[i] = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        moments.v[i] = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = moments.m[i] / c1;
        let v_hat = moments.v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("parameter `{name}`[{i}] after update")));
    }
    Ok(())
}

/// Class-uniform sampling with replacement, then a uniform member per class.
/// Labels index `partition.classes_in(group)`.
pub fn sample_batch<R: Rng>(
    partition: &Partition,
    group: &GroupId,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<(String, usize)>> {
    let classes = partition.classes_in(group);
    if classes.len() < 2 {
        return Err(Error::Invalid(format!(
            "group {group} has {} classes; sampling needs at least 2",
            classes.len()
        )));
    }
    (0..batch_size)
        .map(|_| {
            let label = rng.random_range(0..classes.len());
            let members = partition
                .members(&classes[label])
                .filter(|m| !m.is_empty())
                .ok_or_else(|| Error::Invalid(format!("class {} has no members", classes[label])))?;
            Ok((members[rng.random_range(0..members.len())].clone(), label))
        })
        .collect()
}

/// Everything the loop reads: the partition of the training records, their
/// features, and a validation database/query split.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub partition: &'a Partition,
    pub features: &'a FeatureStore,
    pub val_db: &'a [ImageRecord],
    pub val_queries: &'a [ImageRecord],
    pub zone: Option<UtmZone>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub group: GroupId,
    pub mean_loss: f64,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelMoments {
    pub projection: Moments,
    pub bias: Option<Moments>,
    pub p: Option<Moments>,
}

impl ModelMoments {
    fn for_model(m: &EmbeddingModel) -> Self {
        Self {
            projection: Moments::zeros(m.projection.len()),
            bias: m.bias.as_ref().map(|b| Moments::zeros(b.len())),
            p: m.gem_p_trainable().then(|| Moments::zeros(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: EmbeddingModel,
    /// Used groups in training order.
    pub groups: Vec<GroupId>,
    pub heads: Vec<ClassifierHead>,
    pub model_moments: ModelMoments,
    pub head_moments: Vec<Moments>,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_recall1: f64,
    pub best_epoch: Option<usize>,
    pub best_model: Option<EmbeddingModel>,
    pub history: Vec<EpochRecord>,
    /// Mean batch loss of every iteration so far.
    pub loss_trace: Vec<f64>,
    /// Most descriptors the trainer held at once.
    pub peak_resident_descriptors: usize,
}

/// Hooks into the loop, for logging and instrumentation.
pub trait TrainObserver {
    fn on_epoch_start(&mut self, _state: &TrainState, _epoch: usize, _group: &GroupId) {}
    fn on_epoch_end(&mut self, _state: &TrainState, _record: &EpochRecord) {}
}

impl TrainObserver for () {}

impl TrainState {
    /// Fresh state: the first `groups_used` groups in enumeration order, one
    /// head per group. Any of them with fewer than two classes is an error.
    pub fn new(model: EmbeddingModel, partition: &Partition, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let all = enumerate_groups(partition.config());
        if cfg.groups_used > all.len() {
            return Err(Error::Config(format!(
                "groups_used {} exceeds the {} groups of the partition",
                cfg.groups_used,
                all.len()
            )));
        }
        let groups: Vec<GroupId> = all[..cfg.groups_used].to_vec();
        let mut heads = Vec::with_capacity(groups.len());
        for g in &groups {
            let n = partition.classes_in(g).len();
            if n < 2 {
                return Err(Error::Invalid(format!(
                    "group {g} (one of the first {} groups) has {n} classes; at least 2 are needed",
                    cfg.groups_used
                )));
            }
            heads.push(new_head(*g, n, model.output_dim, derive_seed(cfg.seed, &[0x4ead]))?);
        }
        let head_moments = heads.iter().map(|h| Moments::zeros(h.weights.len())).collect();
        Ok(Self {
            model_moments: ModelMoments::for_model(&model),
            model,
            groups,
            heads,
            head_moments,
            epoch: 0,
            best_val_recall1: f64::NEG_INFINITY,
            best_epoch: None,
            best_model: None,
            history: Vec::new(),
            loss_trace: Vec::new(),
            peak_resident_descriptors: 0,
        })
    }
}

pub fn train_cosplace(model: EmbeddingModel, data: &TrainData, cfg: &TrainConfig) -> Result<TrainState> {
    let mut state = TrainState::new(model, data.partition, cfg)?;
    train_epochs(&mut state, data, cfg, &mut ())?;
    Ok(state)
}

/// Runs epochs from `state.epoch` up to `cfg.total_epochs`; also resumes.
pub fn train_epochs(state: &mut TrainState, data: &TrainData, cfg: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<()> {
    cfg.validate()?;
    if data.val_db.is_empty() || data.val_queries.is_empty() {
        return Err(Error::Invalid("validation database and queries must be non-empty".into()));
    }
    if state.groups.len() != cfg.groups_used {
        return Err(Error::Config(format!(
            "state trains {} groups, config asks for {}",
            state.groups.len(),
            cfg.groups_used
        )));
    }
    let adam = cfg.adam();
    while state.epoch < cfg.total_epochs {
        let epoch = state.epoch;
        let gi = epoch % state.groups.len();
        let group = state.groups[gi];
        observer.on_epoch_start(state, epoch, &group);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xba7c, epoch as u64]));
        let mut loss_sum = 0.0;
        for it in 0..cfg.iterations_per_epoch {
            let batch = sample_batch(data.partition, &group, cfg.batch_size, &mut rng)?;
            let loss = train_step(state, gi, &batch, data.features, cfg, &adam).map_err(|e| match e {
                Error::NonFinite(msg) | Error::Degenerate(msg) => Error::Diverged { epoch, iteration: it, msg },
                other => other,
            })?;
            loss_sum += loss;
            state.loss_trace.push(loss);
        }
        let report = validate_model(&state.model, data, &[1, 5, 10], cfg.val_threshold_m)?;
        let record = EpochRecord {
            epoch,
            group,
            mean_loss: loss_sum / cfg.iterations_per_epoch as f64,
            recall_at_1: report.recall(1).unwrap_or(0.0),
            recall_at_5: report.recall(5).unwrap_or(0.0),
            recall_at_10: report.recall(10).unwrap_or(0.0),
        };
        if record.recall_at_1 > state.best_val_recall1 {
            state.best_val_recall1 = record.recall_at_1;
            state.best_epoch = Some(epoch);
            state.best_model = Some(state.model.clone());
        }
        state.history.push(record.clone());
        state.epoch += 1;
        observer.on_epoch_end(state, &record);
    }
    Ok(())
}

/// One optimizer step on the model and the active head; returns the batch loss.
fn train_step(
    state: &mut TrainState,
    head_index: usize,
    batch: &[(String, usize)],
    features: &FeatureStore,
    cfg: &TrainConfig,
    adam: &AdamConfig,
) -> Result<f64> {
    let maps = batch.iter().map(|(id, _)| features.require(id)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
    let model = &state.model;
    let caches = maps
        .par_iter()
        .with_min_len(8)
        .map(|fm| model.forward_cached(fm))
        .collect::<Result<Vec<_>>>()?;
    state.peak_resident_descriptors = state.peak_resident_descriptors.max(caches.len());
    let descriptors: Vec<Descriptor> = caches.iter().map(|c| c.descriptor.clone()).collect();
    let lg = lmcl_backward(&descriptors, &labels, &state.heads[head_index], &cfg.loss)?;
    if !lg.loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {}", lg.loss)));
    }
    let per_item = (0..maps.len())
        .into_par_iter()
        .with_min_len(8)
        .map(|i| model.backward_cached(maps[i], &caches[i], &lg.descriptors[i]))
        .collect::<Result<Vec<_>>>()?;
    drop(descriptors);
    drop(caches);
    let grads = if cfg.deterministic {
        let mut acc = ModelGradients::zeros_like(model);
        for g in &per_item {
            acc.add_assign(g);
        }
        acc
    } else {
        per_item
            .into_par_iter()
            .reduce(|| ModelGradients::zeros_like(model), |mut a, b| {
                a.add_assign(&b);
                a
            })
    };

    let mm = &mut state.model_moments;
    mm.projection.step("projection", &mut state.model.projection, &grads.projection, adam)?;
    if let (Some(b), Some(gb), Some(mb)) = (state.model.bias.as_mut(), grads.bias.as_ref(), mm.bias.as_mut()) {
        mb.step("bias", b, gb, adam)?;
    }
    if let (Some(gp), Some(mp), Some(p)) = (grads.p, mm.p.as_mut(), state.model.gem_p()) {
        let mut pv = [p];
        mp.step("gem_p", &mut pv, &[gp], adam)?;
        state.model.set_gem_p(pv[0].max(1.0));
    }
    let head = &mut state.heads[head_index];
    let name = format!("head {}", head.group);
    state.head_moments[head_index].step(&name, &mut head.weights, &lg.weights, adam)?;
    Ok(lg.loss)
}

/// Embeds records with `model`, reading their feature maps from `features`.
pub fn embed_records(model: &EmbeddingModel, records: &[ImageRecord], features: &FeatureStore) -> Result<Vec<Descriptor>> {
    records
        .par_iter()
        .map(|r| model.forward(features.require(&r.id)?))
        .collect()
}

/// Recall of `model` on the validation split.
pub fn validate_model(model: &EmbeddingModel, data: &TrainData, ks: &[usize], threshold_m: f64) -> Result<EvalReport> {
    let db = embed_records(model, data.val_db, data.features)?;
    let ids: Vec<String> = data.val_db.iter().map(|r| r.id.clone()).collect();
    let poses: Vec<_> = data.val_db.iter().map(|r| r.pose).collect();
    let index = build_index(&db, &ids, &poses, data.zone)?;
    let queries: Vec<EvalQuery> = embed_records(model, data.val_queries, data.features)?
        .into_iter()
        .zip(data.val_queries)
        .map(|(descriptor, r)| EvalQuery { descriptor, pose: r.pose })
        .collect();
    recall_at_n(&index, &queries, data.zone, ks, threshold_m)
}

/// The best-validated model, without any classifier head.
pub fn export_inference_model(state: &TrainState) -> Result<EmbeddingModel> {
    state
        .best_model
        .clone()
        .ok_or_else(|| Error::Invalid("no validation pass has completed; nothing to export".into()))
}

pub const TRAIN_MAGIC: &[u8; 4] = b"CPTS";

#[derive(Serialize, Deserialize)]
struct StateMeta {
    epoch: usize,
    best_val_recall1: Option<f64>,
    best_epoch: Option<usize>,
    groups: Vec<GroupId>,
    history: Vec<EpochRecord>,
    peak_resident_descriptors: usize,
}

fn put_moments(out: &mut Vec<u8>, m: &Moments) {
    out.extend_from_slice(&m.t.to_le_bytes());
    out.extend_from_slice(&(m.m.len() as u64).to_le_bytes());
    out.extend_from_slice(&checkpoint::f64s_to_bytes(&m.m));
    out.extend_from_slice(&checkpoint::f64s_to_bytes(&m.v));
}

fn get_moments(r: &mut ByteReader) -> Result<Moments> {
    let t = r.u64()?;
    let n = r.u64()? as usize;
    Ok(Moments { m: r.f64s(n)?, v: r.f64s(n)?, t })
}

fn nested(model: &EmbeddingModel) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    model.save(&mut buf, None)?;
    Ok(buf)
}

impl TrainState {
    /// Full training checkpoint: current and best model, heads, optimizer
    /// moments and history. Heads only ever appear here, never in exports.
    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let meta = StateMeta {
            epoch: self.epoch,
            best_val_recall1: self.best_val_recall1.is_finite().then_some(self.best_val_recall1),
            best_epoch: self.best_epoch,
            groups: self.groups.clone(),
            history: self.history.clone(),
            peak_resident_descriptors: self.peak_resident_descriptors,
        };
        let mut sections = vec![
            Section::new(b"STAT", serde_json::to_vec(&meta)?),
            Section::new(b"MODL", nested(&self.model)?),
        ];
        if let Some(b) = &self.best_model {
            sections.push(Section::new(b"BEST", nested(b)?));
        }
        for (h, m) in self.heads.iter().zip(&self.head_moments) {
            let mut p = Vec::new();
            for r in [h.group.east_residue, h.group.north_residue, h.group.heading_residue] {
                p.extend_from_slice(&r.to_le_bytes());
            }
            p.extend_from_slice(&(h.num_classes as u64).to_le_bytes());
            p.extend_from_slice(&(h.dim as u64).to_le_bytes());
            p.extend_from_slice(&checkpoint::f64s_to_bytes(&h.weights));
            put_moments(&mut p, m);
            sections.push(Section::new(b"HEAD", p));
        }
        let mut adam = Vec::new();
        let mm = &self.model_moments;
        put_moments(&mut adam, &mm.projection);
        for opt in [&mm.bias, &mm.p] {
            adam.push(u8::from(opt.is_some()));
            if let Some(m) = opt {
                put_moments(&mut adam, m);
            }
        }
        sections.push(Section::new(b"ADAM", adam));
        let mut trace = Vec::new();
        trace.extend_from_slice(&checkpoint::f64s_to_bytes(&self.loss_trace));
        sections.push(Section::new(b"LOSS", trace));
        checkpoint::write_container(w, TRAIN_MAGIC, &sections)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let sections = checkpoint::read_container(r, TRAIN_MAGIC)?;
        let one = |tag: &[u8; 4]| {
            sections
                .iter()
                .find(|s| &s.tag == tag)
                .map(|s| s.payload.as_slice())
                .ok_or_else(|| Error::Format(format!("training checkpoint lacks {}", String::from_utf8_lossy(tag))))
        };
        let meta: StateMeta = serde_json::from_slice(one(b"STAT")?)?;
        let model = EmbeddingModel::load(one(b"MODL")?)?;
        let best_model = sections
            .iter()
            .find(|s| &s.tag == b"BEST")
            .map(|s| EmbeddingModel::load(s.payload.as_slice()))
            .transpose()?;
        let mut heads = Vec::new();
        let mut head_moments = Vec::new();
        for s in sections.iter().filter(|s| &s.tag == b"HEAD") {
            let mut r = ByteReader::new(&s.payload);
            let group = GroupId::new(r.u32()?, r.u32()?, r.u32()?);
            let num_classes = r.u64()? as usize;
            let dim = r.u64()? as usize;
            let weights = r.f64s(num_classes * dim)?;
            head_moments.push(get_moments(&mut r)?);
            heads.push(ClassifierHead { group, num_classes, dim, weights });
        }
        if heads.iter().map(|h| h.group).ne(meta.groups.iter().copied()) {
            return Err(Error::Format("head sections disagree with the group list".into()));
        }
        let mut a = ByteReader::new(one(b"ADAM")?);
        let projection = get_moments(&mut a)?;
        let mut opt = || -> Result<Option<Moments>> {
            match a.u8()? {
                0 => Ok(None),
                1 => Ok(Some(get_moments(&mut a)?)),
                b => Err(Error::Format(format!("bad optional flag {b}"))),
            }
        };
        let bias = opt()?;
        let p = opt()?;
        let loss_trace = checkpoint::bytes_to_f64s(one(b"LOSS")?)?;
        Ok(Self {
            model,
            groups: meta.groups,
            heads,
            model_moments: ModelMoments { projection, bias, p },
            head_moments,
            epoch: meta.epoch,
            best_val_recall1: meta.best_val_recall1.unwrap_or(f64::NEG_INFINITY),
            best_epoch: meta.best_epoch,
            best_model,
            history: meta.history,
            loss_trace,
            peak_resident_descriptors: meta.peak_resident_descriptors,
        })
    }
}

const HISTORY_COLUMNS: [&str; 6] = ["epoch", "group", "mean_loss", "recall_at_1", "recall_at_5", "recall_at_10"];

/// History as CSV; `provenance` lines are written first as `#` comments.
pub fn write_history_csv<W: Write>(history: &[EpochRecord], provenance: Option<&str>, mut w: W) -> Result<()> {
    if let Some(p) = provenance {
        for line in p.lines() {
            writeln!(w, "# {line}")?;
        }
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(HISTORY_COLUMNS)?;
    for r in history {
        out.write_record([
            r.epoch.to_string(),
            r.group.to_string(),
            r.mean_loss.to_string(),
            r.recall_at_1.to_string(),
            r.recall_at_5.to_string(),
            r.recall_at_10.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a history CSV written by [`write_history_csv`], skipping `#` lines.
pub fn read_history_csv<R: Read>(r: R) -> Result<Vec<EpochRecord>> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let header = rd.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != HISTORY_COLUMNS {
        return Err(Error::Format(format!("unexpected history header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut out = Vec::new();
    for (i, row) in rd.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let num = |j: usize| -> Result<f64> {
            row[j].parse().map_err(|_| Error::Parse { line, msg: format!("bad number `{}`", &row[j]) })
        };
        out.push(EpochRecord {
            epoch: row[0].parse().map_err(|_| Error::Parse { line, msg: format!("bad epoch `{}`", &row[0]) })?,
            group: row[1].parse().map_err(|e: Error| Error::Parse { line, msg: e.to_string() })?,
            mean_loss: num(2)?,
            recall_at_1: num(3)?,
            recall_at_5: num(4)?,
            recall_at_10: num(5)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{EmbedConfig, FeatureMap};
    use crate::partition::{build_partition, GeoPose, PartitionConfig};

    fn scalar_step(g: f64, t: u64, m: &mut Moments, theta: &mut [f64], lr: f64) {
        let cfg = AdamConfig { learning_rate: lr, ..AdamConfig::default() };
        adam_step("x", theta, &[g], m, t, &cfg).unwrap();
    }

    #[test]
    fn adam_first_step() {
        let mut m = Moments::zeros(1);
        let mut th = [0.0];
        scalar_step(1.0, 1, &mut m, &mut th, 0.1);
        assert!((th[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);

        let mut m = Moments::zeros(3);
        let mut th = [1.0, -2.0, 3.0];
        adam_step("x", &mut th, &[0.0; 3], &mut m, 1, &AdamConfig::default()).unwrap();
        assert_eq!(th, [1.0, -2.0, 3.0]);
        assert_eq!(m, Moments::zeros(3));
    }

    #[test]
    fn adam_constant_gradient_steps_at_lr() {
        let mut m = Moments::zeros(1);
        let mut th = [0.0];
        let mut last = 0.0;
        for t in 1..=2000 {
            let before = th[0];
            scalar_step(-0.37, t, &mut m, &mut th, 0.01);
            last = th[0] - before;
        }
        assert!((last - 0.01).abs() < 1e-6);
    }

    #[test]
    fn adam_rejects_bad_inputs() {
        let mut m = Moments::zeros(2);
        let mut th = [0.0, 0.0];
        let err = adam_step("projection", &mut th, &[1.0, f64::NAN], &mut m, 1, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("projection"));
        assert_eq!(th, [0.0, 0.0]);
        assert!(adam_step("x", &mut th, &[1.0], &mut m, 1, &AdamConfig::default()).is_err());
        assert!(adam_step("x", &mut th, &[1.0, 1.0], &mut m, 0, &AdamConfig::default()).is_err());
    }

    fn two_class_partition(sizes: (usize, usize)) -> Partition {
        let mut recs = Vec::new();
        for i in 0..sizes.0 {
            recs.push(ImageRecord::new(format!("a{i}"), GeoPose::new(5.0, 5.0, 10.0).unwrap()));
        }
        for i in 0..sizes.1 {
            recs.push(ImageRecord::new(format!("b{i}"), GeoPose::new(15.0, 5.0, 10.0).unwrap()));
        }
        let cfg = PartitionConfig { spatial_groups: 1, heading_groups: 1, min_images_per_class: 0, ..Default::default() };
        build_partition(&recs, &cfg).unwrap()
    }

    #[test]
    fn sampler_is_class_uniform() {
        let p = two_class_partition((3, 300));
        let g = GroupId::new(0, 0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = sample_batch(&p, &g, 10_000, &mut rng).unwrap();
        let a = draws.iter().filter(|(_, y)| *y == 0).count() as f64 / 1e4;
        assert!((a - 0.5).abs() < 0.02, "{a}");
        assert!(draws.iter().all(|(id, y)| id.starts_with(if *y == 0 { 'a' } else { 'b' })));

        let b1 = sample_batch(&p, &g, 32, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(b1.len(), 32);
        assert_eq!(b1, sample_batch(&p, &g, 32, &mut ChaCha8Rng::seed_from_u64(9)).unwrap());
    }

    #[test]
    fn sampler_needs_two_classes() {
        let p = two_class_partition((3, 0));
        assert!(sample_batch(&p, &GroupId::new(0, 0, 0), 4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    /// Two well-separated classes per heading bin around a handful of cells.
    fn toy() -> (Vec<ImageRecord>, FeatureStore) {
        let mut recs = Vec::new();
        let mut store = FeatureStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for class in 0..6usize {
            for k in 0..8 {
                let id = format!("c{class}_{k}");
                let pose = GeoPose::new(5.0 + 40.0 * class as f64, 5.0, 10.0).unwrap();
                recs.push(ImageRecord::new(id.clone(), pose));
                let vals: Vec<f64> = (0..6)
                    .map(|c| 1.0 + if c == class { 2.0 } else { 0.0 } + rng.random_range(0.0..0.5))
                    .collect();
                store.insert(id, FeatureMap::new(6, 1, 1, vals).unwrap()).unwrap();
            }
        }
        (recs, store)
    }

    fn toy_run(cfg: &TrainConfig) -> TrainState {
        let (recs, store) = toy();
        let pcfg = PartitionConfig { spatial_groups: 1, heading_groups: 1, min_images_per_class: 0, ..Default::default() };
        let train: Vec<_> = recs.iter().filter(|r| !r.id.ends_with("_7") && !r.id.ends_with("_6")).cloned().collect();
        let db: Vec<_> = recs.iter().filter(|r| r.id.ends_with("_6")).cloned().collect();
        let q: Vec<_> = recs.iter().filter(|r| r.id.ends_with("_7")).cloned().collect();
        let p = build_partition(&train, &pcfg).unwrap();
        let model = EmbeddingModel::random(&EmbedConfig { output_dim: 4, ..Default::default() }, 6, 1).unwrap();
        let data = TrainData { partition: &p, features: &store, val_db: &db, val_queries: &q, zone: None };
        train_cosplace(model, &data, cfg).unwrap()
    }

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            groups_used: 1,
            iterations_per_epoch: 30,
            total_epochs: 3,
            batch_size: 8,
            learning_rate: 0.02,
            deterministic: true,
            ..Default::default()
        }
    }

    #[test]
    fn toy_training_improves_and_selects_best() {
        let s = toy_run(&toy_cfg());
        assert_eq!(s.history.len(), 3);
        assert!(s.loss_trace.last().unwrap() < s.loss_trace.first().unwrap());
        let best = s.history.iter().map(|r| r.recall_at_1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(s.best_val_recall1, best);
        assert!(s.peak_resident_descriptors <= 8);
        let exported = export_inference_model(&s).unwrap();
        assert_eq!(Some(&exported), s.best_model.as_ref());
    }

    #[test]
    fn zero_learning_rate_is_inert() {
        let s = toy_run(&TrainConfig { learning_rate: 0.0, ..toy_cfg() });
        let init = EmbeddingModel::random(&EmbedConfig { output_dim: 4, ..Default::default() }, 6, 1).unwrap();
        assert_eq!(export_inference_model(&s).unwrap(), init);
    }

    #[test]
    fn deterministic_runs_match() {
        let a = toy_run(&toy_cfg());
        let b = toy_run(&toy_cfg());
        assert_eq!(a, b);
    }

    #[test]
    fn export_needs_validation() {
        let (recs, _) = toy();
        let pcfg = PartitionConfig { spatial_groups: 1, heading_groups: 1, min_images_per_class: 0, ..Default::default() };
        let p = build_partition(&recs, &pcfg).unwrap();
        let model = EmbeddingModel::random(&EmbedConfig { output_dim: 4, ..Default::default() }, 6, 1).unwrap();
        let s = TrainState::new(model, &p, &toy_cfg()).unwrap();
        assert!(export_inference_model(&s).is_err());
    }

    #[test]
    fn too_many_groups_rejected() {
        let (recs, _) = toy();
        let pcfg = PartitionConfig { spatial_groups: 1, heading_groups: 1, min_images_per_class: 0, ..Default::default() };
        let p = build_partition(&recs, &pcfg).unwrap();
        let model = EmbeddingModel::random(&EmbedConfig { output_dim: 4, ..Default::default() }, 6, 1).unwrap();
        assert!(TrainState::new(model, &p, &TrainConfig { groups_used: 2, ..toy_cfg() }).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let full = toy_run(&toy_cfg());
        let partial = toy_run(&TrainConfig { total_epochs: 2, ..toy_cfg() });
        let mut buf = Vec::new();
        partial.save(&mut buf).unwrap();
        let mut loaded = TrainState::load(buf.as_slice()).unwrap();
        assert_eq!(loaded, partial);

        let (recs, store) = toy();
        let pcfg = PartitionConfig { spatial_groups: 1, heading_groups: 1, min_images_per_class: 0, ..Default::default() };
        let train: Vec<_> = recs.iter().filter(|r| !r.id.ends_with("_7") && !r.id.ends_with("_6")).cloned().collect();
        let db: Vec<_> = recs.iter().filter(|r| r.id.ends_with("_6")).cloned().collect();
        let q: Vec<_> = recs.iter().filter(|r| r.id.ends_with("_7")).cloned().collect();
        let p = build_partition(&train, &pcfg).unwrap();
        let data = TrainData { partition: &p, features: &store, val_db: &db, val_queries: &q, zone: None };
        train_epochs(&mut loaded, &data, &toy_cfg(), &mut ()).unwrap();
        assert_eq!(loaded, full);
    }

    #[test]
    fn history_csv_layout() {
        let s = toy_run(&toy_cfg());
        let mut out = Vec::new();
        write_history_csv(&s.history, Some("seed = 0"), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "# seed = 0");
        assert_eq!(lines[1], "epoch,group,mean_loss,recall_at_1,recall_at_5,recall_at_10");
        assert_eq!(lines.len(), 2 + 3);
        assert!(lines[2].starts_with("0,G0:0:0,"));
        assert_eq!(read_history_csv(text.as_bytes()).unwrap(), s.history);
        assert!(read_history_csv("epoch,loss\n".as_bytes()).is_err());
    }
}
