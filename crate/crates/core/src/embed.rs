//! Descriptor head: channel pooling, a fully connected projection to `D`
//! dimensions, and L2 normalization, with exact gradients.
//!
//! The convolutional backbone is not modelled; inputs are `C×H×W` feature
//! maps supplied by a feature store.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, put_string, ByteReader, Section};
use crate::error::{Error, Result};

/// Dense `C×H×W` tensor, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty feature map {channels}x{height}x{width}")));
        }
        if values.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self { channels, height, width, values })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn channel(&self, c: usize) -> &[f64] {
        let hw = self.height * self.width;
        &self.values[c * hw..(c + 1) * hw]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Pooling {
    /// Generalized mean `((1/HW) Σ max(x,0)^p)^(1/p)`.
    Gem { p: f64 },
    Average,
    Max,
}

/// Pools each channel to one value.
pub fn pool(fm: &FeatureMap, pooling: Pooling) -> Result<Vec<f64>> {
    if fm.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature map".into()));
    }
    if let Pooling::Gem { p } = pooling {
        if !(p >= 1.0 && p.is_finite()) {
            return Err(Error::Invalid(format!("GeM exponent must be >= 1, got {p}")));
        }
    }
    Ok((0..fm.channels).map(|c| pool_channel(fm.channel(c), pooling)).collect())
}

fn pool_channel(xs: &[f64], pooling: Pooling) -> f64 {
    let n = xs.len() as f64;
    match pooling {
        Pooling::Average => xs.iter().sum::<f64>() / n,
        Pooling::Max => xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Pooling::Gem { p } => {
            let s = xs.iter().map(|&x| x.max(0.0).powf(p)).sum::<f64>() / n;
            s.powf(1.0 / p)
        }
    }
}

/// d(gem)/dp for one channel.
fn gem_dp(xs: &[f64], p: f64) -> f64 {
    let n = xs.len() as f64;
    let mut s = 0.0;
    let mut s_log = 0.0;
    for &x in xs {
        let x = x.max(0.0);
        if x > 0.0 {
            let xp = x.powf(p);
            s += xp;
            s_log += xp * x.ln();
        }
    }
    if s == 0.0 {
        return 0.0;
    }
    s /= n;
    s_log /= n;
    let g = s.powf(1.0 / p);
    g * (-s.ln() / (p * p) + s_log / (p * s))
}

/// Unit-norm descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor(Vec<f64>);

pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

impl Descriptor {
    /// Wraps a vector that must already have unit norm (within 1e-6).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let n = l2_norm(&values);
        if !n.is_finite() || (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::Degenerate(format!("descriptor norm {n} is not 1")));
        }
        Ok(Self(values))
    }

    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let n = l2_norm(&values);
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Degenerate(format!("cannot normalize a vector of norm {n}")));
        }
        Ok(Self(values.into_iter().map(|v| v / n).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedConfig {
    #[serde(default = "defaults::pooling")]
    pub pooling: PoolingKind,
    #[serde(default = "defaults::gem_p")]
    pub gem_p: f64,
    #[serde(default)]
    pub learn_p: bool,
    #[serde(default = "defaults::output_dim")]
    pub output_dim: usize,
    #[serde(default = "defaults::bias")]
    pub bias: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingKind {
    Gem,
    Average,
    Max,
}

mod defaults {
    pub fn pooling() -> super::PoolingKind {
        super::PoolingKind::Gem
    }
    pub fn gem_p() -> f64 {
        3.0
    }
    pub fn output_dim() -> usize {
        512
    }
    pub fn bias() -> bool {
        true
    }
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            pooling: defaults::pooling(),
            gem_p: defaults::gem_p(),
            learn_p: false,
            output_dim: defaults::output_dim(),
            bias: defaults::bias(),
        }
    }
}

impl EmbedConfig {
    pub fn pooling(&self) -> Pooling {
        match self.pooling {
            PoolingKind::Gem => Pooling::Gem { p: self.gem_p },
            PoolingKind::Average => Pooling::Average,
            PoolingKind::Max => Pooling::Max,
        }
    }
}

/// Pooling + projection (`D×C`, row-major) + optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub pooling: Pooling,
    pub learn_p: bool,
    pub input_channels: usize,
    pub output_dim: usize,
    pub projection: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

/// Intermediate values of one forward pass, reused by backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub pooled: Vec<f64>,
    pub pre_norm: Vec<f64>,
    pub norm: f64,
    pub descriptor: Descriptor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub projection: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    /// Present when the model pools with GeM and learns `p`.
    pub p: Option<f64>,
}

impl ModelGradients {
    pub fn zeros_like(m: &EmbeddingModel) -> Self {
        Self {
            projection: vec![0.0; m.projection.len()],
            bias: m.bias.as_ref().map(|b| vec![0.0; b.len()]),
            p: m.gem_p_trainable().then_some(0.0),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGradients) {
        for (a, b) in self.projection.iter_mut().zip(&other.projection) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (self.bias.as_mut(), other.bias.as_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        if let (Some(a), Some(b)) = (self.p.as_mut(), other.p) {
            *a += b;
        }
    }
}

impl EmbeddingModel {
    pub fn new(
        pooling: Pooling,
        projection: Vec<f64>,
        bias: Option<Vec<f64>>,
        input_channels: usize,
        output_dim: usize,
    ) -> Result<Self> {
        if input_channels == 0 || output_dim == 0 {
            return Err(Error::Shape("model dimensions must be >= 1".into()));
        }
        if projection.len() != input_channels * output_dim {
            return Err(Error::Shape(format!(
                "projection has {} entries, expected {output_dim}x{input_channels}",
                projection.len()
            )));
        }
        if bias.as_ref().is_some_and(|b| b.len() != output_dim) {
            return Err(Error::Shape("bias length differs from output_dim".into()));
        }
        if projection.iter().chain(bias.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self { pooling, learn_p: false, input_channels, output_dim, projection, bias })
    }

    /// Gaussian projection with variance `1/C`, zero bias.
    pub fn random(cfg: &EmbedConfig, input_channels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, (1.0 / input_channels.max(1) as f64).sqrt())
            .map_err(|e| Error::Invalid(e.to_string()))?;
        let projection = (0..input_channels * cfg.output_dim).map(|_| normal.sample(&mut rng)).collect();
        let bias = cfg.bias.then(|| vec![0.0; cfg.output_dim]);
        let mut m = Self::new(cfg.pooling(), projection, bias, input_channels, cfg.output_dim)?;
        m.learn_p = cfg.learn_p && cfg.pooling == PoolingKind::Gem;
        Ok(m)
    }

    pub fn gem_p_trainable(&self) -> bool {
        self.learn_p && matches!(self.pooling, Pooling::Gem { .. })
    }

    pub fn forward(&self, fm: &FeatureMap) -> Result<Descriptor> {
        Ok(self.forward_cached(fm)?.descriptor)
    }

    pub fn forward_cached(&self, fm: &FeatureMap) -> Result<ForwardCache> {
        if fm.channels != self.input_channels {
            return Err(Error::Shape(format!(
                "feature map has {} channels, model expects {}",
                fm.channels, self.input_channels
            )));
        }
        let pooled = pool(fm, self.pooling)?;
        let c = self.input_channels;
        let pre_norm: Vec<f64> = (0..self.output_dim)
            .map(|d| {
                let row = &self.projection[d * c..(d + 1) * c];
                dot(row, &pooled) + self.bias.as_ref().map_or(0.0, |b| b[d])
            })
            .collect();
        let norm = l2_norm(&pre_norm);
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Degenerate(format!("pre-normalization norm {norm}")));
        }
        let descriptor = Descriptor(pre_norm.iter().map(|v| v / norm).collect());
        Ok(ForwardCache { pooled, pre_norm, norm, descriptor })
    }

    /// Gradients of a scalar loss with respect to the parameters, given its
    /// gradient with respect to the output descriptor.
    pub fn backward(&self, fm: &FeatureMap, grad_descriptor: &[f64]) -> Result<ModelGradients> {
        let cache = self.forward_cached(fm)?;
        self.backward_cached(fm, &cache, grad_descriptor)
    }

    pub fn backward_cached(
        &self,
        fm: &FeatureMap,
        cache: &ForwardCache,
        grad_descriptor: &[f64],
    ) -> Result<ModelGradients> {
        if grad_descriptor.len() != self.output_dim {
            return Err(Error::Shape("descriptor gradient length".into()));
        }
        let grad_pre = normalize_backward(cache.descriptor.values(), cache.norm, grad_descriptor);
        let c = self.input_channels;
        let mut projection = vec![0.0; self.projection.len()];
        for (d, gd) in grad_pre.iter().enumerate() {
            for (k, pk) in cache.pooled.iter().enumerate() {
                projection[d * c + k] = gd * pk;
            }
        }
        let bias = self.bias.as_ref().map(|_| grad_pre.clone());
        let p = match self.pooling {
            Pooling::Gem { p } if self.learn_p => {
                let mut gp = 0.0;
                for k in 0..c {
                    let grad_pooled_k: f64 =
                        (0..self.output_dim).map(|d| self.projection[d * c + k] * grad_pre[d]).sum();
                    gp += grad_pooled_k * gem_dp(fm.channel(k), p);
                }
                Some(gp)
            }
            _ => None,
        };
        Ok(ModelGradients { projection, bias, p })
    }

    pub fn gem_p(&self) -> Option<f64> {
        match self.pooling {
            Pooling::Gem { p } => Some(p),
            _ => None,
        }
    }

    pub fn set_gem_p(&mut self, p: f64) {
        if let Pooling::Gem { p: ref mut q } = self.pooling {
            *q = p;
        }
    }

    pub(crate) fn sections(&self) -> Vec<Section> {
        let meta = ModelMeta {
            format: MODEL_FORMAT.into(),
            pooling: self.pooling,
            learn_p: self.learn_p,
            input_channels: self.input_channels,
            output_dim: self.output_dim,
            bias: self.bias.is_some(),
        };
        let mut s = vec![
            Section::new(b"META", serde_json::to_vec(&meta).expect("model metadata serializes")),
            Section::new(b"PROJ", checkpoint::f64s_to_bytes(&self.projection)),
        ];
        if let Some(b) = &self.bias {
            s.push(Section::new(b"BIAS", checkpoint::f64s_to_bytes(b)));
        }
        s
    }

    pub(crate) fn from_sections(sections: &[Section]) -> Result<Self> {
        let find = |tag: &[u8; 4]| sections.iter().find(|s| &s.tag == tag);
        let meta: ModelMeta = serde_json::from_slice(
            &find(b"META").ok_or_else(|| Error::Format("checkpoint has no META section".into()))?.payload,
        )?;
        if meta.format != MODEL_FORMAT {
            return Err(Error::Format(format!("unknown model format {}", meta.format)));
        }
        let projection = checkpoint::bytes_to_f64s(
            &find(b"PROJ").ok_or_else(|| Error::Format("checkpoint has no PROJ section".into()))?.payload,
        )?;
        let bias = match (meta.bias, find(b"BIAS")) {
            (true, Some(s)) => Some(checkpoint::bytes_to_f64s(&s.payload)?),
            (false, None) => None,
            _ => return Err(Error::Format("BIAS section disagrees with metadata".into())),
        };
        let mut m = Self::new(meta.pooling, projection, bias, meta.input_channels, meta.output_dim)?;
        m.learn_p = meta.learn_p;
        Ok(m)
    }

    /// Writes an inference checkpoint (pooling, projection, bias; no classifier heads).
    /// `provenance` is stored verbatim in a `CONF` section when given.
    pub fn save<W: Write>(&self, w: W, provenance: Option<&str>) -> Result<()> {
        let mut sections = self.sections();
        if let Some(p) = provenance {
            sections.push(Section::new(b"CONF", p.as_bytes().to_vec()));
        }
        checkpoint::write_container(w, MODEL_MAGIC, &sections)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        Self::from_sections(&checkpoint::read_container(r, MODEL_MAGIC)?)
    }
}

pub const MODEL_MAGIC: &[u8; 4] = b"CPLM";
const MODEL_FORMAT: &str = "cosplace-embedding-model/1";

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    format: String,
    pooling: Pooling,
    learn_p: bool,
    input_channels: usize,
    output_dim: usize,
    bias: bool,
}

/// Backward of `y ↦ y/‖y‖`: `(g − d·⟨d,g⟩)/‖y‖`.
pub fn normalize_backward(unit: &[f64], norm: f64, grad_out: &[f64]) -> Vec<f64> {
    let proj = dot(unit, grad_out);
    unit.iter().zip(grad_out).map(|(u, g)| (g - u * proj) / norm).collect()
}

/// Feature maps keyed by image id, all with one shape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureStore {
    shape: Option<(usize, usize, usize)>,
    ids: Vec<String>,
    maps: Vec<FeatureMap>,
    index: HashMap<String, usize>,
}

pub const FEATURE_STORE_MAGIC: &[u8; 4] = b"CPFS";

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, fm: FeatureMap) -> Result<()> {
        let id = id.into();
        match self.shape {
            None => self.shape = Some(fm.shape()),
            Some(s) if s != fm.shape() => {
                return Err(Error::Shape(format!("feature map {:?} in a {:?} store", fm.shape(), s)))
            }
            _ => {}
        }
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateKey(id));
        }
        self.index.insert(id.clone(), self.maps.len());
        self.ids.push(id);
        self.maps.push(fm);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&FeatureMap> {
        self.index.get(id).map(|&i| &self.maps[i])
    }

    pub fn require(&self, id: &str) -> Result<&FeatureMap> {
        self.get(id).ok_or_else(|| Error::Invalid(format!("no features for image `{id}`")))
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.shape
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &FeatureMap)> {
        self.ids.iter().map(String::as_str).zip(&self.maps)
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let (c, h, wd) = self.shape.unwrap_or((0, 0, 0));
        let mut head = Vec::new();
        head.extend_from_slice(&(self.maps.len() as u64).to_le_bytes());
        for d in [c, h, wd] {
            head.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let mut body = Vec::with_capacity(self.maps.len() * (c * h * wd * 8 + 16));
        for (id, fm) in self.ids.iter().zip(&self.maps) {
            put_string(&mut body, id);
            body.extend_from_slice(&checkpoint::f64s_to_bytes(&fm.values));
        }
        checkpoint::write_container(
            w,
            FEATURE_STORE_MAGIC,
            &[Section::new(b"HEAD", head), Section::new(b"MAPS", body)],
        )
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let sections = checkpoint::read_container(r, FEATURE_STORE_MAGIC)?;
        let (head, body) = match sections.as_slice() {
            [h, b] if &h.tag == b"HEAD" && &b.tag == b"MAPS" => (h, b),
            _ => return Err(Error::Format("feature store needs HEAD and MAPS sections".into())),
        };
        let mut hr = ByteReader::new(&head.payload);
        let count = hr.u64()? as usize;
        let (c, h, w) = (hr.u32()? as usize, hr.u32()? as usize, hr.u32()? as usize);
        let mut store = FeatureStore::new();
        let mut br = ByteReader::new(&body.payload);
        for _ in 0..count {
            let id = br.string()?;
            let values = br.f64s(c * h * w)?;
            store.insert(id, FeatureMap::new(c, h, w, values)?)?;
        }
        if !br.is_done() {
            return Err(Error::Format("trailing bytes in feature store".into()));
        }
        Ok(store)
    }
}
