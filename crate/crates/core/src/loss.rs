//! Large Margin Cosine Loss over one group's classifier head.
//!
//! Per item with label `y`:
//! `−log( e^{s(cos θ_y − m)} / (e^{s(cos θ_y − m)} + Σ_{j≠y} e^{s cos θ_j}) )`
//! where `cos θ_j = ⟨descriptor, w_j/‖w_j‖⟩`. Rows are stored unnormalized
//! and normalized on the fly; gradients include that normalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embed::{dot, l2_norm, Descriptor};
use crate::error::{Error, Result};
use crate::partition::GroupId;
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
}

fn default_margin() -> f64 {
    0.40
}

fn default_scale() -> f64 {
    30.0
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { margin: default_margin(), scale: default_scale() }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("scale must be > 0, got {}", self.scale)));
        }
        Ok(())
    }
}

/// One class weight row per class of the group, `num_classes × dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub group: GroupId,
    pub num_classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
}

pub fn new_head(group: GroupId, num_classes: usize, dim: usize, seed: u64) -> Result<ClassifierHead> {
    if num_classes < 2 {
        return Err(Error::Invalid(format!(
            "group {group} has {num_classes} classes; a classifier head needs at least 2"
        )));
    }
    if dim == 0 {
        return Err(Error::Shape("head dimension must be >= 1".into()));
    }
    let stream = derive_seed(
        seed,
        &[
            u64::from(group.east_residue),
            u64::from(group.north_residue),
            u64::from(group.heading_residue),
        ],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let mut weights = Vec::with_capacity(num_classes * dim);
    for _ in 0..num_classes {
        let row: Vec<f64> = loop {
            let r: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            if l2_norm(&r) > 1e-12 {
                break r;
            }
        };
        let n = l2_norm(&row);
        weights.extend(row.into_iter().map(|v| v / n));
    }
    Ok(ClassifierHead { group, num_classes, dim, weights })
}

impl ClassifierHead {
    pub fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.dim..(j + 1) * self.dim]
    }

    fn normalized_rows(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut unit = Vec::with_capacity(self.weights.len());
        let mut norms = Vec::with_capacity(self.num_classes);
        for j in 0..self.num_classes {
            let r = self.row(j);
            let n = l2_norm(r);
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::Degenerate(format!("head row {j} has norm {n}")));
            }
            norms.push(n);
            unit.extend(r.iter().map(|v| v / n));
        }
        Ok((unit, norms))
    }

    /// Cosine of a descriptor with every class row.
    pub fn cosines(&self, d: &[f64]) -> Result<Vec<f64>> {
        let (unit, _) = self.normalized_rows()?;
        Ok(unit.chunks_exact(self.dim).map(|r| dot(r, d)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub loss: f64,
    /// One gradient per descriptor (Euclidean, not projected to the sphere).
    pub descriptors: Vec<Vec<f64>>,
    /// Gradient with respect to the stored (unnormalized) head weights.
    pub weights: Vec<f64>,
}

struct Prepared {
    unit: Vec<f64>,
    norms: Vec<f64>,
}

fn check_inputs(descriptors: &[Descriptor], labels: &[usize], head: &ClassifierHead, cfg: &LossConfig) -> Result<Prepared> {
    cfg.validate()?;
    if descriptors.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if descriptors.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} descriptors but {} labels",
            descriptors.len(),
            labels.len()
        )));
    }
    for (i, d) in descriptors.iter().enumerate() {
        if d.dim() != head.dim {
            return Err(Error::Shape(format!("descriptor {i} has dim {}, head has {}", d.dim(), head.dim)));
        }
        let n = l2_norm(d.values());
        if (n - 1.0).abs() > crate::embed::UNIT_NORM_TOLERANCE {
            return Err(Error::Degenerate(format!("descriptor {i} has norm {n}")));
        }
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= head.num_classes) {
        return Err(Error::Invalid(format!(
            "label {y} of item {i} out of range for {} classes",
            head.num_classes
        )));
    }
    let (unit, norms) = head.normalized_rows()?;
    Ok(Prepared { unit, norms })
}

/// Logits `s·(cos − m·[j = y])` and the stabilized per-item loss.
fn item_logits(d: &[f64], y: usize, unit: &[f64], dim: usize, cfg: &LossConfig) -> (Vec<f64>, f64) {
    let logits: Vec<f64> = unit
        .chunks_exact(dim)
        .enumerate()
        .map(|(j, w)| {
            let c = dot(w, d);
            cfg.scale * if j == y { c - cfg.margin } else { c }
        })
        .collect();
    // lse − z_y = (z_max − z_y) + ln(1 + Σ_{j≠argmax} e^{z_j − z_max}); the
    // log1p form keeps small losses at full relative precision.
    let top = (0..logits.len()).fold(0, |b, j| if logits[j] > logits[b] { j } else { b });
    let mx = logits[top];
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != top)
        .map(|(_, z)| (z - mx).exp())
        .sum();
    let loss = (mx - logits[y]) + rest.ln_1p();
    (logits, loss)
}

/// Mean loss over the batch.
pub fn lmcl_forward(descriptors: &[Descriptor], labels: &[usize], head: &ClassifierHead, cfg: &LossConfig) -> Result<f64> {
    let prep = check_inputs(descriptors, labels, head, cfg)?;
    let total: f64 = descriptors
        .iter()
        .zip(labels)
        .map(|(d, &y)| item_logits(d.values(), y, &prep.unit, head.dim, cfg).1)
        .sum();
    Ok(total / descriptors.len() as f64)
}

pub fn lmcl_backward(
    descriptors: &[Descriptor],
    labels: &[usize],
    head: &ClassifierHead,
    cfg: &LossConfig,
) -> Result<LossGradients> {
    let prep = check_inputs(descriptors, labels, head, cfg)?;
    let b = descriptors.len() as f64;
    let dim = head.dim;
    let mut grad_unit = vec![0.0; head.weights.len()];
    let mut grad_desc = Vec::with_capacity(descriptors.len());
    let mut total = 0.0;
    for (d, &y) in descriptors.iter().zip(labels) {
        let d = d.values();
        let (logits, loss) = item_logits(d, y, &prep.unit, dim, cfg);
        total += loss;
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut gd = vec![0.0; dim];
        for (j, e) in exps.iter().enumerate() {
            let target = if j == y { 1.0 } else { 0.0 };
            // d loss / d cos_j, batch-mean included
            let g = cfg.scale * (e / z - target) / b;
            let w = &prep.unit[j * dim..(j + 1) * dim];
            for k in 0..dim {
                gd[k] += g * w[k];
                grad_unit[j * dim + k] += g * d[k];
            }
        }
        grad_desc.push(gd);
    }
    let mut weights = vec![0.0; head.weights.len()];
    for j in 0..head.num_classes {
        let range = j * dim..(j + 1) * dim;
        let back = crate::embed::normalize_backward(&prep.unit[range.clone()], prep.norms[j], &grad_unit[range.clone()]);
        weights[range].copy_from_slice(&back);
    }
    Ok(LossGradients { loss: total / b, descriptors: grad_desc, weights })
}

/// Component of `grad` tangent to the unit sphere at `unit`.
pub fn tangent_component(unit: &[f64], grad: &[f64]) -> Vec<f64> {
    let p = dot(unit, grad);
    unit.iter().zip(grad).map(|(u, g)| g - u * p).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn head(rows: &[&[f64]]) -> ClassifierHead {
        ClassifierHead {
            group: GroupId::new(0, 0, 0),
            num_classes: rows.len(),
            dim: rows[0].len(),
            weights: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    fn desc(v: &[f64]) -> Descriptor {
        Descriptor::new(v.to_vec()).unwrap()
    }

    #[test]
    fn two_class_hand_values() {
        let h = head(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let d = [desc(&[1.0, 0.0])];
        let l0 = lmcl_forward(&d, &[0], &h, &LossConfig { margin: 0.0, scale: 1.0 }).unwrap();
        assert!((l0 - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l0 - 0.313262).abs() < 1e-6);
        let l4 = lmcl_forward(&d, &[0], &h, &LossConfig { margin: 0.4, scale: 1.0 }).unwrap();
        assert!((l4 - (1.0 + (-0.6f64).exp()).ln()).abs() < 1e-12);
        assert!((l4 - 0.437488).abs() < 1e-6);
    }

    #[test]
    fn large_scale_is_stable() {
        let h = head(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let d = [desc(&[-1.0, 0.0])];
        let l = lmcl_forward(&d, &[0], &h, &LossConfig { margin: 0.4, scale: 1000.0 }).unwrap();
        assert!(l.is_finite());
        assert!((l - 2400.0).abs() < 1e-6);
    }

    #[test]
    fn input_errors() {
        let h = head(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let d = [desc(&[1.0, 0.0])];
        let cfg = LossConfig::default();
        assert!(lmcl_forward(&d, &[2], &h, &cfg).is_err());
        assert!(lmcl_forward(&d, &[0, 1], &h, &cfg).is_err());
        assert!(lmcl_forward(&[], &[], &h, &cfg).is_err());
        // deliberately bypass the Descriptor constructor
        let bad = [Descriptor::normalized(vec![3.0, 4.0]).unwrap()];
        assert!(lmcl_forward(&bad, &[0], &h, &cfg).is_ok());
        let off: Descriptor = serde_json::from_str("[3.0, 4.0]").unwrap();
        assert!(matches!(lmcl_forward(&[off], &[0], &h, &cfg), Err(Error::Degenerate(_))));
    }

    #[test]
    fn heads_are_seeded_per_group() {
        let g0 = GroupId::new(0, 0, 0);
        let g1 = GroupId::new(0, 0, 1);
        let a = new_head(g0, 5, 8, 42).unwrap();
        assert_eq!(a, new_head(g0, 5, 8, 42).unwrap());
        assert_ne!(a.weights, new_head(g1, 5, 8, 42).unwrap().weights);
        for j in 0..5 {
            assert!((l2_norm(a.row(j)) - 1.0).abs() < 1e-12);
        }
        assert!(new_head(g0, 1, 8, 42).is_err());
    }

    #[test]
    fn symmetric_stationary_head_has_zero_weight_gradient() {
        // Two classes at ±e1, descriptors exactly on them: by symmetry the
        // weight gradient is radial, and the row normalization removes it.
        let h = head(&[&[1.0, 0.0, 0.0], &[-1.0, 0.0, 0.0]]);
        let d = [desc(&[1.0, 0.0, 0.0]), desc(&[-1.0, 0.0, 0.0])];
        let g = lmcl_backward(&d, &[0, 1], &h, &LossConfig::default()).unwrap();
        assert!(g.weights.iter().all(|v| v.abs() < 1e-8), "{:?}", g.weights);
    }

    #[test]
    fn margin_increases_loss_on_correct_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = new_head(GroupId::new(0, 0, 0), 4, 6, 3).unwrap();
        for _ in 0..50 {
            let y = rng.random_range(0..4);
            // descriptor near its class row => correctly classified with slack
            let v: Vec<f64> = h.row(y).iter().map(|w| w + 0.05 * rng.random_range(-1.0..1.0)).collect();
            let d = [Descriptor::normalized(v).unwrap()];
            let mut last = -1.0;
            for m in [0.0, 0.1, 0.2, 0.4, 0.8] {
                let l = lmcl_forward(&d, &[y], &h, &LossConfig { margin: m, scale: 30.0 }).unwrap();
                assert!(l > last);
                last = l;
            }
        }
    }

    #[test]
    fn batch_loss_is_mean_of_items() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = new_head(GroupId::new(1, 0, 0), 3, 4, 1).unwrap();
        let ds: Vec<Descriptor> = (0..6)
            .map(|_| Descriptor::normalized((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let ys: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let cfg = LossConfig::default();
        let batch = lmcl_forward(&ds, &ys, &h, &cfg).unwrap();
        let mean = ds
            .iter()
            .zip(&ys)
            .map(|(d, &y)| lmcl_forward(std::slice::from_ref(d), &[y], &h, &cfg).unwrap())
            .sum::<f64>()
            / 6.0;
        assert!((batch - mean).abs() < 1e-12);
    }
}
