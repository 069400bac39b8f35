//! Ablation-based layer importance: each layer's score is the timestep-weighted
//! squared change in the noise prediction when that layer's residual branch is
//! removed, averaged over a probe prompt set.

use std::collections::BTreeSet;

use mmdc_tensor::NdArray;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, Item};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::eval::val_loss_masked;
use crate::forward::{AblationMask, ModelInput};
use crate::model::Model;

/// Probe inputs are scored this many at a time; scores do not depend on it.
const SCORE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OmegaKind {
    Uniform,
    #[default]
    Linear,
    Quadratic,
    /// Weights supplied directly.
    Custom,
}

impl std::str::FromStr for OmegaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "linear" => Ok(Self::Linear),
            "quadratic" => Ok(Self::Quadratic),
            _ => Err(Error::config("importance.omega", "uniform, linear or quadratic", s)),
        }
    }
}

/// Probed timesteps and their weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepWeighting {
    pub kind: OmegaKind,
    pub t_sub: Vec<usize>,
    pub omega: Vec<f64>,
}

impl TimestepWeighting {
    /// `omega_t` = 1, `t/T` or `(t/T)^2`.
    pub fn new(kind: OmegaKind, t_sub: &[usize], timesteps: usize) -> Result<Self> {
        let f = |t: usize| t as f64 / timesteps as f64;
        let omega = t_sub
            .iter()
            .map(|&t| match kind {
                OmegaKind::Uniform => Ok(1.0),
                OmegaKind::Linear => Ok(f(t)),
                OmegaKind::Quadratic => Ok(f(t) * f(t)),
                OmegaKind::Custom => Err(Error::invalid("custom weights need TimestepWeighting::custom")),
            })
            .collect::<Result<Vec<_>>>()?;
        let w = Self {
            kind,
            t_sub: t_sub.to_vec(),
            omega,
        };
        w.validate(timesteps)?;
        Ok(w)
    }

    pub fn custom(t_sub: &[usize], omega: &[f64], timesteps: usize) -> Result<Self> {
        let w = Self {
            kind: OmegaKind::Custom,
            t_sub: t_sub.to_vec(),
            omega: omega.to_vec(),
        };
        w.validate(timesteps)?;
        Ok(w)
    }

    /// Same timesteps with every weight multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            kind: OmegaKind::Custom,
            t_sub: self.t_sub.clone(),
            omega: self.omega.iter().map(|w| w * c).collect(),
        }
    }

    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.t_sub.is_empty() {
            return Err(Error::config("importance.t_sub", "non-empty", "[]"));
        }
        if self.t_sub.len() != self.omega.len() {
            return Err(Error::config(
                "importance.omega",
                format!("{} weights", self.t_sub.len()),
                self.omega.len(),
            ));
        }
        if !self.t_sub.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config(
                "importance.t_sub",
                "strictly increasing",
                format!("{:?}", self.t_sub),
            ));
        }
        if let Some(&t) = self.t_sub.iter().find(|&&t| t == 0 || t > timesteps) {
            return Err(Error::config(
                "importance.t_sub",
                format!("timesteps in 1..={timesteps}"),
                t,
            ));
        }
        if self.omega.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config(
                "importance.omega",
                "finite weights >= 0",
                format!("{:?}", self.omega),
            ));
        }
        if self.total() <= 0.0 {
            return Err(Error::invalid("timestep weights sum to zero"));
        }
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.omega.iter().sum()
    }
}

/// Settings for one scoring run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImportanceConfig {
    /// Size of the probe prompt multiset.
    pub prompts: usize,
    pub t_sub: Vec<usize>,
    pub omega: OmegaKind,
    /// Probe with pure Gaussian `z_t` instead of noised paired images.
    pub pure_noise: bool,
    pub seed: u64,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self {
            prompts: 64,
            t_sub: vec![10, 30, 50, 70, 90],
            omega: OmegaKind::Linear,
            pure_noise: false,
            seed: 0,
        }
    }
}

impl ImportanceConfig {
    pub fn weighting(&self, timesteps: usize) -> Result<TimestepWeighting> {
        if self.prompts == 0 {
            return Err(Error::config("importance.prompts", ">= 1", 0));
        }
        TimestepWeighting::new(self.omega, &self.t_sub, timesteps)
    }
}

/// What a report was computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub seed: u64,
    pub prompts: Vec<String>,
    pub weighting: TimestepWeighting,
    pub pure_noise: bool,
    pub timesteps: usize,
    /// SHA-256 over the fields above.
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    /// Per-layer score; `None` for protected (unscored) layers.
    pub scores: Vec<Option<f64>>,
    pub protected: Vec<usize>,
    pub config: ReportConfig,
    /// `table[l][p][i]`: squared discrepancy for layer `l`, probe `p`, timestep `t_sub[i]`.
    pub table: Vec<Option<Vec<Vec<f64>>>>,
}

impl ImportanceReport {
    pub fn depth(&self) -> usize {
        self.scores.len()
    }

    /// Recomputes every score from the table.
    pub fn check_consistency(&self, tol: f64) -> Result<()> {
        for (l, (score, rows)) in self.scores.iter().zip(&self.table).enumerate() {
            match (score, rows) {
                (None, None) => {}
                (Some(s), Some(rows)) => {
                    let again = weighted_score(rows, &self.config.weighting.omega);
                    if (again - s).abs() > tol * again.abs().max(1.0) || *s < 0.0 {
                        return Err(Error::invalid(format!(
                            "layer {l}: score {s} disagrees with its table ({again})"
                        )));
                    }
                }
                _ => {
                    return Err(Error::invalid(format!(
                        "layer {l}: score and table disagree on presence"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Layers ordered from least to most important (scored layers only).
    pub fn ranking(&self) -> Vec<usize> {
        let mut ls: Vec<(usize, f64)> = self
            .scores
            .iter()
            .enumerate()
            .filter_map(|(l, s)| s.map(|s| (l, s)))
            .collect();
        ls.sort_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        ls.into_iter().map(|(l, _)| l).collect()
    }
}

/// `(1/|P|) * sum_p [ sum_i w_i d[p][i] / sum_i w_i ]`.
fn weighted_score(rows: &[Vec<f64>], omega: &[f64]) -> f64 {
    let total: f64 = omega.iter().sum();
    let per_prompt = rows
        .iter()
        .map(|r| r.iter().zip(omega).map(|(d, w)| d * w).sum::<f64>() / total);
    per_prompt.sum::<f64>() / rows.len() as f64
}

/// Per-sample squared L2 norm of `a - b` over all but the batch axis.
fn per_sample_sq(a: &NdArray, b: &NdArray) -> Vec<f64> {
    let per = a.numel() / a.shape()[0].max(1);
    a.data()
        .chunks(per)
        .zip(b.data().chunks(per))
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(&u, &v)| {
                    let d = u as f64 - v as f64;
                    d * d
                })
                .sum()
        })
        .collect()
}

/// `||eps(z_t) - eps_without_l(z_t)||^2` for each sample of `input`.
pub fn layer_discrepancy(model: &Model, input: &ModelInput, layer: usize) -> Result<Vec<f64>> {
    if layer >= model.depth() {
        return Err(Error::invalid(format!(
            "layer {layer} out of range for depth {}",
            model.depth()
        )));
    }
    let (full, _) = model.forward(input, None, false)?;
    let (ablated, _) = model.forward(input, Some(&AblationMask::single(model.depth(), layer)), false)?;
    Ok(per_sample_sq(&full, &ablated))
}

/// Noise for probe `p` at timestep `t`, a function of `seed` alone.
pub fn probe_noise(seed: u64, p: usize, t: usize, shape: &[usize]) -> NdArray {
    let key =
        seed ^ (p as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (t as u64 + 1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    NdArray::randn(shape, 1.0, &mut rng)
}

/// The noised probe input for `(p, t)`: the paired image noised to `t`, or
/// pure noise.
pub fn probe_input(
    schedule: &NoiseSchedule,
    item: &Item,
    p: usize,
    t: usize,
    seed: u64,
    pure_noise: bool,
) -> Result<ModelInput> {
    let mut shape = vec![1];
    shape.extend_from_slice(item.image.shape());
    let eps = probe_noise(seed, p, t, &shape);
    let z_t = if pure_noise {
        eps
    } else {
        let x0 = NdArray::new(shape.clone(), item.image.data().to_vec())?;
        schedule.add_noise(&x0, &[t], &eps)?
    };
    Ok(ModelInput {
        z_t,
        t: vec![t],
        tokens: item.prompt.tokens().to_vec(),
    })
}

fn stack(inputs: &[ModelInput]) -> Result<ModelInput> {
    let mut shape = inputs[0].z_t.shape().to_vec();
    shape[0] = inputs.len();
    Ok(ModelInput {
        z_t: NdArray::new(
            shape,
            inputs.iter().flat_map(|i| i.z_t.data().iter().copied()).collect(),
        )?,
        t: inputs.iter().flat_map(|i| i.t.iter().copied()).collect(),
        tokens: inputs.iter().flat_map(|i| i.tokens.iter().copied()).collect(),
    })
}

fn fingerprint(seed: u64, prompts: &[String], w: &TimestepWeighting, pure_noise: bool, timesteps: usize) -> String {
    let body = serde_json::json!({
        "seed": seed, "prompts": prompts, "weighting": w,
        "pure_noise": pure_noise, "timesteps": timesteps,
    });
    hex::encode(Sha256::digest(body.to_string().as_bytes()))
}

/// Scores every non-protected layer over all `(probe, t)` pairs of `probes`
/// and `weighting.t_sub`.
pub fn importance_scores(
    model: &Model,
    probes: &[Item],
    weighting: &TimestepWeighting,
    schedule: &NoiseSchedule,
    seed: u64,
    protected: &BTreeSet<usize>,
    pure_noise: bool,
) -> Result<ImportanceReport> {
    if probes.is_empty() {
        return Err(Error::invalid("importance prompt set is empty"));
    }
    weighting.validate(schedule.timesteps())?;
    let depth = model.depth();
    if let Some(&l) = protected.iter().find(|&&l| l >= depth) {
        return Err(Error::invalid(format!(
            "protected layer {l} out of range for depth {depth}"
        )));
    }
    let nt = weighting.t_sub.len();
    // Pairs in (p, t) order; row j is probe j / nt at timestep t_sub[j % nt].
    let mut inputs = Vec::with_capacity(probes.len() * nt);
    for (p, item) in probes.iter().enumerate() {
        for &t in &weighting.t_sub {
            inputs.push(probe_input(schedule, item, p, t, seed, pure_noise)?);
        }
    }
    let scored: Vec<usize> = (0..depth).filter(|l| !protected.contains(l)).collect();
    let mut flat: Vec<Vec<f64>> = vec![Vec::with_capacity(inputs.len()); depth];
    for chunk in inputs.chunks(SCORE_CHUNK) {
        let batch = stack(chunk)?;
        let (full, _) = model.forward(&batch, None, false)?;
        for &l in &scored {
            let (ablated, _) = model.forward(&batch, Some(&AblationMask::single(depth, l)), false)?;
            flat[l].extend(per_sample_sq(&full, &ablated));
        }
    }
    let table: Vec<Option<Vec<Vec<f64>>>> = (0..depth)
        .map(|l| (!protected.contains(&l)).then(|| flat[l].chunks(nt).map(<[f64]>::to_vec).collect()))
        .collect();
    let scores = table
        .iter()
        .map(|rows| rows.as_ref().map(|r| weighted_score(r, &weighting.omega)))
        .collect();
    let prompts: Vec<String> = probes.iter().map(|i| i.prompt.to_string()).collect();
    let timesteps = schedule.timesteps();
    Ok(ImportanceReport {
        scores,
        protected: protected.iter().copied().collect(),
        config: ReportConfig {
            fingerprint: fingerprint(seed, &prompts, weighting, pure_noise, timesteps),
            seed,
            prompts,
            weighting: weighting.clone(),
            pure_noise,
            timesteps,
        },
        table,
    })
}

/// `(keep, remove)` from raw scores: the `depth - target_keep` lowest-scoring
/// non-protected layers are removed, ties removing the higher index first.
pub fn select_from_scores(
    scores: &[Option<f64>],
    target_keep: usize,
    protected: &BTreeSet<usize>,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let depth = scores.len();
    if let Some(&l) = protected.iter().find(|&&l| l >= depth) {
        return Err(Error::config("prune.protected", format!("layers < {depth}"), l));
    }
    if target_keep > depth || target_keep < protected.len() {
        return Err(Error::config(
            "prune.target_keep",
            format!("between {} and {depth}", protected.len()),
            target_keep,
        ));
    }
    let mut candidates = Vec::new();
    for l in (0..depth).filter(|l| !protected.contains(l)) {
        let s = scores[l]
            .ok_or_else(|| Error::invalid(format!("layer {l} has no importance score but is not protected")))?;
        candidates.push((l, s));
    }
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
    let mut remove: Vec<usize> = candidates[..depth - target_keep].iter().map(|c| c.0).collect();
    remove.sort_unstable();
    let keep = (0..depth).filter(|l| remove.binary_search(l).is_err()).collect();
    Ok((keep, remove))
}

pub fn select_prune_set(
    report: &ImportanceReport,
    target_keep: usize,
    protected: &BTreeSet<usize>,
) -> Result<(Vec<usize>, Vec<usize>)> {
    select_from_scores(&report.scores, target_keep, protected)
}

/// Selection without weights: every layer scores equally, so the tie rule
/// alone decides.
pub fn plan_only(depth: usize, target_keep: usize, protected: &BTreeSet<usize>) -> Result<(Vec<usize>, Vec<usize>)> {
    let scores: Vec<Option<f64>> = (0..depth).map(|l| (!protected.contains(&l)).then_some(0.0)).collect();
    select_from_scores(&scores, target_keep, protected)
}

/// Ranks with ties given their average rank (1-based).
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side is constant or the
/// inputs are shorter than two.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    /// Scored layers, in index order.
    pub layers: Vec<usize>,
    pub scores: Vec<f64>,
    /// Validation loss increase when the layer is ablated.
    pub loss_increase: Vec<f64>,
    /// `None` when undefined (constant scores or increases).
    pub spearman: Option<f64>,
}

/// Single-layer ablation losses on `val` for the report's scored layers and
/// their rank correlation with the scores.
pub fn sensitivity_sanity(
    model: &Model,
    report: &ImportanceReport,
    val: &Dataset,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Sensitivity> {
    if report.depth() != model.depth() {
        return Err(Error::invalid(format!(
            "report covers {} layers, model has {}",
            report.depth(),
            model.depth()
        )));
    }
    let base = val_loss_masked(model, val, schedule, seed, None)?;
    let (mut layers, mut scores, mut increase) = (Vec::new(), Vec::new(), Vec::new());
    for (l, s) in report.scores.iter().enumerate() {
        let Some(s) = s else { continue };
        let mask = AblationMask::single(model.depth(), l);
        layers.push(l);
        scores.push(*s);
        increase.push(val_loss_masked(model, val, schedule, seed, Some(&mask))? - base);
    }
    Ok(Sensitivity {
        spearman: spearman(&scores, &increase),
        layers,
        scores,
        loss_increase: increase,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_rule_removes_highest_indices() {
        let protected = BTreeSet::from([0, 59]);
        let (keep, remove) = plan_only(60, 30, &protected).unwrap();
        assert_eq!(remove, (29..59).collect::<Vec<_>>());
        assert_eq!(keep.len(), 30);
        assert!(keep.contains(&0) && keep.contains(&59));
    }

    #[test]
    fn lowest_scores_are_removed() {
        let s = [None, Some(3.0), Some(1.0), Some(2.0), Some(1.0), None];
        let (keep, remove) = select_from_scores(&s, 3, &BTreeSet::from([0, 5])).unwrap();
        assert_eq!(remove, vec![2, 3, 4]);
        assert_eq!(keep, vec![0, 1, 5]);
    }

    #[test]
    fn infeasible_targets_are_rejected() {
        let p = BTreeSet::from([0, 3]);
        assert!(plan_only(4, 1, &p).is_err());
        assert!(plan_only(4, 5, &p).is_err());
        assert!(plan_only(4, 2, &BTreeSet::from([0, 4])).is_err());
    }

    #[test]
    fn spearman_handles_ties_and_constants() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0]), vec![1.5, 3.0, 1.5]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 30.0, 20.0]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[0.0, 0.0]), None);
    }

    #[test]
    fn default_weights_increase_with_t() {
        let w = TimestepWeighting::new(OmegaKind::Linear, &[10, 30, 50, 70, 90], 100).unwrap();
        assert!(w.omega.windows(2).all(|p| p[0] < p[1]));
        assert!(TimestepWeighting::new(OmegaKind::Linear, &[30, 10], 100).is_err());
        assert!(TimestepWeighting::custom(&[10], &[0.0], 100).is_err());
    }
}
