//! Stylization objective: similarity losses on averaged view embeddings, a
//! Gaussian-weighted temporal triplet hinge, and a foreground sparsity term.
//!
//! Every loss comes with a `*_with_grad` variant returning the gradient with
//! respect to its inputs, which the trainer chains back into the atlas.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarity_with_grad, EmbeddingVector};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_local: f64,
    pub lambda_global: f64,
    /// Extra coefficient on the temporal term, on top of its Gaussian weight.
    pub lambda_temp_scale: f64,
    pub lambda_sparsity: f64,
    pub sigma_temporal: f64,
    pub mu_temporal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_local: 1.0,
            lambda_global: 1.0,
            lambda_temp_scale: 1.0,
            lambda_sparsity: 0.1,
            sigma_temporal: 5.0,
            mu_temporal: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda_local,
            self.lambda_global,
            self.lambda_temp_scale,
            self.lambda_sparsity,
        ];
        if lambdas.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if !(self.sigma_temporal.is_finite() && self.sigma_temporal > 0.0) || !self.mu_temporal.is_finite() {
            return Err(Error::Config("sigma_temporal must be positive".into()));
        }
        Ok(())
    }

    pub fn lambda(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Local => self.lambda_local,
            LossTerm::Global => self.lambda_global,
            LossTerm::Temporal => self.lambda_temp_scale,
            LossTerm::Sparsity => self.lambda_sparsity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Local,
    Global,
    Temporal,
    Sparsity,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::Local, LossTerm::Global, LossTerm::Temporal, LossTerm::Sparsity];

    pub fn name(&self) -> &'static str {
        match self {
            LossTerm::Local => "local",
            LossTerm::Global => "global",
            LossTerm::Temporal => "temporal",
            LossTerm::Sparsity => "sparsity",
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossTerm::ALL
            .into_iter()
            .find(|t| t.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown loss term {s:?} (expected local, global, temporal or sparsity)")))
    }
}

/// The set of disabled loss terms.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub disable: BTreeSet<LossTerm>,
}

impl Ablation {
    pub fn none() -> Self {
        Ablation::default()
    }

    pub fn disabling(terms: &[LossTerm]) -> Self {
        Ablation {
            disable: terms.iter().copied().collect(),
        }
    }

    /// Parses a comma-separated list such as `"local,temporal"`.
    pub fn parse_list(list: &str) -> Result<Self> {
        let disable = list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(LossTerm::from_str)
            .collect::<Result<BTreeSet<_>>>()?;
        Ok(Ablation { disable })
    }

    pub fn is_enabled(&self, term: LossTerm) -> bool {
        !self.disable.contains(&term)
    }
}

/// Unweighted loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub local: f64,
    pub global: f64,
    pub temporal: f64,
    pub sparsity: f64,
}

impl LossTerms {
    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Local => self.local,
            LossTerm::Global => self.global,
            LossTerm::Temporal => self.temporal,
            LossTerm::Sparsity => self.sparsity,
        }
    }

    fn set(&mut self, term: LossTerm, v: f64) {
        match term {
            LossTerm::Local => self.local = v,
            LossTerm::Global => self.global = v,
            LossTerm::Temporal => self.temporal = v,
            LossTerm::Sparsity => self.sparsity = v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub local: f64,
    pub global: f64,
    pub temporal: f64,
    pub sparsity: f64,
    pub total: f64,
    pub disabled: Vec<LossTerm>,
}

impl LossRecord {
    pub fn terms(&self) -> LossTerms {
        LossTerms {
            local: self.local,
            global: self.global,
            temporal: self.temporal,
            sparsity: self.sparsity,
        }
    }
}

/// `1 - cos(image, text)` and its gradient with respect to `image`.
pub fn similarity_loss_with_grad(image: &EmbeddingVector, text: &EmbeddingVector) -> Result<(f64, Vec<f64>)> {
    let (sim, ga, _) = cosine_similarity_with_grad(image, text)?;
    Ok((1.0 - sim, ga.into_iter().map(|g| -g).collect()))
}

pub fn local_loss(local_emb: &EmbeddingVector, local_text_emb: &EmbeddingVector) -> Result<f64> {
    Ok(similarity_loss_with_grad(local_emb, local_text_emb)?.0)
}

pub fn global_loss(global_emb: &EmbeddingVector, global_text_emb: &EmbeddingVector) -> Result<f64> {
    Ok(similarity_loss_with_grad(global_emb, global_text_emb)?.0)
}

pub fn gaussian_density(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * PI).sqrt())
}

/// Gaussian weight of a triplet whose outer frames are `t1 < t3`.
pub fn temporal_weight(t1: usize, t3: usize, weights: &LossWeights) -> Result<f64> {
    if t3 <= t1 {
        return Err(Error::invalid(format!("temporal weight needs t1 < t3, got {t1} and {t3}")));
    }
    Ok(gaussian_density((t3 - t1) as f64, weights.mu_temporal, weights.sigma_temporal))
}

/// Triplet hinge `g(t3 - t1) * max(0, sim(e1, e3) - sim(e1, e2))` and its
/// gradients with respect to `e1`, `e2`, `e3`.
pub fn temporal_loss_with_grad(
    embs: [&EmbeddingVector; 3],
    times: [usize; 3],
    weights: &LossWeights,
) -> Result<(f64, [Vec<f64>; 3])> {
    let [t1, t2, t3] = times;
    if !(t1 < t2 && t2 < t3) {
        return Err(Error::invalid(format!("temporal loss needs t1 < t2 < t3, got {times:?}")));
    }
    let g = temporal_weight(t1, t3, weights)?;
    let (sim13, g1_13, g3_13) = cosine_similarity_with_grad(embs[0], embs[2])?;
    let (sim12, g1_12, g2_12) = cosine_similarity_with_grad(embs[0], embs[1])?;
    let dim = embs[0].len();
    let hinge = sim13 - sim12;
    if hinge <= 0.0 {
        return Ok((0.0, [vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]]));
    }
    let d1 = g1_13.iter().zip(&g1_12).map(|(a, b)| g * (a - b)).collect();
    let d2 = g2_12.iter().map(|b| -g * b).collect();
    let d3 = g3_13.iter().map(|a| g * a).collect();
    Ok((g * hinge, [d1, d2, d3]))
}

pub fn temporal_loss(
    e1: &EmbeddingVector,
    e2: &EmbeddingVector,
    e3: &EmbeddingVector,
    t1: usize,
    t2: usize,
    t3: usize,
    weights: &LossWeights,
) -> Result<f64> {
    Ok(temporal_loss_with_grad([e1, e2, e3], [t1, t2, t3], weights)?.0)
}

/// Mean of `|(1 - alpha) * c_f|` over pixels and channels, with gradients
/// with respect to `alpha` (`N`) and `fg_colors` (`N x C`).
pub fn sparsity_loss_with_grad(
    alpha: ArrayView1<f64>,
    fg_colors: ArrayView2<f64>,
) -> Result<(f64, Array1<f64>, Array2<f64>)> {
    let (n, c) = fg_colors.dim();
    if alpha.len() != n {
        return Err(Error::invalid(format!("{} opacities for {n} colors", alpha.len())));
    }
    if n == 0 || c == 0 {
        return Err(Error::invalid("sparsity loss of an empty set"));
    }
    let scale = 1.0 / (n * c) as f64;
    let mut loss = 0.0;
    let mut d_alpha = Array1::<f64>::zeros(n);
    let mut d_fg = Array2::<f64>::zeros((n, c));
    for i in 0..n {
        let keep = 1.0 - alpha[i];
        for ch in 0..c {
            let v = keep * fg_colors[[i, ch]];
            loss += v.abs();
            let s = if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            };
            d_fg[[i, ch]] = scale * s * keep;
            d_alpha[i] -= scale * s * fg_colors[[i, ch]];
        }
    }
    Ok((loss * scale, d_alpha, d_fg))
}

pub fn sparsity_loss(alpha: ArrayView1<f64>, fg_colors: ArrayView2<f64>) -> Result<f64> {
    Ok(sparsity_loss_with_grad(alpha, fg_colors)?.0)
}

/// Weighted sum of the enabled terms; disabled terms are recorded as zero.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights, ablation: &Ablation, iteration: usize) -> LossRecord {
    let mut kept = *terms;
    let mut total = 0.0;
    for term in LossTerm::ALL {
        if ablation.is_enabled(term) {
            total += weights.lambda(term) * terms.get(term);
        } else {
            kept.set(term, 0.0);
        }
    }
    LossRecord {
        iteration,
        local: kept.local,
        global: kept.global,
        temporal: kept.temporal,
        sparsity: kept.sparsity,
        total,
        disabled: ablation.disable.iter().copied().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn similarity_loss_landmarks() {
        let a = v(&[1.0, 0.0, 0.0]);
        assert!(local_loss(&a, &a).unwrap().abs() < 1e-12);
        assert!((local_loss(&a, &v(&[0.0, 2.0, 0.0])).unwrap() - 1.0).abs() < 1e-12);
        assert!((global_loss(&a, &v(&[-3.0, 0.0, 0.0])).unwrap() - 2.0).abs() < 1e-12);
        assert!(local_loss(&a, &v(&[0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn temporal_weight_values() {
        let w = LossWeights::default();
        assert!((gaussian_density(0.0, 0.0, 5.0) - 0.0797884560802865).abs() < 1e-12);
        assert!((temporal_weight(3, 8, &w).unwrap() - 0.0483941449038287).abs() < 1e-9);
        assert!(temporal_weight(0, 2, &w).unwrap() > temporal_weight(0, 10, &w).unwrap());
        assert!(temporal_weight(4, 4, &w).is_err());
        assert!(temporal_weight(26, 0, &w).is_err());
        let g26 = temporal_weight(0, 26, &w).unwrap();
        assert!((g26 - 1.1e-7).abs() < 0.05e-7, "{g26}");
    }

    #[test]
    fn temporal_hinge() {
        let w = LossWeights::default();
        let e1 = v(&[1.0, 0.0]);
        // sim(e1, e3) = 0.9, sim(e1, e2) = 0.7
        let e3 = v(&[0.9, (1.0f64 - 0.81).sqrt()]);
        let e2 = v(&[0.7, (1.0f64 - 0.49).sqrt()]);
        let l = temporal_loss(&e1, &e2, &e3, 0, 1, 2, &w).unwrap();
        let expected = 0.0797884560802865 * (-0.08f64).exp() * 0.2;
        assert!((l - expected).abs() < 1e-9);
        assert!((l - 0.0147307).abs() < 1e-6);
        assert_eq!(temporal_loss(&e1, &e3, &e2, 0, 1, 2, &w).unwrap(), 0.0);
        assert_eq!(temporal_loss(&e1, &e1, &e3, 0, 1, 2, &w).unwrap(), 0.0);
        assert!(temporal_loss(&e1, &e2, &e3, 2, 1, 3, &w).is_err());
    }

    #[test]
    fn sparsity_landmarks() {
        let ones = Array2::<f64>::ones((5, 3));
        assert_eq!(sparsity_loss(Array1::ones(5).view(), ones.view()).unwrap(), 0.0);
        assert_eq!(sparsity_loss(Array1::zeros(5).view(), Array2::zeros((5, 3)).view()).unwrap(), 0.0);
        assert_eq!(sparsity_loss(Array1::zeros(5).view(), ones.view()).unwrap(), 1.0);
        assert!(sparsity_loss(Array1::zeros(4).view(), ones.view()).is_err());
    }

    #[test]
    fn totals_and_ablation() {
        let terms = LossTerms {
            local: 0.3,
            global: 0.4,
            temporal: 0.05,
            sparsity: 0.02,
        };
        let ones = LossWeights {
            lambda_sparsity: 1.0,
            ..LossWeights::default()
        };
        assert!((total_loss(&terms, &ones, &Ablation::none(), 0).total - 0.77).abs() < 1e-12);
        let all = Ablation::disabling(&LossTerm::ALL);
        let r = total_loss(&terms, &ones, &all, 0);
        assert_eq!(r.total, 0.0);
        assert_eq!((r.local, r.global, r.temporal, r.sparsity), (0.0, 0.0, 0.0, 0.0));
        let doubled = LossWeights {
            lambda_global: 2.0,
            ..ones
        };
        let delta = total_loss(&terms, &doubled, &Ablation::none(), 0).total - total_loss(&terms, &ones, &Ablation::none(), 0).total;
        assert!((delta - 0.4).abs() < 1e-12);
        assert_eq!(
            Ablation::parse_list("temporal, local").unwrap().disable,
            [LossTerm::Local, LossTerm::Temporal].into_iter().collect()
        );
        assert!(Ablation::parse_list("color").is_err());
    }
}
