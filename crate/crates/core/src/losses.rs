//! Training objectives.
//!
//! * ITC: temperature-scaled softmax over in-batch cosine similarities, in
//!   both retrieval directions, with the diagonal as positives.
//! * Consistency and uncertainty: `s_w` averages the image–image and
//!   text–text cosines between an anchor and its weak counterpart; `u_w` is a
//!   decreasing map of `s_w`.
//! * UITC: `L/(γ·u_w) + γ·u_w` on the weak-pair ITC term, with `u_w`
//!   detached and `γ = exp(log_gamma)`.
//! * ITM / GITM: binary cross-entropy on the fusion head's match
//!   probability over constructed pairs.
//!
//! Every builder here appends nodes to a [`Graph`] so the same code path is
//! used for values, training gradients and gradient checks.

use serde::{Deserialize, Serialize};

use crate::kernel::{Graph, KernelError, NodeId, Tensor};

/// Match probabilities are clamped into `[P_CLAMP, 1 − P_CLAMP]` before logs.
pub const P_CLAMP: f64 = 1e-12;

/// Map from consistency score to uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyMapping {
    /// `exp(−s)`
    #[default]
    Exponential,
    /// `1.5 − s`
    Linear,
    /// `(1.5 − s)²`
    Power,
}

impl UncertaintyMapping {
    pub const ALL: [UncertaintyMapping; 3] = [
        UncertaintyMapping::Exponential,
        UncertaintyMapping::Linear,
        UncertaintyMapping::Power,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UncertaintyMapping::Exponential => "exponential",
            UncertaintyMapping::Linear => "linear",
            UncertaintyMapping::Power => "power",
        }
    }

    pub fn apply(self, s: f64) -> f64 {
        match self {
            UncertaintyMapping::Exponential => (-s).exp(),
            UncertaintyMapping::Linear => 1.5 - s,
            UncertaintyMapping::Power => (1.5 - s) * (1.5 - s),
        }
    }

    /// Range of `u_w` for `s_w ∈ [−1, 1]`.
    pub fn bounds(self) -> (f64, f64) {
        (self.apply(1.0), self.apply(-1.0))
    }

    fn node(self, g: &mut Graph, s: NodeId) -> Result<NodeId, KernelError> {
        match self {
            UncertaintyMapping::Exponential => {
                let neg = g.scale_shift(s, -1.0, 0.0)?;
                g.exp(neg)
            }
            UncertaintyMapping::Linear => g.scale_shift(s, -1.0, 1.5),
            UncertaintyMapping::Power => {
                let d = g.scale_shift(s, -1.0, 1.5)?;
                g.mul(d, d)
            }
        }
    }
}

impl std::str::FromStr for UncertaintyMapping {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mapping '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyScore {
    pub s_w: f64,
    pub u_w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.1 }
    }
}

/// Per-step loss values. Terms that the active objective does not use are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub itc: f64,
    pub uitc: f64,
    pub itm: f64,
    pub gitm_txt: f64,
    pub gitm_img: f64,
    pub total: f64,
    pub mean_s_w: f64,
    pub mean_u_w: f64,
}

impl LossReport {
    pub fn recompute_total(&self, w: &LossWeights) -> f64 {
        total_loss_value(self.itc, self.itm, self.uitc, self.gitm_txt, self.gitm_img, w)
    }
}

fn inverse_temperature(g: &mut Graph, log_tau: NodeId) -> Result<NodeId, KernelError> {
    let neg = g.scale_shift(log_tau, -1.0, 0.0)?;
    g.exp(neg)
}

/// `softmax_rows(cos(A, B) / τ)` with `τ = exp(log_tau)`; row `i` scores
/// every row of `B` against row `i` of `A`.
pub fn matching_scores(g: &mut Graph, a: NodeId, b: NodeId, log_tau: NodeId) -> Result<NodeId, KernelError> {
    if g.value(a).rows() == 0 {
        return Err(KernelError::Empty { op: "matching_scores" });
    }
    let cos = g.cosine_matrix(a, b)?;
    let inv = inverse_temperature(g, log_tau)?;
    let logits = g.mul_scalar(cos, inv)?;
    g.softmax_rows(logits)
}

/// Per-anchor contrastive terms `−(log S(I_i, T_i) + log S(T_i, I_i))` as an
/// `n×1` column.
pub fn itc_terms(g: &mut Graph, f_i: NodeId, f_t: NodeId, log_tau: NodeId) -> Result<NodeId, KernelError> {
    if g.value(f_i).rows() != g.value(f_t).rows() {
        return Err(KernelError::Shape {
            op: "itc",
            left: g.value(f_i).shape().to_vec(),
            right: g.value(f_t).shape().to_vec(),
        });
    }
    let s_it = matching_scores(g, f_i, f_t, log_tau)?;
    let s_ti = matching_scores(g, f_t, f_i, log_tau)?;
    let d_it = g.diag(s_it)?;
    let d_ti = g.diag(s_ti)?;
    let l_it = g.log(d_it)?;
    let l_ti = g.log(d_ti)?;
    let both = g.add(l_it, l_ti)?;
    g.scale_shift(both, -1.0, 0.0)
}

/// Batch-mean contrastive loss.
pub fn itc_loss(g: &mut Graph, f_i: NodeId, f_t: NodeId, log_tau: NodeId) -> Result<NodeId, KernelError> {
    let terms = itc_terms(g, f_i, f_t, log_tau)?;
    g.mean(terms)
}

/// Consistency `s_w` and uncertainty `u_w` per anchor, as `n×1` columns.
/// Inputs must have unit rows.
pub fn consistency_nodes(
    g: &mut Graph,
    f_i: NodeId,
    f_t: NodeId,
    f_iw: NodeId,
    f_tw: NodeId,
    mapping: UncertaintyMapping,
) -> Result<(NodeId, NodeId), KernelError> {
    let ii = g.mul(f_i, f_iw)?;
    let cos_i = g.row_sum(ii)?;
    let tt = g.mul(f_t, f_tw)?;
    let cos_t = g.row_sum(tt)?;
    let sum = g.add(cos_i, cos_t)?;
    let s = g.scale_shift(sum, 0.5, 0.0)?;
    let u = mapping.node(g, s)?;
    Ok((s, u))
}

/// Consistency and uncertainty of a single anchor/weak quadruple.
pub fn consistency_uncertainty(
    f_i: &[f64],
    f_t: &[f64],
    f_iw: &[f64],
    f_tw: &[f64],
    mapping: UncertaintyMapping,
) -> Result<UncertaintyScore, KernelError> {
    let mut g = Graph::new();
    let mut row = |v: &[f64]| Tensor::row(v.to_vec()).map(|t| g.constant(t));
    let (a, b, c, d) = (row(f_i)?, row(f_t)?, row(f_iw)?, row(f_tw)?);
    let (s, u) = consistency_nodes(&mut g, a, b, c, d, mapping)?;
    Ok(UncertaintyScore {
        s_w: g.value(s).item(),
        u_w: g.value(u).item(),
    })
}

/// Mean over anchors of `L_i/(γ·u_i) + γ·u_i`.
///
/// `u` is detached here, so no gradient reaches whatever produced it; only
/// `itc_weak` and `log_gamma` receive gradients.
pub fn uitc_loss(g: &mut Graph, itc_weak: NodeId, u: NodeId, log_gamma: NodeId) -> Result<NodeId, KernelError> {
    if g.value(u).data().iter().any(|&x| x <= 0.0) {
        return Err(KernelError::NonFinite { op: "uitc (u_w <= 0)" });
    }
    let u = g.detach(u)?;
    let log_u = g.log(u)?;
    let neg_log_u = g.scale_shift(log_u, -1.0, 0.0)?;
    let inv_u = g.exp(neg_log_u)?;
    let gamma = g.exp(log_gamma)?;
    let neg_lg = g.scale_shift(log_gamma, -1.0, 0.0)?;
    let inv_gamma = g.exp(neg_lg)?;

    let weighted = g.mul(itc_weak, inv_u)?;
    let weighted = g.mul_scalar(weighted, inv_gamma)?;
    let reg = g.mul_scalar(u, gamma)?;
    let terms = g.add(weighted, reg)?;
    g.mean(terms)
}

/// Scalar form: `itc_weak/(γ·u_w) + γ·u_w`.
pub fn uitc_value(itc_weak: f64, u_w: f64, gamma: f64) -> Result<f64, KernelError> {
    let mut g = Graph::new();
    let l = g.constant(Tensor::scalar(itc_weak));
    let u = g.constant(Tensor::scalar(u_w));
    let lg = g.constant(Tensor::scalar(gamma.ln()));
    let out = uitc_loss(&mut g, l, u, lg)?;
    Ok(g.value(out).item())
}

/// Negated binary log-likelihood per pair, `m×1`. Probabilities are clamped
/// into `[P_CLAMP, 1 − P_CLAMP]`; the graph counts how often that fires.
pub fn itm_terms(g: &mut Graph, p_hat: NodeId, labels: &[f64]) -> Result<NodeId, KernelError> {
    let m = g.value(p_hat).rows();
    if labels.len() != m || g.value(p_hat).cols() != 1 {
        return Err(KernelError::Shape {
            op: "itm",
            left: g.value(p_hat).shape().to_vec(),
            right: vec![labels.len(), 1],
        });
    }
    let p = g.clamp(p_hat, P_CLAMP, 1.0 - P_CLAMP)?;
    let log_p = g.log(p)?;
    let q = g.scale_shift(p, -1.0, 1.0)?;
    let log_q = g.log(q)?;
    let y = g.constant(Tensor::raw(m, 1, labels.to_vec()));
    let not_y = g.constant(Tensor::raw(m, 1, labels.iter().map(|l| 1.0 - l).collect()));
    let pos = g.mul(y, log_p)?;
    let neg = g.mul(not_y, log_q)?;
    let ll = g.add(pos, neg)?;
    g.scale_shift(ll, -1.0, 0.0)
}

/// Single-pair matching term and whether the clamp fired.
pub fn itm_term(p_hat: f64, p: f64) -> Result<(f64, bool), KernelError> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(p_hat));
    let t = itm_terms(&mut g, x, &[p])?;
    Ok((g.value(t).item(), g.clamp_hits() > 0))
}

/// Mean matching loss over all constructed pairs.
pub fn itm_loss(g: &mut Graph, p_hat: NodeId, labels: &[f64]) -> Result<NodeId, KernelError> {
    let t = itm_terms(g, p_hat, labels)?;
    g.mean(t)
}

/// Graph nodes for each component of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub itc: NodeId,
    pub itm: NodeId,
    pub uitc: Option<NodeId>,
    pub gitm: Option<(NodeId, NodeId)>,
}

/// `itc + itm + α·uitc + β·(gitm_txt + gitm_img)`; absent terms count as 0.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, w: &LossWeights) -> Result<NodeId, KernelError> {
    let mut total = g.add(terms.itc, terms.itm)?;
    if let Some(u) = terms.uitc {
        let scaled = g.scale_shift(u, w.alpha, 0.0)?;
        total = g.add(total, scaled)?;
    }
    if let Some((t, i)) = terms.gitm {
        let both = g.add(t, i)?;
        let scaled = g.scale_shift(both, w.beta, 0.0)?;
        total = g.add(total, scaled)?;
    }
    Ok(total)
}

pub fn total_loss_value(itc: f64, itm: f64, uitc: f64, gitm_txt: f64, gitm_img: f64, w: &LossWeights) -> f64 {
    itc + itm + w.alpha * uitc + w.beta * (gitm_txt + gitm_img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{l2_normalize, softmax_rows};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{E, LN_2};

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        let t = Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        l2_normalize(&t).tensor
    }

    fn itc_value(a: &Tensor, b: &Tensor, tau: f64) -> f64 {
        let mut g = Graph::new();
        let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
        let lt = g.constant(Tensor::scalar(tau.ln()));
        let l = itc_loss(&mut g, x, y, lt).unwrap();
        g.value(l).item()
    }

    #[test]
    fn single_element_scores() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(vec![1.0, 0.0]).unwrap());
        let lt = g.constant(Tensor::scalar(0.07f64.ln()));
        let s = matching_scores(&mut g, a, a, lt).unwrap();
        assert_eq!(g.value(s).data(), &[1.0]);
    }

    #[test]
    fn identical_embeddings_give_half() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![0.6, 0.8, 0.6, 0.8]).unwrap());
        let lt = g.constant(Tensor::scalar(0.3f64.ln()));
        let s = matching_scores(&mut g, a, a, lt).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn empty_batch_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(0, 2));
        let lt = g.constant(Tensor::scalar(0.0));
        assert!(matching_scores(&mut g, a, a, lt).is_err());
    }

    #[test]
    fn scores_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b) = (unit_rows(&mut rng, 3, 4), unit_rows(&mut rng, 3, 4));
        let mut g = Graph::new();
        let (x, y) = (g.constant(a), g.constant(b));
        let lt = g.constant(Tensor::scalar(0.07f64.ln()));
        let s = matching_scores(&mut g, x, y, lt).unwrap();
        for i in 0..3 {
            let sum: f64 = g.value(s).row_slice(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn itc_closed_forms() {
        let one = Tensor::row(vec![1.0, 0.0]).unwrap();
        assert_eq!(itc_value(&one, &one, 0.07), 0.0);

        let same = Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((itc_value(&same, &same, 0.5) - 2.0 * LN_2).abs() < 1e-9);

        // diagonal cosine 1, off-diagonal -1
        let a = Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        assert!(itc_value(&a, &a, 0.1) < 1e-8);
    }

    #[test]
    fn temperature_preserves_row_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let (a, b) = (unit_rows(&mut rng, 4, 3), unit_rows(&mut rng, 4, 3));
            let tau: f64 = rng.random_range(0.01..5.0);
            let cos = crate::kernel::cosine_matrix(&a, &b).unwrap();
            let mut g = Graph::new();
            let (x, y) = (g.constant(a), g.constant(b));
            let lt = g.constant(Tensor::scalar(tau.ln()));
            let s = matching_scores(&mut g, x, y, lt).unwrap();
            let argmax = |row: &[f64]| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                    )
                    .0
            };
            for i in 0..4 {
                assert_eq!(argmax(g.value(s).row_slice(i)), argmax(cos.row_slice(i)));
            }
        }
    }

    #[test]
    fn consistency_examples() {
        let fi = [0.6, 0.8, 0.0];
        let ft = [0.0, 0.6, 0.8];
        let u = consistency_uncertainty(&fi, &ft, &fi, &ft, UncertaintyMapping::Exponential).unwrap();
        assert!((u.s_w - 1.0).abs() < 1e-15);
        assert!((u.u_w - E.recip()).abs() < 1e-12);

        let fiw = [0.8, -0.6, 0.0];
        let ftw = [1.0, 0.0, 0.0];
        let u = consistency_uncertainty(&fi, &ft, &fiw, &ftw, UncertaintyMapping::Exponential).unwrap();
        assert!(u.s_w.abs() < 1e-15);
        assert!((u.u_w - 1.0).abs() < 1e-15);

        assert_eq!(UncertaintyMapping::Linear.apply(1.0), 0.5);
        assert_eq!(UncertaintyMapping::Power.apply(1.0), 0.25);
        let lin = consistency_uncertainty(&fi, &ft, &fi, &ft, UncertaintyMapping::Linear).unwrap();
        assert!((lin.u_w - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mapping_bounds() {
        let (lo, hi) = UncertaintyMapping::Exponential.bounds();
        assert_eq!((lo, hi), (E.recip(), E));
        assert_eq!(UncertaintyMapping::Linear.bounds(), (0.5, 2.5));
        assert_eq!(UncertaintyMapping::Power.bounds(), (0.25, 6.25));
        assert_eq!(
            "power".parse::<UncertaintyMapping>().unwrap(),
            UncertaintyMapping::Power
        );
    }

    #[test]
    fn uitc_arithmetic() {
        assert_eq!(uitc_value(1.0, 1.0, 1.0).unwrap(), 2.0);
        assert_eq!(uitc_value(2.0, 2.0, 1.0).unwrap(), 3.0);
        assert!(uitc_value(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn uitc_minimum_over_scale() {
        // grid search over the product γ·u_w ∈ (0, 10]
        for l in [0.3, 1.0, 2.5, 7.0] {
            let (mut best, mut arg) = (f64::INFINITY, 0.0);
            for k in 1..=100_000 {
                let c = k as f64 * 1e-4;
                let v = uitc_value(l, c, 1.0).unwrap();
                if v < best {
                    best = v;
                    arg = c;
                }
            }
            let root: f64 = f64::sqrt(l);
            assert!((best - 2.0 * root).abs() < 1e-6, "L={l}: {best}");
            assert!((arg - root).abs() < 2e-4, "L={l}: {arg}");
        }
    }

    #[test]
    fn uitc_monotone_in_loss() {
        let mut prev = uitc_value(0.0, 0.8, 1.3).unwrap();
        for k in 1..50 {
            let v = uitc_value(k as f64 * 0.1, 0.8, 1.3).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn itm_term_values() {
        assert!((itm_term(0.5, 1.0).unwrap().0 - LN_2).abs() < 1e-12);
        assert!((itm_term(0.5, 0.0).unwrap().0 - LN_2).abs() < 1e-12);
        let (v, clamped) = itm_term(1.0, 1.0).unwrap();
        assert!(clamped);
        assert!(v < 1e-11);
        let (v, clamped) = itm_term(0.0, 1.0).unwrap();
        assert!(clamped && v.is_finite());
    }

    #[test]
    fn itm_loss_means_terms() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::column(vec![0.9, 0.1, 0.1]).unwrap());
        let l = itm_loss(&mut g, p, &[1.0, 0.0, 0.0]).unwrap();
        let expected = (1.0f64 / 0.9).ln();
        assert!((g.value(l).item() - expected).abs() < 1e-12);

        let mut g = Graph::new();
        let p = g.constant(Tensor::column(vec![0.5; 3]).unwrap());
        let l = itm_loss(&mut g, p, &[1.0, 0.0, 0.0]).unwrap();
        assert!((g.value(l).item() - LN_2).abs() < 1e-12);
    }

    #[test]
    fn total_matches_arithmetic() {
        let w = LossWeights::default();
        assert!((total_loss_value(1.0, 1.0, 1.0, 1.0, 1.0, &w) - 2.7).abs() < 1e-15);
        let zero = LossWeights { alpha: 0.0, beta: 0.0 };
        assert_eq!(total_loss_value(0.3, 0.4, 9.0, 9.0, 9.0, &zero), 0.3 + 0.4);

        let mut g = Graph::new();
        let c = |g: &mut Graph, v| g.constant(Tensor::scalar(v));
        let terms = LossTerms {
            itc: c(&mut g, 0.7),
            itm: c(&mut g, 0.2),
            uitc: Some(c(&mut g, 1.9)),
            gitm: Some((c(&mut g, 0.6), c(&mut g, 0.65))),
        };
        let t = total_loss(&mut g, &terms, &w).unwrap();
        let report = LossReport {
            itc: 0.7,
            itm: 0.2,
            uitc: 1.9,
            gitm_txt: 0.6,
            gitm_img: 0.65,
            total: g.value(t).item(),
            ..LossReport::default()
        };
        assert!((report.total - report.recompute_total(&w)).abs() < 1e-9);
    }

    #[test]
    fn softmax_reference_matches_graph() {
        let m = Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(m.clone());
        let s = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(s), &softmax_rows(&m).unwrap());
    }
}
