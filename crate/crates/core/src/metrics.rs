//! Ranking metrics and retrieval diagnostics.
//!
//! Queries are texts and the gallery is images. Every metric is a function
//! of a [`QueryRanking`]: the gallery sorted by descending score (ties to
//! the lower gallery index) together with identity-match flags.

use serde::{Deserialize, Serialize};

/// One text query against the full gallery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    /// Gallery indices, best first.
    pub order: Vec<usize>,
    /// `relevant[r]` is true when the item at rank `r` (0-based) shares the
    /// query identity.
    pub relevant: Vec<bool>,
    /// Query uncertainty.
    pub u: f64,
}

impl QueryRanking {
    /// Ranks `scores` (one per gallery item) for a query of identity `query`.
    pub fn new(scores: &[f64], gallery_ids: &[u32], query: u32, u: f64) -> Self {
        assert_eq!(scores.len(), gallery_ids.len(), "one score per gallery item");
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let relevant = order.iter().map(|&j| gallery_ids[j] == query).collect();
        Self { order, relevant, u }
    }

    pub fn num_relevant(&self) -> usize {
        self.relevant.iter().filter(|&&r| r).count()
    }

    /// 1-based rank of the first relevant item.
    pub fn first_hit(&self) -> Option<usize> {
        self.relevant.iter().position(|&r| r).map(|p| p + 1)
    }

    pub fn top1_correct(&self) -> bool {
        self.relevant.first().copied().unwrap_or(false)
    }

    pub fn average_precision(&self) -> Option<f64> {
        average_precision(&self.relevant)
    }
}

/// All queries of one evaluation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankingResult {
    pub queries: Vec<QueryRanking>,
}

impl RankingResult {
    /// Queries with no relevant gallery item; they are left out of Recall@K,
    /// mAP and the PR curve.
    pub fn excluded(&self) -> usize {
        self.queries.iter().filter(|q| q.num_relevant() == 0).count()
    }

    fn scored(&self) -> impl Iterator<Item = &QueryRanking> {
        self.queries.iter().filter(|q| q.num_relevant() > 0)
    }
}

/// Non-interpolated average precision: mean of precision@r over the ranks
/// `r` that hold a relevant item. `None` when nothing is relevant.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// 1 when a relevant item is within the top `k`.
pub fn hit_at_k(relevant: &[bool], k: usize) -> f64 {
    if relevant.iter().take(k).any(|&r| r) {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetric {
    pub value: f64,
    pub queries: usize,
    pub excluded: usize,
}

/// Mean Recall@K over queries with at least one relevant item.
pub fn recall_at_k(r: &RankingResult, k: usize) -> MeanMetric {
    assert!(k >= 1, "K must be at least 1");
    let vals: Vec<f64> = r.scored().map(|q| hit_at_k(&q.relevant, k)).collect();
    mean_metric(&vals, r.excluded())
}

pub fn mean_average_precision(r: &RankingResult) -> MeanMetric {
    let vals: Vec<f64> = r.scored().filter_map(|q| q.average_precision()).collect();
    mean_metric(&vals, r.excluded())
}

fn mean_metric(vals: &[f64], excluded: usize) -> MeanMetric {
    let value = if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    MeanMetric {
        value,
        queries: vals.len(),
        excluded,
    }
}

/// `k/100` for `k = 1..=99`, then `1.0`.
pub fn default_recall_grid() -> Vec<f64> {
    let mut g: Vec<f64> = (1..100).map(|k| k as f64 / 100.0).collect();
    g.push(1.0);
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    /// Trapezoid area over `(0, precision[0])` followed by the grid points.
    pub auc: f64,
    /// Query/level pairs where the level could not be reached.
    pub unreachable: usize,
}

/// Precision at the shortest prefix reaching each recall level.
///
/// Returns the per-level precisions and how many levels were unreachable
/// (those use the precision of the full gallery).
pub fn precision_at_recall(relevant: &[bool], grid: &[f64]) -> (Vec<f64>, usize) {
    let total = relevant.iter().filter(|&&r| r).count();
    let mut cum = Vec::with_capacity(relevant.len());
    let mut hits = 0usize;
    for &r in relevant {
        hits += usize::from(r);
        cum.push(hits);
    }
    let full = if relevant.is_empty() {
        0.0
    } else {
        total as f64 / relevant.len() as f64
    };
    let mut unreachable = 0;
    let out = grid
        .iter()
        .map(|&level| {
            // hits needed: smallest h with h/total >= level
            let need = ((level * total as f64) - 1e-9).ceil().max(0.0) as usize;
            match cum.iter().position(|&h| h >= need.max(1)) {
                Some(p) if total > 0 => cum[p] as f64 / (p + 1) as f64,
                _ => {
                    unreachable += 1;
                    full
                }
            }
        })
        .collect();
    (out, unreachable)
}

/// Trapezoid area under `(x, y)` with `(0, y[0])` prepended.
pub fn trapezoid_auc(x: &[f64], y: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let mut area = x[0] * y[0];
    for i in 1..x.len() {
        area += (x[i] - x[i - 1]) * (y[i] + y[i - 1]) / 2.0;
    }
    area
}

/// Macro-averaged PR curve over queries with at least one relevant item.
pub fn pr_curve(r: &RankingResult, grid: &[f64]) -> PrCurve {
    assert!(
        grid.windows(2).all(|w| w[0] < w[1]) && grid.iter().all(|&g| g > 0.0 && g <= 1.0),
        "recall grid must be strictly increasing within (0, 1]"
    );
    let mut sum = vec![0.0; grid.len()];
    let mut n = 0usize;
    let mut unreachable = 0;
    for q in r.scored() {
        let (p, u) = precision_at_recall(&q.relevant, grid);
        for (s, v) in sum.iter_mut().zip(p) {
            *s += v;
        }
        unreachable += u;
        n += 1;
    }
    let precision: Vec<f64> = sum.iter().map(|s| if n == 0 { 0.0 } else { s / n as f64 }).collect();
    let auc = trapezoid_auc(grid, &precision);
    PrCurve {
        recall: grid.to_vec(),
        precision,
        auc,
        unreachable,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCoverage {
    pub coverage: Vec<f64>,
    /// Top-1 error among the retained queries.
    pub risk: Vec<f64>,
    /// Retained query count per coverage level.
    pub retained: Vec<usize>,
}

impl RiskCoverage {
    /// Risk at the grid point nearest to `c`.
    pub fn risk_at(&self, c: f64) -> f64 {
        let k = self
            .coverage
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - c).abs().total_cmp(&(b.1 - c).abs()))
            .map(|(k, _)| k)
            .expect("non-empty grid");
        self.risk[k]
    }
}

/// Query indices sorted by ascending uncertainty, ties to the lower index.
pub fn order_by_uncertainty(u: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..u.len()).collect();
    idx.sort_by(|&a, &b| u[a].total_cmp(&u[b]).then(a.cmp(&b)));
    idx
}

/// Risk–coverage at `points` evenly spaced coverages `k/points`,
/// retaining the `⌈k·N/points⌉` lowest-uncertainty queries.
pub fn risk_coverage(u: &[f64], correct: &[bool], points: usize) -> RiskCoverage {
    assert_eq!(u.len(), correct.len());
    assert!(
        points >= 1 && !u.is_empty(),
        "need queries and at least one coverage point"
    );
    let order = order_by_uncertainty(u);
    let n = u.len();
    let mut errors_prefix = Vec::with_capacity(n + 1);
    errors_prefix.push(0usize);
    for &q in &order {
        errors_prefix.push(errors_prefix.last().unwrap() + usize::from(!correct[q]));
    }
    let mut out = RiskCoverage {
        coverage: Vec::with_capacity(points),
        risk: Vec::with_capacity(points),
        retained: Vec::with_capacity(points),
    };
    for k in 1..=points {
        let keep = (k * n).div_ceil(points);
        out.coverage.push(k as f64 / points as f64);
        out.risk.push(errors_prefix[keep] as f64 / keep as f64);
        out.retained.push(keep);
    }
    out
}

/// Risk–coverage for a ranking, using each query's `u` and top-1 flag.
pub fn ranking_risk_coverage(r: &RankingResult, points: usize) -> RiskCoverage {
    let u: Vec<f64> = r.queries.iter().map(|q| q.u).collect();
    let c: Vec<bool> = r.queries.iter().map(QueryRanking::top1_correct).collect();
    risk_coverage(&u, &c, points)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reliability {
    /// Mean `u` over correct top-1 queries; `None` when there are none.
    pub mean_u_correct: Option<f64>,
    pub mean_u_incorrect: Option<f64>,
    pub correct: usize,
    pub incorrect: usize,
}

pub fn reliability_stats(u: &[f64], correct: &[bool]) -> Reliability {
    assert_eq!(u.len(), correct.len());
    let mean = |want: bool| {
        let v: Vec<f64> = u
            .iter()
            .zip(correct)
            .filter(|(_, &c)| c == want)
            .map(|(&x, _)| x)
            .collect();
        let n = v.len();
        ((n > 0).then(|| v.iter().sum::<f64>() / n as f64), n)
    };
    let (mean_u_correct, n_c) = mean(true);
    let (mean_u_incorrect, n_i) = mean(false);
    Reliability {
        mean_u_correct,
        mean_u_incorrect,
        correct: n_c,
        incorrect: n_i,
    }
}

pub fn ranking_reliability(r: &RankingResult) -> Reliability {
    let u: Vec<f64> = r.queries.iter().map(|q| q.u).collect();
    let c: Vec<bool> = r.queries.iter().map(QueryRanking::top1_correct).collect();
    reliability_stats(&u, &c)
}

/// Cosines of one margin tuple: text query against its positive image, a
/// weak image of the same identity, and an image of another identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginTuple {
    pub positive: f64,
    pub weak: f64,
    pub negative: f64,
}

/// Fixed-width histogram over `[lo, hi]`; values at `hi` go in the last bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values {
            let b = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn bin_edges(&self) -> Vec<(f64, f64)> {
        let n = self.counts.len();
        let w = (self.hi - self.lo) / n as f64;
        (0..n)
            .map(|b| (self.lo + b as f64 * w, self.lo + (b + 1) as f64 * w))
            .collect()
    }
}

pub const MARGIN_BINS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginStats {
    /// `s(T, I⁺) − s(T, I⁻)` per tuple.
    pub positive: Vec<f64>,
    /// `s(T, I_w) − s(T, I⁻)` per tuple.
    pub weak: Vec<f64>,
    pub mean_positive: f64,
    pub mean_weak: f64,
    pub positive_hist: Histogram,
    pub weak_hist: Histogram,
}

pub fn margin_stats(tuples: &[MarginTuple]) -> MarginStats {
    let positive: Vec<f64> = tuples.iter().map(|t| t.positive - t.negative).collect();
    let weak: Vec<f64> = tuples.iter().map(|t| t.weak - t.negative).collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    MarginStats {
        mean_positive: mean(&positive),
        mean_weak: mean(&weak),
        positive_hist: Histogram::new(&positive, -2.0, 2.0, MARGIN_BINS),
        weak_hist: Histogram::new(&weak, -2.0, 2.0, MARGIN_BINS),
        positive,
        weak,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ranking(rel: &[bool]) -> QueryRanking {
        let n = rel.len();
        let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
        let ids: Vec<u32> = rel.iter().map(|&r| if r { 1 } else { 0 }).collect();
        QueryRanking::new(&scores, &ids, 1, 0.0)
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, false, false]), Some(1.0));
        assert_eq!(average_precision(&[false, true]), Some(0.5));
        assert!((average_precision(&[true, false, true]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn recall_examples() {
        assert_eq!(hit_at_k(&[true], 1), 1.0);
        assert_eq!(hit_at_k(&[false, false, false, true], 3), 0.0);
        let r = RankingResult {
            queries: vec![
                ranking(&[true, false, false, false, false]),
                ranking(&[false, true, false, false, false]),
                ranking(&[false, false, false, false, true]),
                ranking(&[false, false]),
            ],
        };
        let m = recall_at_k(&r, 2);
        assert!((m.value - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((m.queries, m.excluded), (3, 1));
    }

    #[test]
    fn ties_go_to_lower_index() {
        let q = QueryRanking::new(&[0.5, 0.9, 0.5, 0.9], &[0, 1, 2, 3], 2, 0.0);
        assert_eq!(q.order, [1, 3, 0, 2]);
        assert_eq!(q.first_hit(), Some(4));
    }

    #[test]
    fn pr_of_single_relevant_item_is_one() {
        let r = RankingResult {
            queries: vec![ranking(&[true])],
        };
        let c = pr_curve(&r, &default_recall_grid());
        assert!(c.precision.iter().all(|&p| p == 1.0));
        assert!((c.auc - 1.0).abs() < 1e-12);
        assert_eq!(c.recall.len(), 100);
    }

    #[test]
    fn pr_macro_average_by_hand() {
        // q1 [rel, non, rel]: recall 1/2 at prefix 1, 1 at prefix 3
        // q2 [non, rel]: recall 1 at prefix 2
        let r = RankingResult {
            queries: vec![ranking(&[true, false, true]), ranking(&[false, true])],
        };
        let c = pr_curve(&r, &[0.5, 1.0]);
        assert!((c.precision[0] - (1.0 + 0.5) / 2.0).abs() < 1e-15);
        assert!((c.precision[1] - (2.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15);
        let auc = 0.5 * 0.75 + 0.5 * (0.75 + c.precision[1]) / 2.0;
        assert!((c.auc - auc).abs() < 1e-12);
    }

    #[test]
    fn risk_coverage_examples() {
        // correct queries have u = 0, incorrect u = 1; half are correct
        let u = [1.0, 0.0, 1.0, 0.0];
        let c = [false, true, false, true];
        let rc = risk_coverage(&u, &c, 2);
        assert_eq!(rc.risk, [0.0, 0.5]);
        // hand enumeration on four queries, grid of four
        let u = [0.3, 0.1, 0.3, 0.2];
        let c = [true, false, false, true];
        let rc = risk_coverage(&u, &c, 4);
        // order by u then index: 1, 3, 0, 2
        assert_eq!(rc.retained, [1, 2, 3, 4]);
        assert_eq!(rc.risk, [1.0, 0.5, 1.0 / 3.0, 0.5]);
        assert_eq!(rc.risk_at(1.0), 0.5);
    }

    #[test]
    fn reliability_examples() {
        let r = reliability_stats(&[0.1, 0.8, 0.2], &[true, false, true]);
        assert!((r.mean_u_correct.unwrap() - 0.15).abs() < 1e-15);
        assert_eq!(r.mean_u_incorrect, Some(0.8));
        let r = reliability_stats(&[0.4, 0.4], &[true, true]);
        assert_eq!(r.mean_u_incorrect, None);
    }

    #[test]
    fn margin_examples() {
        let m = margin_stats(&[MarginTuple {
            positive: 0.3,
            weak: 0.3,
            negative: 0.3,
        }]);
        assert_eq!((m.mean_positive, m.mean_weak), (0.0, 0.0));
        let m = margin_stats(&[MarginTuple {
            positive: 0.9,
            weak: 0.5,
            negative: 0.1,
        }]);
        assert!((m.mean_positive - 0.8).abs() < 1e-15);
        assert_eq!(m.positive_hist.counts.iter().sum::<usize>(), 1);
        let top = Histogram::new(&[2.0, -2.0], -2.0, 2.0, 4);
        assert_eq!(top.counts, [1, 0, 0, 1]);
    }

    fn ap_oracle(rel: &[bool]) -> Option<f64> {
        // precision of every prefix ending in a relevant item, recomputed from scratch
        let ps: Vec<f64> = (0..rel.len())
            .filter(|&k| rel[k])
            .map(|k| rel[..=k].iter().filter(|&&r| r).count() as f64 / (k + 1) as f64)
            .collect();
        (!ps.is_empty()).then(|| ps.iter().sum::<f64>() / ps.len() as f64)
    }

    #[test]
    fn ap_matches_oracle_on_all_small_patterns() {
        for n in 1..=12usize {
            for mask in 0u32..(1 << n) {
                let rel: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
                assert_eq!(average_precision(&rel), ap_oracle(&rel));
                for k in 1..=n {
                    let want = if rel[..k].contains(&true) { 1.0 } else { 0.0 };
                    assert_eq!(hit_at_k(&rel, k), want);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn metrics_ignore_gallery_input_order(
            scores in prop::collection::vec(-1.0f64..1.0, 1..12),
            ids in prop::collection::vec(0u32..3, 12),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let n = scores.len();
            let ids = &ids[..n];
            let base = QueryRanking::new(&scores, ids, 1, 0.0);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let s2: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
            let i2: Vec<u32> = perm.iter().map(|&i| ids[i]).collect();
            let moved = QueryRanking::new(&s2, &i2, 1, 0.0);
            // distinct scores give identical relevance sequences
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).all(|w| w[0] != w[1]) {
                prop_assert_eq!(&base.relevant, &moved.relevant);
                prop_assert_eq!(base.average_precision(), moved.average_precision());
            }
        }

        #[test]
        fn full_coverage_risk_is_overall_error(
            u in prop::collection::vec(0.0f64..1.0, 1..40),
            flips in prop::collection::vec(any::<bool>(), 40),
        ) {
            let c = &flips[..u.len()];
            let rc = risk_coverage(&u, c, 20);
            let err = c.iter().filter(|&&x| !x).count() as f64 / c.len() as f64;
            prop_assert_eq!(*rc.risk.last().unwrap(), err);
            prop_assert!(rc.risk.iter().all(|r| (0.0..=1.0).contains(r)));
        }

        #[test]
        fn pr_curve_bounds(rels in prop::collection::vec(prop::collection::vec(any::<bool>(), 1..12), 1..6)) {
            let r = RankingResult { queries: rels.iter().map(|v| ranking(v)).collect() };
            let c = pr_curve(&r, &default_recall_grid());
            prop_assert!(c.precision.iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&c.auc));
            prop_assert_eq!(c.unreachable, 0);
        }
    }
}
