//! Text-to-image retrieval evaluation of a trained model on a test split,
//! plus CSV export of every metric and curve.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::DatasetManifest;
use crate::encoders::{EncoderError, Modality};
use crate::kernel::{dot, Tensor};
use crate::losses::UncertaintyMapping;
use crate::metrics::{
    default_recall_grid, margin_stats, mean_average_precision, pr_curve, ranking_reliability, ranking_risk_coverage,
    recall_at_k, MarginStats, MarginTuple, MeanMetric, PrCurve, QueryRanking, RankingResult, Reliability, RiskCoverage,
};
use crate::mining::sample_weak;
use crate::objective::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Seeds the weak-counterpart and negative draws.
    pub seed: u64,
    pub recall_ks: Vec<usize>,
    pub coverage_points: usize,
    /// Also report margins of the untrained model with the same seed.
    pub compare_init: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            recall_ks: vec![1, 5, 10],
            coverage_points: 20,
            compare_init: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("evaluation data unusable: {0}")]
    Data(String),
}

/// Unit embeddings of every record of a split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitEmbeddings {
    pub image: Tensor,
    pub text: Tensor,
    pub identities: Vec<u32>,
}

pub fn embed_split(params: &ModelParams, data: &DatasetManifest) -> Result<SplitEmbeddings, EvalError> {
    if data.records.is_empty() {
        return Err(EvalError::Data("no records".into()));
    }
    let img: Vec<&[f64]> = data.records.iter().map(|r| r.image_raw.as_slice()).collect();
    let txt: Vec<&[f64]> = data.records.iter().map(|r| r.text_raw.as_slice()).collect();
    let img = Tensor::from_rows(&img).map_err(|e| EvalError::Data(e.to_string()))?;
    let txt = Tensor::from_rows(&txt).map_err(|e| EvalError::Data(e.to_string()))?;
    let image = params.image.encode_batch(&img, Modality::Image)?;
    let text = params.text.encode_batch(&txt, Modality::Text)?;
    let degenerate = image.zero_rows.len() + text.zero_rows.len();
    if degenerate > 0 {
        return Err(EvalError::Data(format!("{degenerate} embedding row(s) have zero norm")));
    }
    Ok(SplitEmbeddings {
        image: image.embeddings,
        text: text.embeddings,
        identities: data.records.iter().map(|r| r.identity).collect(),
    })
}

/// For each record: the index of a weak counterpart and of a negative image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryDraws {
    pub weak: Vec<usize>,
    pub negative: Vec<usize>,
}

/// Deterministic in `seed`; independent of the model.
pub fn draw_queries(data: &DatasetManifest, seed: u64) -> Result<QueryDraws, EvalError> {
    let pool = data.by_identity();
    if pool.len() < 2 {
        return Err(EvalError::Data("margins need at least two identities".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.records.len();
    let mut weak = Vec::with_capacity(n);
    let mut negative = Vec::with_capacity(n);
    for q in 0..n {
        let sel = sample_weak(q, &data.records, &pool, &mut rng).map_err(|e| EvalError::Data(e.to_string()))?;
        weak.push(sel.weak);
        let id = data.records[q].identity;
        let neg = loop {
            let j = rng.random_range(0..n);
            if data.records[j].identity != id {
                break j;
            }
        };
        negative.push(neg);
    }
    Ok(QueryDraws { weak, negative })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub recall: Vec<(usize, MeanMetric)>,
    pub map: MeanMetric,
    pub pr: PrCurve,
    pub risk: RiskCoverage,
    pub reliability: Reliability,
    pub margins: MarginStats,
    pub init_margins: Option<MarginStats>,
    pub ranking: RankingResult,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, m)| m.value)
    }
}

fn margins(e: &SplitEmbeddings, draws: &QueryDraws) -> MarginStats {
    let tuples: Vec<MarginTuple> = (0..e.identities.len())
        .map(|q| {
            let t = e.text.row_slice(q);
            MarginTuple {
                positive: dot(t, e.image.row_slice(q)),
                weak: dot(t, e.image.row_slice(draws.weak[q])),
                negative: dot(t, e.image.row_slice(draws.negative[q])),
            }
        })
        .collect();
    margin_stats(&tuples)
}

/// Ranks every test text against every test image by cosine similarity.
/// Each query's uncertainty comes from its drawn weak counterpart.
pub fn rank(e: &SplitEmbeddings, draws: &QueryDraws, mapping: UncertaintyMapping) -> RankingResult {
    let n = e.identities.len();
    let queries = (0..n)
        .map(|q| {
            let t = e.text.row_slice(q);
            let scores: Vec<f64> = (0..n).map(|j| dot(t, e.image.row_slice(j))).collect();
            let w = draws.weak[q];
            let s_w = 0.5 * (dot(e.image.row_slice(q), e.image.row_slice(w)) + dot(t, e.text.row_slice(w)));
            QueryRanking::new(&scores, &e.identities, e.identities[q], mapping.apply(s_w))
        })
        .collect();
    RankingResult { queries }
}

/// Full metric battery for `params` on `data`. `init` supplies the
/// untrained parameters for the margin comparison.
pub fn evaluate(
    params: &ModelParams,
    init: Option<&ModelParams>,
    data: &DatasetManifest,
    mapping: UncertaintyMapping,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    let draws = draw_queries(data, cfg.seed)?;
    let emb = embed_split(params, data)?;
    let ranking = rank(&emb, &draws, mapping);
    let recall = cfg.recall_ks.iter().map(|&k| (k, recall_at_k(&ranking, k))).collect();
    let init_margins = match init {
        Some(p) => Some(margins(&embed_split(p, data)?, &draws)),
        None => None,
    };
    Ok(EvalReport {
        recall,
        map: mean_average_precision(&ranking),
        pr: pr_curve(&ranking, &default_recall_grid()),
        risk: ranking_risk_coverage(&ranking, cfg.coverage_points),
        reliability: ranking_reliability(&ranking),
        margins: margins(&emb, &draws),
        init_margins,
        ranking,
    })
}

/// Identities present in both splits.
pub fn identity_overlap(a: &DatasetManifest, b: &DatasetManifest) -> BTreeSet<u32> {
    a.identities().intersection(&b.identities()).copied().collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:e}"))
}

/// `metric,param,value` rows.
pub fn metrics_csv(r: &EvalReport) -> String {
    let mut out = String::from("metric,param,value\n");
    let mut row = |m: &str, p: &str, v: String| {
        writeln!(out, "{m},{p},{v}").expect("writing to a String");
    };
    for (k, m) in &r.recall {
        row("recall", &k.to_string(), format!("{:e}", m.value));
    }
    row("map", "", format!("{:e}", r.map.value));
    row("queries", "", r.map.queries.to_string());
    row("excluded_queries", "", r.map.excluded.to_string());
    row("pr_auc", "", format!("{:e}", r.pr.auc));
    row("pr_unreachable", "", r.pr.unreachable.to_string());
    for (c, v) in r.risk.coverage.iter().zip(&r.risk.risk) {
        row("risk", &format!("{c}"), format!("{v:e}"));
    }
    row("mean_u_correct", "", opt(r.reliability.mean_u_correct));
    row("mean_u_incorrect", "", opt(r.reliability.mean_u_incorrect));
    row("top1_correct", "", r.reliability.correct.to_string());
    row("top1_incorrect", "", r.reliability.incorrect.to_string());
    row(
        "mean_positive_margin",
        "trained",
        format!("{:e}", r.margins.mean_positive),
    );
    row("mean_weak_margin", "trained", format!("{:e}", r.margins.mean_weak));
    if let Some(m) = &r.init_margins {
        row("mean_positive_margin", "init", format!("{:e}", m.mean_positive));
        row("mean_weak_margin", "init", format!("{:e}", m.mean_weak));
    }
    out
}

pub fn pr_csv(r: &EvalReport) -> String {
    let mut out = String::from("recall,precision\n");
    for (x, y) in r.pr.recall.iter().zip(&r.pr.precision) {
        writeln!(out, "{x},{y:e}").expect("writing to a String");
    }
    out
}

pub fn risk_coverage_csv(r: &EvalReport) -> String {
    let mut out = String::from("coverage,risk\n");
    for (x, y) in r.risk.coverage.iter().zip(&r.risk.risk) {
        writeln!(out, "{x},{y:e}").expect("writing to a String");
    }
    out
}

/// Per-query uncertainty and top-1 outcome.
pub fn uncertainty_csv(r: &EvalReport) -> String {
    let mut out = String::from("query,u,top1_correct\n");
    for (i, q) in r.ranking.queries.iter().enumerate() {
        writeln!(out, "{i},{:e},{}", q.u, u8::from(q.top1_correct())).expect("writing to a String");
    }
    out
}

/// Margin histograms, trained and (when present) at initialization.
pub fn margin_hist_csv(r: &EvalReport) -> String {
    let mut out = String::from("bin_lo,bin_hi,positive,weak,init_positive,init_weak\n");
    let m = &r.margins;
    for (b, (lo, hi)) in m.positive_hist.bin_edges().into_iter().enumerate() {
        let (ip, iw) = match &r.init_margins {
            Some(i) => (i.positive_hist.counts[b].to_string(), i.weak_hist.counts[b].to_string()),
            None => (String::new(), String::new()),
        };
        writeln!(
            out,
            "{lo},{hi},{},{},{ip},{iw}",
            m.positive_hist.counts[b], m.weak_hist.counts[b]
        )
        .expect("writing to a String");
    }
    out
}
