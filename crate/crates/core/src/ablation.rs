//! Ablation grids: the same data and seeds trained under several objective
//! settings, one metrics row per (cell, seed) plus per-cell medians.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::DatasetManifest;
use crate::evaluate::{evaluate, EvalConfig};
use crate::losses::UncertaintyMapping;
use crate::mining::MiningMode;
use crate::objective::{AblationMode, ModelParams};
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    /// baseline, +uitc, +uitc+gitm (neg3v4), +uitc+gitm (neg3v6)
    #[default]
    Objective,
    /// Full method under each uncertainty mapping.
    Mapping,
    /// Both of the above.
    All,
}

/// One objective setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: String,
    pub mode: AblationMode,
    pub mining: MiningMode,
    pub mapping: UncertaintyMapping,
}

impl Cell {
    fn new(id: &str, mode: AblationMode, mining: MiningMode, mapping: UncertaintyMapping) -> Self {
        Self {
            id: id.to_string(),
            mode,
            mining,
            mapping,
        }
    }

    /// `base` with this cell's objective switches applied.
    pub fn apply(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            ablation_mode: self.mode,
            mining: self.mining,
            negatives_k: None,
            mapping: self.mapping,
            seed,
            ..base.clone()
        }
    }
}

pub fn grid_cells(kind: GridKind) -> Vec<Cell> {
    use AblationMode::*;
    let exp = UncertaintyMapping::Exponential;
    let objective = vec![
        Cell::new("baseline", Baseline, MiningMode::Neg3v6, exp),
        Cell::new("uitc", Uitc, MiningMode::Neg3v6, exp),
        Cell::new("uitc_gitm_neg3v4", UitcGitm, MiningMode::Neg3v4, exp),
        Cell::new("uitc_gitm_neg3v6", UitcGitm, MiningMode::Neg3v6, exp),
    ];
    let mapping: Vec<Cell> = UncertaintyMapping::ALL
        .iter()
        .map(|&m| Cell::new(&format!("mapping_{}", m.name()), UitcGitm, MiningMode::Neg3v6, m))
        .collect();
    match kind {
        GridKind::Objective => objective,
        GridKind::Mapping => mapping,
        GridKind::All => objective.into_iter().chain(mapping).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub grid: GridKind,
    /// Training seeds; the data is fixed.
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            grid: GridKind::Objective,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
    pub mean_u_correct: Option<f64>,
    pub mean_u_incorrect: Option<f64>,
    pub risk_half: f64,
    pub risk_full: f64,
    pub positive_margin_init: f64,
    pub positive_margin: f64,
    pub weak_margin_init: f64,
    pub weak_margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRun {
    pub cell: Cell,
    pub seed: u64,
    pub outcome: Result<CellMetrics, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub runs: Vec<CellRun>,
}

/// Trains and evaluates one cell at one seed.
pub fn run_cell(
    cell: &Cell,
    seed: u64,
    base: &TrainConfig,
    train_data: &DatasetManifest,
    test_data: &DatasetManifest,
    eval: &EvalConfig,
) -> Result<CellMetrics, String> {
    let cfg = cell.apply(base, seed);
    let (ck, _) = train(&cfg, train_data).map_err(|e| e.to_string())?;
    let init = ModelParams::init(cfg.seed, &cfg.dims(train_data), cfg.tau_init);
    let r = evaluate(&ck.params, Some(&init), test_data, cfg.mapping, eval).map_err(|e| e.to_string())?;
    let init_m = r.init_margins.as_ref().expect("init margins requested");
    let recall = |k| {
        r.recall_at(k)
            .unwrap_or_else(|| crate::metrics::recall_at_k(&r.ranking, k).value)
    };
    Ok(CellMetrics {
        r1: recall(1),
        r5: recall(5),
        r10: recall(10),
        map: r.map.value,
        mean_u_correct: r.reliability.mean_u_correct,
        mean_u_incorrect: r.reliability.mean_u_incorrect,
        risk_half: r.risk.risk_at(0.5),
        risk_full: r.risk.risk_at(1.0),
        positive_margin_init: init_m.mean_positive,
        positive_margin: r.margins.mean_positive,
        weak_margin_init: init_m.mean_weak,
        weak_margin: r.margins.mean_weak,
    })
}

/// Runs every cell at every seed. A failing cell is recorded and the rest
/// still run. `progress` is called after each run.
pub fn run_grid(
    cfg: &AblationConfig,
    base: &TrainConfig,
    train_data: &DatasetManifest,
    test_data: &DatasetManifest,
    eval: &EvalConfig,
    mut progress: impl FnMut(&CellRun),
) -> AblationResult {
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for cell in grid_cells(cfg.grid) {
            let outcome = run_cell(&cell, seed, base, train_data, test_data, eval);
            let run = CellRun { cell, seed, outcome };
            progress(&run);
            runs.push(run);
        }
    }
    AblationResult { runs }
}

/// Median of the values; the mean of the middle two for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

impl AblationResult {
    pub fn cell_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for r in &self.runs {
            if !ids.contains(&r.cell.id) {
                ids.push(r.cell.id.clone());
            }
        }
        ids
    }

    pub fn metrics(&self, cell: &str) -> Vec<(u64, CellMetrics)> {
        self.runs
            .iter()
            .filter(|r| r.cell.id == cell)
            .filter_map(|r| r.outcome.as_ref().ok().map(|m| (r.seed, *m)))
            .collect()
    }

    /// Median of `f` over the successful seeds of `cell`.
    pub fn median_of(&self, cell: &str, f: impl Fn(&CellMetrics) -> f64) -> Option<f64> {
        let v: Vec<f64> = self.metrics(cell).iter().map(|(_, m)| f(m)).collect();
        median(&v)
    }

    pub fn failures(&self) -> Vec<&CellRun> {
        self.runs.iter().filter(|r| r.outcome.is_err()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "cell,seed,r1,r5,r10,map,mean_u_correct,mean_u_incorrect,risk_at_0.5,risk_at_1.0,\
             positive_margin_init,positive_margin,weak_margin_init,weak_margin,status\n",
        );
        let o = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:e}"));
        for r in &self.runs {
            match &r.outcome {
                Ok(m) => writeln!(
                    out,
                    "{},{},{:e},{:e},{:e},{:e},{},{},{:e},{:e},{:e},{:e},{:e},{:e},ok",
                    r.cell.id,
                    r.seed,
                    m.r1,
                    m.r5,
                    m.r10,
                    m.map,
                    o(m.mean_u_correct),
                    o(m.mean_u_incorrect),
                    m.risk_half,
                    m.risk_full,
                    m.positive_margin_init,
                    m.positive_margin,
                    m.weak_margin_init,
                    m.weak_margin
                ),
                Err(e) => writeln!(
                    out,
                    "{},{},,,,,,,,,,,,,error: {}",
                    r.cell.id,
                    r.seed,
                    e.replace([',', '\n'], ";")
                ),
            }
            .expect("writing to a String");
        }
        for id in self.cell_ids() {
            let med = |f: &dyn Fn(&CellMetrics) -> f64| o(self.median_of(&id, f));
            let medo = |f: &dyn Fn(&CellMetrics) -> Option<f64>| {
                let v: Vec<f64> = self.metrics(&id).iter().filter_map(|(_, m)| f(m)).collect();
                o(median(&v))
            };
            writeln!(
                out,
                "{id},median,{},{},{},{},{},{},{},{},{},{},{},{},{}",
                med(&|m| m.r1),
                med(&|m| m.r5),
                med(&|m| m.r10),
                med(&|m| m.map),
                medo(&|m| m.mean_u_correct),
                medo(&|m| m.mean_u_incorrect),
                med(&|m| m.risk_half),
                med(&|m| m.risk_full),
                med(&|m| m.positive_margin_init),
                med(&|m| m.positive_margin),
                med(&|m| m.weak_margin_init),
                med(&|m| m.weak_margin),
                format_args!(
                    "{}/{} ok",
                    self.metrics(&id).len(),
                    self.runs.iter().filter(|r| r.cell.id == id).count()
                )
            )
            .expect("writing to a String");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, split, GenConfig};

    #[test]
    fn grid_shapes() {
        assert_eq!(grid_cells(GridKind::Objective).len(), 4);
        let m = grid_cells(GridKind::Mapping);
        assert_eq!(
            m.iter().map(|c| c.mapping.name()).collect::<Vec<_>>(),
            ["exponential", "linear", "power"]
        );
        assert_eq!(grid_cells(GridKind::All).len(), 7);
    }

    #[test]
    fn median_rule() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn tiny_grid_runs_and_records_failures() {
        let d = generate(&GenConfig {
            num_identities: 10,
            views_per_identity: 2,
            latent_dim: 4,
            raw_dim_image: 6,
            raw_dim_text: 5,
            ..GenConfig::default()
        })
        .unwrap();
        let (tr, te) = split(&d, 0.7, 0).unwrap();
        let base = TrainConfig {
            epochs: 1,
            batch_size: 4,
            hidden_dim: 6,
            embed_dim: 4,
            head_hidden_dim: 4,
            ..TrainConfig::default()
        };
        let cfg = AblationConfig {
            grid: GridKind::Mapping,
            seeds: vec![0, 1],
        };
        let res = run_grid(&cfg, &base, &tr, &te, &EvalConfig::default(), |_| {});
        assert_eq!(res.runs.len(), 6);
        assert!(res.failures().is_empty());
        let csv = res.to_csv();
        assert_eq!(csv.lines().filter(|l| l.contains(",median,")).count(), 3);

        // batches of two identities cannot feed two hard negatives
        let starved = TrainConfig { batch_size: 2, ..base };
        let cfg = AblationConfig {
            grid: GridKind::Objective,
            seeds: vec![0],
        };
        let res = run_grid(&cfg, &starved, &tr, &te, &EvalConfig::default(), |_| {});
        assert_eq!(res.runs.len(), 4);
        assert_eq!(res.failures().len(), 1);
        assert_eq!(res.failures()[0].cell.id, "uitc_gitm_neg3v6");
    }
}
