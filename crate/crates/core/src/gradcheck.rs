//! Finite-difference verification of every backward rule and every loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::Dims;
use crate::kernel::{grad_check, GradReport, Graph, KernelError, NodeId, OpKind, Tensor};
use crate::losses::{consistency_nodes, itc_terms, uitc_loss, LossWeights, UncertaintyMapping};
use crate::mining::MiningConfig;
use crate::objective::{
    build_objective, AblationMode, BatchInputs, Frozen, ModelNodes, ModelParams, ObjectiveConfig, ObjectiveError,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    /// Random parameter points per loss.
    pub points: usize,
    pub eps: f64,
    pub tol: f64,
    pub seed: u64,
    pub batch: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            points: 100,
            eps: 1e-5,
            tol: 1e-4,
            seed: 0,
            batch: 4,
        }
    }
}

/// Loss terms checked at the objective level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Itc,
    Uitc,
    Itm,
    Gitm,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Itc,
        LossKind::Uitc,
        LossKind::Itm,
        LossKind::Gitm,
        LossKind::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Itc => "itc",
            LossKind::Uitc => "uitc",
            LossKind::Itm => "itm",
            LossKind::Gitm => "gitm",
            LossKind::Total => "total",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossCheck {
    pub loss: LossKind,
    pub points: usize,
    pub max_rel_error: f64,
    /// Point index and parameter name where the maximum occurred.
    pub worst: Option<(usize, &'static str)>,
    pub tol: f64,
}

impl LossCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: OpKind,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSummary {
    pub ops: Vec<OpCheck>,
    pub losses: Vec<LossCheck>,
    /// Instances whose frozen-weight gradients differ in any bit.
    pub stop_gradient_mismatches: usize,
    pub stop_gradient_instances: usize,
}

impl GradCheckSummary {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpCheck::passed)
            && self.losses.iter().all(LossCheck::passed)
            && self.stop_gradient_mismatches == 0
    }

    /// Ops whose isolated check failed.
    pub fn failing_ops(&self) -> Vec<OpKind> {
        self.ops.iter().filter(|o| !o.passed()).map(|o| o.op).collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).expect("finite by construction")
}

/// Checks one op in isolation: its output is contracted against fixed random
/// weights so every output entry carries a distinct cotangent.
///
/// `fault` is forwarded to [`Graph::inject_fault`].
pub fn check_op(kind: OpKind, seed: u64, fault: Option<OpKind>) -> Result<GradReport, KernelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<Tensor> = match kind {
        OpKind::Affine => vec![
            uniform(&mut rng, 3, 4, -1.0, 1.0),
            uniform(&mut rng, 4, 2, -1.0, 1.0),
            uniform(&mut rng, 1, 2, -1.0, 1.0),
        ],
        OpKind::Add | OpKind::Mul => vec![uniform(&mut rng, 3, 2, -1.0, 1.0), uniform(&mut rng, 3, 2, -1.0, 1.0)],
        OpKind::MulScalar => vec![uniform(&mut rng, 3, 2, -1.0, 1.0), uniform(&mut rng, 1, 1, 0.5, 1.5)],
        OpKind::Log => vec![uniform(&mut rng, 3, 2, 0.5, 2.0)],
        OpKind::Clamp | OpKind::Diag => vec![uniform(&mut rng, 3, 3, -1.0, 1.0)],
        OpKind::L2Normalize | OpKind::RowSum => vec![uniform(&mut rng, 3, 4, -1.0, 1.0)],
        OpKind::CosineMatrix => vec![uniform(&mut rng, 3, 4, -1.0, 1.0), uniform(&mut rng, 2, 4, -1.0, 1.0)],
        OpKind::SoftmaxRows => vec![uniform(&mut rng, 3, 4, -2.0, 2.0)],
        OpKind::ConcatCols => vec![uniform(&mut rng, 3, 2, -1.0, 1.0), uniform(&mut rng, 3, 1, -1.0, 1.0)],
        _ => vec![uniform(&mut rng, 3, 2, -1.0, 1.0)],
    };
    let apply = |g: &mut Graph, p: &[NodeId]| -> Result<NodeId, KernelError> {
        match kind {
            OpKind::Affine => g.affine(p[0], p[1], p[2]),
            OpKind::Add => g.add(p[0], p[1]),
            OpKind::Mul => g.mul(p[0], p[1]),
            OpKind::MulScalar => g.mul_scalar(p[0], p[1]),
            OpKind::ScaleShift => g.scale_shift(p[0], 1.7, -0.3),
            OpKind::Tanh => g.tanh(p[0]),
            OpKind::Exp => g.exp(p[0]),
            OpKind::Log => g.log(p[0]),
            OpKind::Sigmoid => g.sigmoid(p[0]),
            OpKind::Clamp => g.clamp(p[0], -0.5, 0.5),
            OpKind::L2Normalize => g.l2_normalize(p[0]),
            OpKind::CosineMatrix => g.cosine_matrix(p[0], p[1]),
            OpKind::SoftmaxRows => g.softmax_rows(p[0]),
            OpKind::Diag => g.diag(p[0]),
            OpKind::RowSum => g.row_sum(p[0]),
            OpKind::Sum => g.sum(p[0]),
            OpKind::Mean => g.mean(p[0]),
            OpKind::GatherRows => g.gather_rows(p[0], &[2, 0, 2, 1]),
            OpKind::ConcatCols => g.concat_cols(&[p[0], p[1]]),
            OpKind::Leaf | OpKind::Detach => Err(KernelError::UnknownOp(kind.name().to_string())),
        }
    };

    // shape of the op output, to draw contraction weights once
    let out_shape = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|t| g.param(t.clone())).collect();
        let out = apply(&mut g, &ids)?;
        (g.value(out).rows(), g.value(out).cols())
    };
    let weights = uniform(&mut rng, out_shape.0, out_shape.1, 0.5, 1.5);

    grad_check(
        |g: &mut Graph, p: &[NodeId]| -> Result<NodeId, KernelError> {
            // a fault elsewhere would corrupt the contraction, not this op
            if fault == Some(kind) {
                g.inject_fault(kind);
            }
            let out = apply(g, p)?;
            // the contraction must not reuse the op under test, or an
            // injected fault would cancel itself
            match kind {
                OpKind::Mul => {
                    let t = g.tanh(out)?;
                    g.sum(t)
                }
                OpKind::Sum => {
                    let w = g.constant(weights.clone());
                    let m = g.mul(out, w)?;
                    g.mean(m)
                }
                _ => {
                    let w = g.constant(weights.clone());
                    let m = g.mul(out, w)?;
                    g.sum(m)
                }
            }
        },
        &params,
        1e-6,
        1e-6,
    )
}

/// Tiny model dimensions used for loss-level checks.
pub fn check_dims() -> Dims {
    Dims {
        raw_image: 5,
        raw_text: 4,
        hidden: 4,
        embed: 3,
        head_hidden: 3,
    }
}

/// A random parameter point: all weights and biases `U(-0.8, 0.8)`,
/// `τ ∈ [0.05, 1]`, `γ ∈ [e⁻¹, e]`.
pub fn random_params(rng: &mut ChaCha8Rng, dims: &Dims) -> ModelParams {
    let base = ModelParams::init(0, dims, 0.07);
    let mut tensors: Vec<Tensor> = base
        .tensors()
        .iter()
        .map(|t| uniform(rng, t.rows(), t.cols(), -0.8, 0.8))
        .collect();
    tensors[12] = Tensor::scalar(rng.random_range(0.05f64.ln()..0.0));
    tensors[13] = Tensor::scalar(rng.random_range(-1.0..1.0));
    ModelParams::from_tensors(tensors).expect("fourteen tensors")
}

pub fn random_batch(rng: &mut ChaCha8Rng, dims: &Dims, n: usize) -> BatchInputs {
    BatchInputs {
        image_raw: uniform(rng, n, dims.raw_image, -1.0, 1.0),
        text_raw: uniform(rng, n, dims.raw_text, -1.0, 1.0),
        weak_image_raw: uniform(rng, n, dims.raw_image, -1.0, 1.0),
        weak_text_raw: uniform(rng, n, dims.raw_text, -1.0, 1.0),
        identities: (0..n as u32).collect(),
    }
}

/// Objective settings for loss checks. GITM uses `K = 2`, so the batch must
/// hold at least three identities.
pub fn check_objective() -> ObjectiveConfig {
    ObjectiveConfig {
        mode: AblationMode::UitcGitm,
        weights: LossWeights::default(),
        mining: MiningConfig::neg3v6(),
        mapping: UncertaintyMapping::Exponential,
    }
}

/// Gradient check of one loss term at one parameter point, with the mined
/// groups and the detached uncertainties frozen at that point.
pub fn check_loss_at(
    loss: LossKind,
    params: &ModelParams,
    batch: &BatchInputs,
    cfg: &ObjectiveConfig,
    eps: f64,
    tol: f64,
    fault: Option<OpKind>,
) -> Result<GradReport, ObjectiveError> {
    let frozen = {
        let mut g = Graph::new();
        let nodes = params.register(&mut g);
        let obj = build_objective(&mut g, &nodes, batch, cfg, None)?;
        Frozen::capture(&g, &obj)
    };
    grad_check(
        |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId, ObjectiveError> {
            if let Some(f) = fault {
                g.inject_fault(f);
            }
            let nodes = ModelNodes::from_ids(ids);
            let obj = build_objective(g, &nodes, batch, cfg, Some(&frozen))?;
            let missing = || KernelError::UnknownOp(loss.name().to_string());
            Ok(match loss {
                LossKind::Itc => obj.itc,
                LossKind::Itm => obj.itm,
                LossKind::Uitc => obj.uitc.ok_or_else(missing)?,
                LossKind::Gitm => {
                    let (t, i) = obj.gitm_txt.zip(obj.gitm_img).ok_or_else(missing)?;
                    g.add(t, i)?
                }
                LossKind::Total => obj.total,
            })
        },
        &params.tensors(),
        eps,
        tol,
    )
}

/// Runs [`check_loss_at`] over `cfg.points` random parameter points.
pub fn check_loss(loss: LossKind, cfg: &GradCheckConfig, fault: Option<OpKind>) -> Result<LossCheck, ObjectiveError> {
    let dims = check_dims();
    let obj = check_objective();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = LossCheck {
        loss,
        points: cfg.points,
        max_rel_error: 0.0,
        worst: None,
        tol: cfg.tol,
    };
    for point in 0..cfg.points {
        let params = random_params(&mut rng, &dims);
        let batch = random_batch(&mut rng, &dims, cfg.batch);
        let report = check_loss_at(loss, &params, &batch, &obj, cfg.eps, cfg.tol, fault)?;
        if report.max_rel_error > out.max_rel_error || out.worst.is_none() {
            out.max_rel_error = out.max_rel_error.max(report.max_rel_error);
            out.worst = report.worst.map(|(p, _)| (point, crate::objective::PARAM_NAMES[p]));
        }
    }
    Ok(out)
}

/// Compares UITC gradients against the same expression with the
/// uncertainty replaced by a constant of equal value. Returns the number of
/// instances where any gradient entry differs in any bit.
pub fn stop_gradient_mismatches(instances: usize, seed: u64, batch: usize) -> Result<usize, KernelError> {
    let dims = check_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..instances {
        let params = random_params(&mut rng, &dims);
        let inputs = random_batch(&mut rng, &dims, batch);
        let mapping = UncertaintyMapping::ALL[rng.random_range(0..UncertaintyMapping::ALL.len())];

        let run = |frozen: Option<&Tensor>| -> Result<(Tensor, Vec<Tensor>), KernelError> {
            let mut g = Graph::new();
            let nodes = params.register(&mut g);
            let xi = g.constant(inputs.image_raw.clone());
            let xt = g.constant(inputs.text_raw.clone());
            let xiw = g.constant(inputs.weak_image_raw.clone());
            let xtw = g.constant(inputs.weak_text_raw.clone());
            let f_i = crate::encoders::encode_nodes(&mut g, &nodes.image, xi)?;
            let f_t = crate::encoders::encode_nodes(&mut g, &nodes.text, xt)?;
            let f_iw = crate::encoders::encode_nodes(&mut g, &nodes.image, xiw)?;
            let f_tw = crate::encoders::encode_nodes(&mut g, &nodes.text, xtw)?;
            let u = match frozen {
                Some(t) => g.constant(t.clone()),
                None => consistency_nodes(&mut g, f_i, f_t, f_iw, f_tw, mapping)?.1,
            };
            let a = itc_terms(&mut g, f_i, f_tw, nodes.log_tau)?;
            let b = itc_terms(&mut g, f_iw, f_t, nodes.log_tau)?;
            let s = g.add(a, b)?;
            let weak = g.scale_shift(s, 0.5, 0.0)?;
            let loss = uitc_loss(&mut g, weak, u, nodes.log_gamma)?;
            let grads = g.backward(loss)?;
            let per_param = nodes
                .ids()
                .iter()
                .map(|&id| grads.get_or_zeros(id, g.value(id)))
                .collect();
            Ok((g.value(u).clone(), per_param))
        };
        let (u, live) = run(None)?;
        let (_, frozen) = run(Some(&u))?;
        let same = live
            .iter()
            .zip(&frozen)
            .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        if !same {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

/// Every op in isolation, every loss at `cfg.points` points, and the
/// stop-gradient identity at `cfg.points` instances.
pub fn run_suite(cfg: &GradCheckConfig, fault: Option<OpKind>) -> Result<GradCheckSummary, ObjectiveError> {
    let mut ops = Vec::with_capacity(OpKind::DIFFERENTIABLE.len());
    for kind in OpKind::DIFFERENTIABLE {
        let r = check_op(kind, cfg.seed, fault)?;
        ops.push(OpCheck {
            op: kind,
            max_rel_error: r.max_rel_error,
            tol: r.tol,
        });
    }
    let mut losses = Vec::with_capacity(LossKind::ALL.len());
    for loss in LossKind::ALL {
        losses.push(check_loss(loss, cfg, fault)?);
    }
    let stop_gradient_mismatches = stop_gradient_mismatches(cfg.points, cfg.seed, cfg.batch)?;
    Ok(GradCheckSummary {
        ops,
        losses,
        stop_gradient_mismatches,
        stop_gradient_instances: cfg.points,
    })
}
