//! The full per-batch objective: encode anchors and weak counterparts, mine
//! groups, and assemble every loss term on one graph.

use serde::{Deserialize, Serialize};

use crate::encoders::{
    encode_nodes, init_params, match_probability_nodes, Dims, EncoderNodes, EncoderParams, FusionHeadParams, HeadNodes,
};
use crate::kernel::{Graph, KernelError, NodeId, Tensor};
use crate::losses::{
    consistency_nodes, itc_loss, itc_terms, itm_loss, itm_terms, total_loss, uitc_loss, LossReport, LossTerms,
    LossWeights, UncertaintyMapping,
};
use crate::mining::{build_groups, EmbeddingBatch, MiningConfig, MiningError, PairGroup};

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error("{0} embedding row(s) collapsed to zero norm")]
    Degenerate(usize),
}

/// Which terms enter the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// `itc + itm`
    Baseline,
    /// `itc + itm + α·uitc`
    Uitc,
    /// `itc + itm + α·uitc + β·(gitm_txt + gitm_img)`
    #[default]
    UitcGitm,
}

impl AblationMode {
    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Baseline => "baseline",
            AblationMode::Uitc => "uitc",
            AblationMode::UitcGitm => "uitc_gitm",
        }
    }

    pub fn uses_uitc(self) -> bool {
        !matches!(self, AblationMode::Baseline)
    }

    pub fn uses_gitm(self) -> bool {
        matches!(self, AblationMode::UitcGitm)
    }
}

/// Every trainable quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub image: EncoderParams,
    pub text: EncoderParams,
    pub head: FusionHeadParams,
    pub log_tau: f64,
    pub log_gamma: f64,
}

/// Names of the tensors returned by [`ModelParams::tensors`], in order.
pub const PARAM_NAMES: [&str; 14] = [
    "image.w1",
    "image.b1",
    "image.w2",
    "image.b2",
    "text.w1",
    "text.b1",
    "text.w2",
    "text.b2",
    "head.w1",
    "head.b1",
    "head.w2",
    "head.b2",
    "log_tau",
    "log_gamma",
];

impl ModelParams {
    /// Seeded towers and head, `τ = tau_init`, `γ = 1`.
    pub fn init(seed: u64, dims: &Dims, tau_init: f64) -> Self {
        let (image, text, head) = init_params(seed, dims);
        Self {
            image,
            text,
            head,
            log_tau: tau_init.ln(),
            log_gamma: 0.0,
        }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn gamma(&self) -> f64 {
        self.log_gamma.exp()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        let mut v: Vec<Tensor> = Vec::with_capacity(14);
        v.extend(self.image.tensors().into_iter().cloned());
        v.extend(self.text.tensors().into_iter().cloned());
        v.extend(self.head.tensors().into_iter().cloned());
        v.push(Tensor::scalar(self.log_tau));
        v.push(Tensor::scalar(self.log_gamma));
        v
    }

    /// Inverse of [`ModelParams::tensors`].
    pub fn from_tensors(mut t: Vec<Tensor>) -> Result<Self, KernelError> {
        if t.len() != 14 {
            return Err(KernelError::DataLength {
                shape: vec![14],
                len: t.len(),
            });
        }
        let log_gamma = t.pop().expect("len checked").item();
        let log_tau = t.pop().expect("len checked").item();
        let mut it = t.into_iter();
        let mut four = || {
            let w1 = it.next().expect("len checked");
            let b1 = it.next().expect("len checked");
            let w2 = it.next().expect("len checked");
            let b2 = it.next().expect("len checked");
            (w1, b1, w2, b2)
        };
        let (w1, b1, w2, b2) = four();
        let image = EncoderParams { w1, b1, w2, b2 };
        let (w1, b1, w2, b2) = four();
        let text = EncoderParams { w1, b1, w2, b2 };
        let (w1, b1, w2, b2) = four();
        let head = FusionHeadParams { w1, b1, w2, b2 };
        Ok(Self {
            image,
            text,
            head,
            log_tau,
            log_gamma,
        })
    }

    pub fn register(&self, g: &mut Graph) -> ModelNodes {
        let ids: Vec<NodeId> = self.tensors().into_iter().map(|t| g.param(t)).collect();
        ModelNodes::from_ids(&ids)
    }
}

/// Graph handles for all of [`ModelParams`], in [`PARAM_NAMES`] order.
#[derive(Debug, Clone, Copy)]
pub struct ModelNodes {
    pub image: EncoderNodes,
    pub text: EncoderNodes,
    pub head: HeadNodes,
    pub log_tau: NodeId,
    pub log_gamma: NodeId,
}

impl ModelNodes {
    pub fn from_ids(ids: &[NodeId]) -> Self {
        assert_eq!(ids.len(), 14, "expected 14 parameter nodes");
        let enc = |k: usize| EncoderNodes {
            w1: ids[k],
            b1: ids[k + 1],
            w2: ids[k + 2],
            b2: ids[k + 3],
        };
        Self {
            image: enc(0),
            text: enc(4),
            head: HeadNodes {
                w1: ids[8],
                b1: ids[9],
                w2: ids[10],
                b2: ids[11],
            },
            log_tau: ids[12],
            log_gamma: ids[13],
        }
    }

    pub fn ids(&self) -> [NodeId; 14] {
        [
            self.image.w1,
            self.image.b1,
            self.image.w2,
            self.image.b2,
            self.text.w1,
            self.text.b1,
            self.text.w2,
            self.text.b2,
            self.head.w1,
            self.head.b1,
            self.head.w2,
            self.head.b2,
            self.log_tau,
            self.log_gamma,
        ]
    }
}

/// Raw features for one batch: anchors and their weak counterparts.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInputs {
    pub image_raw: Tensor,
    pub text_raw: Tensor,
    pub weak_image_raw: Tensor,
    pub weak_text_raw: Tensor,
    pub identities: Vec<u32>,
}

/// Quantities that the objective treats as constants, captured at a base
/// point.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen {
    pub groups: Vec<PairGroup>,
    pub u_w: Tensor,
}

impl Frozen {
    pub fn capture(g: &Graph, obj: &ObjectiveNodes) -> Self {
        Self {
            groups: obj.groups.clone(),
            u_w: g.value(obj.u_w).clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub mode: AblationMode,
    pub weights: LossWeights,
    pub mining: MiningConfig,
    pub mapping: UncertaintyMapping,
}

/// Handles to everything the objective built.
#[derive(Debug, Clone)]
pub struct ObjectiveNodes {
    pub f_i: NodeId,
    pub f_t: NodeId,
    pub f_iw: NodeId,
    pub f_tw: NodeId,
    pub itc: NodeId,
    pub itm: NodeId,
    pub uitc: Option<NodeId>,
    pub gitm_txt: Option<NodeId>,
    pub gitm_img: Option<NodeId>,
    pub total: NodeId,
    pub s_w: NodeId,
    pub u_w: NodeId,
    pub groups: Vec<PairGroup>,
}

impl ObjectiveNodes {
    pub fn report(&self, g: &Graph) -> LossReport {
        let v = |id: NodeId| g.value(id).item();
        let opt = |id: Option<NodeId>| id.map_or(0.0, v);
        let mean = |id: NodeId| {
            let t = g.value(id);
            t.data().iter().sum::<f64>() / t.len() as f64
        };
        LossReport {
            itc: v(self.itc),
            uitc: opt(self.uitc),
            itm: v(self.itm),
            gitm_txt: opt(self.gitm_txt),
            gitm_img: opt(self.gitm_img),
            total: v(self.total),
            mean_s_w: mean(self.s_w),
            mean_u_w: mean(self.u_w),
        }
    }

    pub fn u_values<'g>(&self, g: &'g Graph) -> &'g [f64] {
        g.value(self.u_w).data()
    }
}

fn head_on(
    g: &mut Graph,
    head: &HeadNodes,
    images: NodeId,
    image_rows: &[usize],
    texts: NodeId,
    text_rows: &[usize],
) -> Result<NodeId, KernelError> {
    let a = g.gather_rows(images, image_rows)?;
    let b = g.gather_rows(texts, text_rows)?;
    match_probability_nodes(g, head, a, b)
}

/// Builds the objective for one batch.
///
/// Groups are mined from the anchor embeddings unless `frozen` is given.
/// Finite-difference checks pass the groups and uncertainties from the base
/// point, so neither the selection nor the stop-gradient weights move under
/// perturbation.
pub fn build_objective(
    g: &mut Graph,
    nodes: &ModelNodes,
    batch: &BatchInputs,
    cfg: &ObjectiveConfig,
    frozen: Option<&Frozen>,
) -> Result<ObjectiveNodes, ObjectiveError> {
    let n = batch.identities.len();
    let zero_before = g.zero_rows();
    let xi = g.constant(batch.image_raw.clone());
    let xt = g.constant(batch.text_raw.clone());
    let xiw = g.constant(batch.weak_image_raw.clone());
    let xtw = g.constant(batch.weak_text_raw.clone());
    let f_i = encode_nodes(g, &nodes.image, xi)?;
    let f_t = encode_nodes(g, &nodes.text, xt)?;
    let f_iw = encode_nodes(g, &nodes.image, xiw)?;
    let f_tw = encode_nodes(g, &nodes.text, xtw)?;
    if g.zero_rows() > zero_before {
        return Err(ObjectiveError::Degenerate(g.zero_rows() - zero_before));
    }

    let groups = match frozen {
        Some(fz) => fz.groups.clone(),
        None => {
            let emb = EmbeddingBatch {
                image: g.value(f_i).clone(),
                text: g.value(f_t).clone(),
                weak_image: g.value(f_iw).clone(),
                weak_text: g.value(f_tw).clone(),
                identities: batch.identities.clone(),
            };
            let mining = if cfg.mode.uses_gitm() {
                cfg.mining
            } else {
                // only the strong-pair negatives are needed
                MiningConfig::neg3v4()
            };
            build_groups(&emb, &mining)?
        }
    };

    let itc = itc_loss(g, f_i, f_t, nodes.log_tau)?;

    // strong pair plus its two directional negatives
    let anchors: Vec<usize> = (0..n).collect();
    let mut img_rows = anchors.clone();
    let mut txt_rows = anchors.clone();
    img_rows.extend(&anchors);
    txt_rows.extend(groups.iter().map(|gr| gr.itm_negative_text));
    img_rows.extend(groups.iter().map(|gr| gr.itm_negative_image));
    txt_rows.extend(&anchors);
    let mut labels = vec![1.0; n];
    labels.extend(std::iter::repeat_n(0.0, 2 * n));
    let p_itm = head_on(g, &nodes.head, f_i, &img_rows, f_t, &txt_rows)?;
    let itm = itm_loss(g, p_itm, &labels)?;

    let (s_w, u_w) = consistency_nodes(g, f_i, f_t, f_iw, f_tw, cfg.mapping)?;

    let uitc = if cfg.mode.uses_uitc() {
        let weak_text = itc_terms(g, f_i, f_tw, nodes.log_tau)?;
        let weak_image = itc_terms(g, f_iw, f_t, nodes.log_tau)?;
        let sum = g.add(weak_text, weak_image)?;
        let itc_weak = g.scale_shift(sum, 0.5, 0.0)?;
        let u = match frozen {
            Some(fz) => g.constant(fz.u_w.clone()),
            None => u_w,
        };
        Some(uitc_loss(g, itc_weak, u, nodes.log_gamma)?)
    } else {
        None
    };

    let (gitm_txt, gitm_img) = if cfg.mode.uses_gitm() {
        let k = cfg.mining.k;
        let per_branch = (n * (1 + k)) as f64;

        // (I_i, T_i^w) matched, (I_i, T_j) for j in N^T_i unmatched
        let pos = match_probability_nodes(g, &nodes.head, f_i, f_tw)?;
        let pos = itm_terms(g, pos, &vec![1.0; n])?;
        let rep: Vec<usize> = groups.iter().flat_map(|gr| std::iter::repeat_n(gr.anchor, k)).collect();
        let negs: Vec<usize> = groups
            .iter()
            .flat_map(|gr| gr.weak_text_negatives.iter().copied())
            .collect();
        let neg = head_on(g, &nodes.head, f_i, &rep, f_t, &negs)?;
        let neg = itm_terms(g, neg, &vec![0.0; n * k])?;
        let (a, b) = (g.sum(pos)?, g.sum(neg)?);
        let s = g.add(a, b)?;
        let txt = g.scale_shift(s, 1.0 / per_branch, 0.0)?;

        // (I_i^w, T_i) matched, (I_j, T_i) for j in N^I_i unmatched
        let pos = match_probability_nodes(g, &nodes.head, f_iw, f_t)?;
        let pos = itm_terms(g, pos, &vec![1.0; n])?;
        let negs: Vec<usize> = groups
            .iter()
            .flat_map(|gr| gr.weak_image_negatives.iter().copied())
            .collect();
        let neg = head_on(g, &nodes.head, f_i, &negs, f_t, &rep)?;
        let neg = itm_terms(g, neg, &vec![0.0; n * k])?;
        let (a, b) = (g.sum(pos)?, g.sum(neg)?);
        let s = g.add(a, b)?;
        let img = g.scale_shift(s, 1.0 / per_branch, 0.0)?;
        (Some(txt), Some(img))
    } else {
        (None, None)
    };

    let terms = LossTerms {
        itc,
        itm,
        uitc,
        gitm: gitm_txt.zip(gitm_img),
    };
    let total = total_loss(g, &terms, &cfg.weights)?;
    Ok(ObjectiveNodes {
        f_i,
        f_t,
        f_iw,
        f_tw,
        itc,
        itm,
        uitc,
        gitm_txt,
        gitm_img,
        total,
        s_w,
        u_w,
        groups,
    })
}
