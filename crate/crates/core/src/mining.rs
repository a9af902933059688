//! Weak-positive sampling, in-batch hard-negative mining, and group
//! assembly for the group-wise matching loss.
//!
//! Per anchor `i` a group holds three matched pairs, `(I_i, T_i)`,
//! `(I_i, T_i^w)` and `(I_i^w, T_i)`, plus `2 + 2K` mined negatives: one
//! hardest text for `I_i` and one hardest image for `T_i` on the strong pair,
//! then the top-`K` texts for `I_i` and the top-`K` images for `T_i` on the
//! two weak branches. Candidates are always other batch rows with a
//! different identity.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::PairRecord;
use crate::kernel::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MiningError {
    #[error("identity {0} is not present in the pool")]
    UnknownIdentity(u32),
    #[error(
        "mining starvation: anchor {anchor} (identity {identity}) needs {needed} negatives \
         but only {eligible} of {batch} batch rows have a different identity (batch identities {identities:?})"
    )]
    Starvation {
        anchor: usize,
        identity: u32,
        needed: usize,
        eligible: usize,
        batch: usize,
        identities: Vec<u32>,
    },
    #[error("invalid mining config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiningMode {
    Neg3v4,
    Neg3v6,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    pub mode: MiningMode,
    /// Hard negatives per direction on each weak branch.
    pub k: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self::neg3v6()
    }
}

impl MiningConfig {
    pub fn neg3v4() -> Self {
        Self {
            mode: MiningMode::Neg3v4,
            k: 1,
        }
    }

    pub fn neg3v6() -> Self {
        Self {
            mode: MiningMode::Neg3v6,
            k: 2,
        }
    }

    pub fn custom(k: usize) -> Self {
        Self {
            mode: MiningMode::Custom,
            k,
        }
    }

    pub fn validate(&self) -> Result<(), MiningError> {
        let ok = match self.mode {
            MiningMode::Neg3v4 => self.k == 1,
            MiningMode::Neg3v6 => self.k == 2,
            MiningMode::Custom => self.k >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(MiningError::Config(format!(
                "mode {:?} is incompatible with k = {}",
                self.mode, self.k
            )))
        }
    }

    pub fn label(&self) -> String {
        match self.mode {
            MiningMode::Neg3v4 => "neg3v4".into(),
            MiningMode::Neg3v6 => "neg3v6".into(),
            MiningMode::Custom => format!("neg3v{}", 2 + 2 * self.k),
        }
    }
}

/// A weak counterpart for an anchor record: same identity, and a different
/// record whenever the identity has one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakSelection {
    pub anchor: usize,
    pub weak: usize,
    /// The identity has a single record, so the anchor stands in for itself.
    pub degenerate: bool,
}

/// Draws a weak counterpart uniformly among the other records of the
/// anchor's identity. `pool` maps identity to record indices.
pub fn sample_weak<R: Rng + ?Sized>(
    anchor: usize,
    records: &[PairRecord],
    pool: &BTreeMap<u32, Vec<usize>>,
    rng: &mut R,
) -> Result<WeakSelection, MiningError> {
    let identity = records[anchor].identity;
    let members = pool.get(&identity).ok_or(MiningError::UnknownIdentity(identity))?;
    let others: Vec<usize> = members.iter().copied().filter(|&r| r != anchor).collect();
    if others.is_empty() {
        return Ok(WeakSelection {
            anchor,
            weak: anchor,
            degenerate: true,
        });
    }
    let weak = others[rng.random_range(0..others.len())];
    Ok(WeakSelection {
        anchor,
        weak,
        degenerate: false,
    })
}

/// Current embeddings of one mini-batch. Row `i` of every matrix belongs to
/// anchor `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub image: Tensor,
    pub text: Tensor,
    pub weak_image: Tensor,
    pub weak_text: Tensor,
    pub identities: Vec<u32>,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Anchor image, candidate texts.
    ImageToText,
    /// Anchor text, candidate images.
    TextToImage,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Indices of the `k` most similar different-identity candidates in the
/// other modality, most similar first; ties go to the lower index.
pub fn mine_hard_negatives(
    batch: &EmbeddingBatch,
    anchor: usize,
    direction: Direction,
    k: usize,
) -> Result<Vec<usize>, MiningError> {
    let identity = batch.identities[anchor];
    let (query, candidates) = match direction {
        Direction::ImageToText => (batch.image.row_slice(anchor), &batch.text),
        Direction::TextToImage => (batch.text.row_slice(anchor), &batch.image),
    };
    let mut scored: Vec<(f64, usize)> = (0..batch.len())
        .filter(|&j| batch.identities[j] != identity)
        .map(|j| (dot(query, candidates.row_slice(j)), j))
        .collect();
    if scored.len() < k {
        return Err(MiningError::Starvation {
            anchor,
            identity,
            needed: k,
            eligible: scored.len(),
            batch: batch.len(),
            identities: batch.identities.clone(),
        });
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, j)| j).collect())
}

/// Which embedding matrix a pair member comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Anchor(usize),
    Weak(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupPair {
    pub image: Source,
    pub text: Source,
    pub label: f64,
}

/// One anchor's constructed pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairGroup {
    pub anchor: usize,
    /// Hardest text for `I_i` on the strong pair.
    pub itm_negative_text: usize,
    /// Hardest image for `T_i` on the strong pair.
    pub itm_negative_image: usize,
    /// Top-`K` texts for `I_i`, paired with `I_i` on the weak-text branch.
    pub weak_text_negatives: Vec<usize>,
    /// Top-`K` images for `T_i`, paired with `T_i` on the weak-image branch.
    pub weak_image_negatives: Vec<usize>,
}

impl PairGroup {
    pub fn strong_pairs(&self) -> [GroupPair; 3] {
        let i = self.anchor;
        [
            GroupPair {
                image: Source::Anchor(i),
                text: Source::Anchor(i),
                label: 1.0,
            },
            GroupPair {
                image: Source::Anchor(i),
                text: Source::Anchor(self.itm_negative_text),
                label: 0.0,
            },
            GroupPair {
                image: Source::Anchor(self.itm_negative_image),
                text: Source::Anchor(i),
                label: 0.0,
            },
        ]
    }

    pub fn weak_text_pairs(&self) -> Vec<GroupPair> {
        let i = self.anchor;
        std::iter::once(GroupPair {
            image: Source::Anchor(i),
            text: Source::Weak(i),
            label: 1.0,
        })
        .chain(self.weak_text_negatives.iter().map(|&j| GroupPair {
            image: Source::Anchor(i),
            text: Source::Anchor(j),
            label: 0.0,
        }))
        .collect()
    }

    pub fn weak_image_pairs(&self) -> Vec<GroupPair> {
        let i = self.anchor;
        std::iter::once(GroupPair {
            image: Source::Weak(i),
            text: Source::Anchor(i),
            label: 1.0,
        })
        .chain(self.weak_image_negatives.iter().map(|&j| GroupPair {
            image: Source::Anchor(j),
            text: Source::Anchor(i),
            label: 0.0,
        }))
        .collect()
    }

    /// Every constructed pair of the group.
    pub fn pairs(&self) -> Vec<GroupPair> {
        let mut out = self.strong_pairs().to_vec();
        out.extend(self.weak_text_pairs());
        out.extend(self.weak_image_pairs());
        out
    }

    pub fn matched_count(&self) -> usize {
        self.pairs().iter().filter(|p| p.label == 1.0).count()
    }

    pub fn negative_count(&self) -> usize {
        self.pairs().iter().filter(|p| p.label == 0.0).count()
    }

    /// Batch rows used as negatives, with multiplicity.
    pub fn negative_rows(&self) -> Vec<usize> {
        let mut v = vec![self.itm_negative_text, self.itm_negative_image];
        v.extend(&self.weak_text_negatives);
        v.extend(&self.weak_image_negatives);
        v
    }
}

/// Mines all four directions for anchor `i` and assembles its group.
pub fn build_group(anchor: usize, batch: &EmbeddingBatch, cfg: &MiningConfig) -> Result<PairGroup, MiningError> {
    cfg.validate()?;
    let itm_text = mine_hard_negatives(batch, anchor, Direction::ImageToText, 1)?;
    let itm_image = mine_hard_negatives(batch, anchor, Direction::TextToImage, 1)?;
    Ok(PairGroup {
        anchor,
        itm_negative_text: itm_text[0],
        itm_negative_image: itm_image[0],
        weak_text_negatives: mine_hard_negatives(batch, anchor, Direction::ImageToText, cfg.k)?,
        weak_image_negatives: mine_hard_negatives(batch, anchor, Direction::TextToImage, cfg.k)?,
    })
}

/// Groups for every anchor in batch order.
pub fn build_groups(batch: &EmbeddingBatch, cfg: &MiningConfig) -> Result<Vec<PairGroup>, MiningError> {
    (0..batch.len()).map(|i| build_group(i, batch, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::l2_normalize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(identity: u32, view: u32) -> PairRecord {
        PairRecord {
            identity,
            view,
            image_raw: vec![0.0],
            text_raw: vec![0.0],
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, identities: Vec<u32>, d: usize) -> EmbeddingBatch {
        let n = identities.len();
        let mut m = || {
            let t = Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            l2_normalize(&t).tensor
        };
        EmbeddingBatch {
            image: m(),
            text: m(),
            weak_image: m(),
            weak_text: m(),
            identities,
        }
    }

    #[test]
    fn two_views_force_the_other() {
        let records = vec![record(0, 0), record(0, 1), record(1, 0)];
        let pool = crate::datagen::group_by_identity(&records);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let w = sample_weak(0, &records, &pool, &mut rng).unwrap();
            assert_eq!(w.weak, 1);
            assert!(!w.degenerate);
        }
    }

    #[test]
    fn single_view_is_degenerate() {
        let records = vec![record(0, 0), record(0, 1), record(1, 0)];
        let pool = crate::datagen::group_by_identity(&records);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = sample_weak(2, &records, &pool, &mut rng).unwrap();
        assert_eq!((w.weak, w.degenerate), (2, true));
    }

    #[test]
    fn absent_identity() {
        let records = vec![record(0, 0), record(5, 0)];
        let pool = crate::datagen::group_by_identity(&records[..1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_weak(1, &records, &pool, &mut rng),
            Err(MiningError::UnknownIdentity(5))
        );
    }

    #[test]
    fn weak_sampling_is_uniform() {
        let records: Vec<_> = (0..5).map(|v| record(3, v)).collect();
        let pool = crate::datagen::group_by_identity(&records);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            let w = sample_weak(0, &records, &pool, &mut rng).unwrap();
            assert_eq!(records[w.weak].identity, 3);
            counts[w.weak] += 1;
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..] {
            let f = c as f64 / draws as f64;
            assert!((f - 0.25).abs() < 0.02, "{f}");
        }
    }

    #[test]
    fn crafted_cosines_pick_the_closest() {
        // anchor image at e0; text 1 has cos 0.9, text 2 has cos 0.1
        let s = |c: f64| [c, (1.0 - c * c).sqrt()];
        let image = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        let text = Tensor::from_rows(&[s(1.0), s(0.9), s(0.1)]).unwrap();
        let batch = EmbeddingBatch {
            image: image.clone(),
            text: text.clone(),
            weak_image: image,
            weak_text: text,
            identities: vec![0, 1, 2],
        };
        assert_eq!(
            mine_hard_negatives(&batch, 0, Direction::ImageToText, 1).unwrap(),
            vec![1]
        );
        assert_eq!(
            mine_hard_negatives(&batch, 0, Direction::ImageToText, 2).unwrap(),
            vec![1, 2]
        );
    }

    #[test]
    fn ties_go_to_lower_index() {
        let t = Tensor::from_rows(&[[1.0, 0.0]; 5]).unwrap();
        let batch = EmbeddingBatch {
            image: t.clone(),
            text: t.clone(),
            weak_image: t.clone(),
            weak_text: t,
            identities: vec![0, 1, 2, 3, 4],
        };
        assert_eq!(
            mine_hard_negatives(&batch, 2, Direction::TextToImage, 3).unwrap(),
            vec![0, 1, 3]
        );
    }

    #[test]
    fn never_returns_same_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let n = rng.random_range(3..10);
            let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let batch = random_batch(&mut rng, ids.clone(), 3);
            for i in 0..n {
                for dir in [Direction::ImageToText, Direction::TextToImage] {
                    let eligible = ids.iter().filter(|&&x| x != ids[i]).count();
                    match mine_hard_negatives(&batch, i, dir, 1) {
                        Ok(js) => assert!(js.iter().all(|&j| ids[j] != ids[i])),
                        Err(MiningError::Starvation { eligible: e, .. }) => assert_eq!(e, eligible),
                        Err(e) => panic!("{e}"),
                    }
                }
            }
        }
    }

    // brute-force oracle: all eligible j sorted by (score desc, index asc)
    #[test]
    fn matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..300 {
            let ids: Vec<u32> = (0..8).map(|_| rng.random_range(0..5)).collect();
            let batch = random_batch(&mut rng, ids.clone(), 3);
            let i = rng.random_range(0..8);
            let eligible: Vec<usize> = (0..8).filter(|&j| ids[j] != ids[i]).collect();
            for k in 1..=eligible.len() {
                let got = mine_hard_negatives(&batch, i, Direction::ImageToText, k).unwrap();
                for (pos, &j) in got.iter().enumerate() {
                    let sj = dot(batch.image.row_slice(i), batch.text.row_slice(j));
                    let better = eligible
                        .iter()
                        .filter(|&&c| {
                            let sc = dot(batch.image.row_slice(i), batch.text.row_slice(c));
                            sc > sj || (sc == sj && c < j)
                        })
                        .count();
                    assert_eq!(better, pos);
                }
            }
        }
    }

    #[test]
    fn group_sizes_follow_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = random_batch(&mut rng, vec![0, 1, 2, 3], 4);
        let g4 = build_group(0, &batch, &MiningConfig::neg3v4()).unwrap();
        assert_eq!((g4.matched_count(), g4.negative_count()), (3, 4));
        let g6 = build_group(0, &batch, &MiningConfig::neg3v6()).unwrap();
        assert_eq!((g6.matched_count(), g6.negative_count()), (3, 6));
        let g8 = build_group(1, &batch, &MiningConfig::custom(3)).unwrap();
        assert_eq!((g8.matched_count(), g8.negative_count()), (3, 8));
    }

    #[test]
    fn two_identities_starve_at_k2() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = random_batch(&mut rng, vec![0, 1], 4);
        assert!(build_group(0, &batch, &MiningConfig::neg3v4()).is_ok());
        assert!(matches!(
            build_group(0, &batch, &MiningConfig::neg3v6()),
            Err(MiningError::Starvation {
                needed: 2,
                eligible: 1,
                ..
            })
        ));
    }

    #[test]
    fn config_consistency() {
        assert!(MiningConfig::neg3v4().validate().is_ok());
        assert!(MiningConfig {
            mode: MiningMode::Neg3v4,
            k: 2
        }
        .validate()
        .is_err());
        assert!(MiningConfig::custom(0).validate().is_err());
        assert_eq!(MiningConfig::custom(3).label(), "neg3v8");
    }
}
