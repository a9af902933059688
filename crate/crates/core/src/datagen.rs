//! Synthetic multi-view image/text data.
//!
//! Each identity owns one latent attribute vector. Every view of that
//! identity produces an "image" through a view-specific linear map of the
//! full latent, and a "text" through one shared linear map applied to a
//! randomly masked copy of the latent: an annotator looking at view `v` only
//! describes the attributes visible from `v`. Two texts of the same identity
//! therefore agree only partially, which is exactly the weak-pair situation
//! the losses in this crate are built for.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "weakpair-dataset";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported dataset version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("line {line}: {msg}")]
    Header { line: usize, msg: String },
    #[error("record {record} (line {line}): {msg}")]
    Record { record: usize, line: usize, msg: String },
    #[error("cannot split: {0}")]
    Split(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub num_identities: usize,
    pub views_per_identity: usize,
    pub latent_dim: usize,
    pub raw_dim_image: usize,
    pub raw_dim_text: usize,
    pub view_noise: f64,
    pub annotation_mask_rate: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_identities: 250,
            views_per_identity: 4,
            latent_dim: 16,
            raw_dim_image: 64,
            raw_dim_text: 48,
            view_noise: 0.1,
            annotation_mask_rate: 0.3,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let counts = [
            ("num_identities", self.num_identities),
            ("views_per_identity", self.views_per_identity),
            ("latent_dim", self.latent_dim),
            ("raw_dim_image", self.raw_dim_image),
            ("raw_dim_text", self.raw_dim_text),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(DatasetError::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.view_noise.is_finite() && self.view_noise >= 0.0) {
            return Err(DatasetError::Config(format!(
                "view_noise must be a nonnegative real, got {}",
                self.view_noise
            )));
        }
        if !(0.0..1.0).contains(&self.annotation_mask_rate) {
            return Err(DatasetError::Config(format!(
                "annotation_mask_rate must lie in [0, 1), got {}",
                self.annotation_mask_rate
            )));
        }
        Ok(())
    }

    fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("num_identities", self.num_identities.to_string()),
            ("views_per_identity", self.views_per_identity.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("raw_dim_image", self.raw_dim_image.to_string()),
            ("raw_dim_text", self.raw_dim_text.to_string()),
            ("view_noise", format!("{:?}", self.view_noise)),
            ("annotation_mask_rate", format!("{:?}", self.annotation_mask_rate)),
            ("seed", self.seed.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub identity: u32,
    pub view: u32,
    pub image_raw: Vec<f64>,
    pub text_raw: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
    None,
}

impl SplitTag {
    fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
            SplitTag::None => "none",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitTag::Train),
            "test" => Some(SplitTag::Test),
            "none" => Some(SplitTag::None),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub gen_config: GenConfig,
    pub records: Vec<PairRecord>,
    pub split_tag: SplitTag,
}

impl DatasetManifest {
    /// Record indices grouped by identity, identities in ascending order.
    pub fn by_identity(&self) -> BTreeMap<u32, Vec<usize>> {
        group_by_identity(&self.records)
    }

    pub fn identities(&self) -> BTreeSet<u32> {
        self.records.iter().map(|r| r.identity).collect()
    }
}

pub fn group_by_identity(records: &[PairRecord]) -> BTreeMap<u32, Vec<usize>> {
    let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        map.entry(r.identity).or_default().push(i);
    }
    map
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect::<Vec<f64>>()
        })
        .collect()
}

fn apply(map: &[Vec<f64>], z: &[f64]) -> Vec<f64> {
    map.iter()
        .map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum())
        .collect()
}

/// Generates `num_identities × views_per_identity` records; a pure function
/// of `cfg`.
pub fn generate(cfg: &GenConfig) -> Result<DatasetManifest, DatasetError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 1.0 / (cfg.latent_dim as f64).sqrt();
    let text_map = gaussian_matrix(&mut rng, cfg.raw_dim_text, cfg.latent_dim, scale);
    let view_maps: Vec<_> = (0..cfg.views_per_identity)
        .map(|_| gaussian_matrix(&mut rng, cfg.raw_dim_image, cfg.latent_dim, scale))
        .collect();

    let mut records = Vec::with_capacity(cfg.num_identities * cfg.views_per_identity);
    for identity in 0..cfg.num_identities {
        let z: Vec<f64> = (0..cfg.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for (view, view_map) in view_maps.iter().enumerate() {
            let mut image_raw = apply(view_map, &z);
            for x in &mut image_raw {
                let e: f64 = StandardNormal.sample(&mut rng);
                *x += cfg.view_noise * e;
            }
            let masked: Vec<f64> = z
                .iter()
                .map(|&zi| {
                    if rng.random::<f64>() < cfg.annotation_mask_rate {
                        0.0
                    } else {
                        zi
                    }
                })
                .collect();
            let mut text_raw = apply(&text_map, &masked);
            for x in &mut text_raw {
                let e: f64 = StandardNormal.sample(&mut rng);
                *x += cfg.view_noise * e;
            }
            records.push(PairRecord {
                identity: identity as u32,
                view: view as u32,
                image_raw,
                text_raw,
            });
        }
    }
    Ok(DatasetManifest {
        version: FORMAT_VERSION,
        gen_config: cfg.clone(),
        records,
        split_tag: SplitTag::None,
    })
}

/// Identity-disjoint train/test split. The train side gets
/// `round(train_fraction · #identities)` identities, at least one and at
/// most all but one.
pub fn split(
    d: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::Split(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut ids: Vec<u32> = d.identities().into_iter().collect();
    if ids.len() < 2 {
        return Err(DatasetError::Split(format!(
            "need at least 2 identities, found {}",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = ((train_fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let train_ids: BTreeSet<u32> = ids[..n_train].iter().copied().collect();

    let (train, test): (Vec<_>, Vec<_>) = d.records.iter().cloned().partition(|r| train_ids.contains(&r.identity));
    let make = |records, split_tag| DatasetManifest {
        version: d.version,
        gen_config: d.gen_config.clone(),
        records,
        split_tag,
    };
    Ok((make(train, SplitTag::Train), make(test, SplitTag::Test)))
}

fn write_vector(out: &mut String, v: &[f64]) {
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        // 17 significant digits
        let _ = write!(out, "{x:.16e}");
    }
}

/// Renders the line-delimited dataset format.
pub fn to_text(d: &DatasetManifest) -> String {
    let mut out = format!("{MAGIC} version={} split={}", d.version, d.split_tag.as_str());
    for (k, v) in d.gen_config.to_pairs() {
        let _ = write!(out, " {k}={v}");
    }
    out.push('\n');
    for r in &d.records {
        let _ = write!(out, "{}\t{}\t", r.identity, r.view);
        write_vector(&mut out, &r.image_raw);
        out.push('\t');
        write_vector(&mut out, &r.text_raw);
        out.push('\n');
    }
    out
}

fn header_err(msg: impl Into<String>) -> DatasetError {
    DatasetError::Header {
        line: 1,
        msg: msg.into(),
    }
}

fn parse_header(line: &str) -> Result<(u32, SplitTag, GenConfig), DatasetError> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(header_err(format!("missing '{MAGIC}' header")));
    }
    let mut kv = BTreeMap::new();
    for p in parts {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| header_err(format!("expected key=value, got '{p}'")))?;
        if kv.insert(k, v).is_some() {
            return Err(header_err(format!("duplicate key '{k}'")));
        }
    }
    let mut take = |k: &str| kv.remove(k).ok_or_else(|| header_err(format!("missing key '{k}'")));
    let version: u32 = take("version")?
        .parse()
        .map_err(|_| header_err("version is not an integer"))?;
    if version != FORMAT_VERSION {
        return Err(DatasetError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let split_raw = take("split")?;
    let split_tag = SplitTag::parse(split_raw).ok_or_else(|| header_err(format!("bad split '{split_raw}'")))?;

    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, DatasetError> {
        v.parse().map_err(|_| header_err(format!("bad value for {k}: '{v}'")))
    }
    let cfg = GenConfig {
        num_identities: num("num_identities", take("num_identities")?)?,
        views_per_identity: num("views_per_identity", take("views_per_identity")?)?,
        latent_dim: num("latent_dim", take("latent_dim")?)?,
        raw_dim_image: num("raw_dim_image", take("raw_dim_image")?)?,
        raw_dim_text: num("raw_dim_text", take("raw_dim_text")?)?,
        view_noise: num("view_noise", take("view_noise")?)?,
        annotation_mask_rate: num("annotation_mask_rate", take("annotation_mask_rate")?)?,
        seed: num("seed", take("seed")?)?,
    };
    if let Some(k) = kv.keys().next() {
        return Err(header_err(format!("unknown key '{k}'")));
    }
    Ok((version, split_tag, cfg))
}

fn parse_vector(s: &str, dim: usize) -> Result<Vec<f64>, String> {
    let v = s
        .split(',')
        .map(|x| {
            x.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("bad decimal '{x}'"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if v.len() != dim {
        return Err(format!("expected {dim} values, found {}", v.len()));
    }
    Ok(v)
}

/// Parses the line-delimited dataset format.
pub fn from_text(text: &str) -> Result<DatasetManifest, DatasetError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| header_err("empty file"))?;
    let (version, split_tag, gen_config) = parse_header(header)?;
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (record, line) in lines.enumerate() {
        let line_no = record + 2;
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| DatasetError::Record {
            record,
            line: line_no,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let identity: u32 = fields[0]
            .parse()
            .map_err(|_| err(format!("bad identity '{}'", fields[0])))?;
        let view: u32 = fields[1]
            .parse()
            .map_err(|_| err(format!("bad view '{}'", fields[1])))?;
        let image_raw =
            parse_vector(fields[2], gen_config.raw_dim_image).map_err(|m| err(format!("image_raw: {m}")))?;
        let text_raw = parse_vector(fields[3], gen_config.raw_dim_text).map_err(|m| err(format!("text_raw: {m}")))?;
        if !seen.insert((identity, view)) {
            return Err(err(format!("duplicate (identity, view) = ({identity}, {view})")));
        }
        records.push(PairRecord {
            identity,
            view,
            image_raw,
            text_raw,
        });
    }
    Ok(DatasetManifest {
        version,
        gen_config,
        records,
        split_tag,
    })
}

pub fn write(d: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    fs::write(path, to_text(d)).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(seed: u64) -> GenConfig {
        GenConfig {
            num_identities: 4,
            views_per_identity: 2,
            latent_dim: 3,
            raw_dim_image: 5,
            raw_dim_text: 4,
            seed,
            ..GenConfig::default()
        }
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    }

    #[test]
    fn record_count() {
        let d = generate(&small(1)).unwrap();
        assert_eq!(d.records.len(), 8);
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small(9)).unwrap(), generate(&small(9)).unwrap());
        assert_ne!(generate(&small(9)).unwrap(), generate(&small(10)).unwrap());
    }

    #[test]
    fn noiseless_unmasked_text_is_view_invariant() {
        let cfg = GenConfig {
            view_noise: 0.0,
            annotation_mask_rate: 0.0,
            ..small(4)
        };
        let d = generate(&cfg).unwrap();
        for pair in d.records.chunks(2) {
            assert_eq!(pair[0].text_raw, pair[1].text_raw);
            assert_ne!(pair[0].image_raw, pair[1].image_raw);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let bad = GenConfig {
            annotation_mask_rate: 1.2,
            ..small(0)
        };
        assert!(matches!(generate(&bad), Err(DatasetError::Config(_))));
        let bad = GenConfig {
            annotation_mask_rate: 1.0,
            ..small(0)
        };
        assert!(bad.validate().is_err());
        let bad = GenConfig {
            views_per_identity: 0,
            ..small(0)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn weak_pair_signal_exists() {
        let cfg = GenConfig {
            num_identities: 150,
            views_per_identity: 2,
            ..GenConfig::default()
        };
        let d = generate(&cfg).unwrap();
        let same: Vec<f64> = d
            .records
            .chunks(2)
            .map(|p| cosine(&p[0].text_raw, &p[1].text_raw))
            .collect();
        let cross: Vec<f64> = d
            .records
            .chunks(2)
            .zip(d.records.chunks(2).skip(1))
            .map(|(a, b)| cosine(&a[0].text_raw, &b[1].text_raw))
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&same) < 1.0);
        assert!(mean(&same) > mean(&cross) + 0.3, "{} vs {}", mean(&same), mean(&cross));
    }

    #[test]
    fn split_counts_and_disjointness() {
        let cfg = GenConfig {
            num_identities: 10,
            ..small(2)
        };
        let d = generate(&cfg).unwrap();
        let (train, test) = split(&d, 0.8, 5).unwrap();
        assert_eq!(train.identities().len(), 8);
        assert_eq!(test.identities().len(), 2);
        assert!(train.identities().is_disjoint(&test.identities()));
        assert_eq!(train.records.len() + test.records.len(), d.records.len());
        assert_eq!(train.split_tag, SplitTag::Train);
        let (train2, _) = split(&d, 0.8, 5).unwrap();
        assert_eq!(train, train2);
    }

    #[test]
    fn split_needs_two_identities() {
        let cfg = GenConfig {
            num_identities: 1,
            ..small(2)
        };
        let d = generate(&cfg).unwrap();
        assert!(matches!(split(&d, 0.5, 0), Err(DatasetError::Split(_))));
        assert!(split(&generate(&small(1)).unwrap(), 1.0, 0).is_err());
    }

    #[test]
    fn empty_record_file_is_valid() {
        let mut d = generate(&small(3)).unwrap();
        d.records.clear();
        let back = from_text(&to_text(&d)).unwrap();
        assert!(back.records.is_empty());
        assert_eq!(back, d);
    }

    #[test]
    fn corrupted_record_names_index() {
        let d = generate(&small(3)).unwrap();
        let text = to_text(&d);
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[3] = lines[3].replacen(',', ",abc,", 1);
        let err = from_text(&lines.join("\n")).unwrap_err();
        match err {
            DatasetError::Record { record, line, .. } => {
                assert_eq!(record, 2);
                assert_eq!(line, 4);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_mismatch() {
        let d = generate(&small(3)).unwrap();
        let text = to_text(&d).replacen("version=1", "version=7", 1);
        assert!(matches!(from_text(&text), Err(DatasetError::Version { found: 7, .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        let d = generate(&small(12)).unwrap();
        write(&d, &path).unwrap();
        assert_eq!(read(&path).unwrap(), d);
    }

    proptest! {
        #[test]
        fn text_round_trip_is_lossless(seed in 0u64..1000, noise in 0.0f64..3.0) {
            let cfg = GenConfig { view_noise: noise, ..small(seed) };
            let d = generate(&cfg).unwrap();
            prop_assert_eq!(from_text(&to_text(&d)).unwrap(), d);
        }
    }
}
