//! Dataset model, JSON Lines ingestion, easy/rest splitting, batching and
//! the synthetic benchmark generator.
//!
//! File layout: line 1 is a header
//! `{"format_version", "d_f", "d_n", "noname_embedding": [...]}`; every other
//! non-blank line is one image-caption pair
//! `{"pair_id", "faces": [[...]], "names": [{"text", "emb": [...]}], "gt_links": [...]}`.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::alignment::{Link, LinkRecord, ScoredLink};
use crate::error::{Error, Result};
use crate::model::{NameRecord, NONAME_TEXT};
use crate::numerics::norm;
use crate::seed::{rng_for, rng_for_indexed};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub d_f: usize,
    pub d_n: usize,
    pub noname_embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageCaptionPair {
    pub pair_id: String,
    pub faces: Vec<Vec<f64>>,
    pub names: Vec<NameRecord>,
    pub gt_links: Option<Vec<Link>>,
}

/// A pair as the trainers see it: no ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPair {
    pub pair_id: String,
    pub faces: Vec<Vec<f64>>,
    pub names: Vec<NameRecord>,
}

impl ImageCaptionPair {
    pub fn to_train_pair(&self) -> TrainPair {
        TrainPair {
            pair_id: self.pair_id.clone(),
            faces: self.faces.clone(),
            names: self.names.clone(),
        }
    }

    /// Number of caption names, not counting a NONAME entry.
    pub fn real_name_count(&self) -> usize {
        self.names.iter().filter(|n| !n.is_noname).count()
    }

    pub fn has_null_gt(&self) -> bool {
        self.gt_links
            .as_ref()
            .is_some_and(|l| l.iter().any(Link::is_null))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub pairs: Vec<ImageCaptionPair>,
}

impl Dataset {
    pub fn train_pairs(&self) -> Vec<TrainPair> {
        self.pairs.iter().map(ImageCaptionPair::to_train_pair).collect()
    }

    pub fn with_pairs(&self, pairs: Vec<ImageCaptionPair>) -> Dataset {
        Dataset {
            header: self.header.clone(),
            pairs,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct NameJson {
    text: String,
    emb: Vec<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    is_noname: bool,
}

#[derive(Serialize, Deserialize)]
struct PairJson {
    pair_id: String,
    faces: Vec<Vec<f64>>,
    names: Vec<NameJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_links: Option<Vec<LinkRecord>>,
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn validate_links(links: &[Link], n_faces: usize, n_names: usize) -> std::result::Result<(), String> {
    let mut faces_seen = HashSet::new();
    for l in links {
        match *l {
            Link::FaceName { face, name } => {
                if face >= n_faces || name >= n_names {
                    return Err(format!("link {l} is out of range"));
                }
            }
            Link::FaceNoName { face } => {
                if face >= n_faces {
                    return Err(format!("link {l} is out of range"));
                }
            }
            Link::NameNoFace { name } => {
                if name >= n_names {
                    return Err(format!("link {l} is out of range"));
                }
            }
        }
        if let Some(f) = l.face() {
            if !faces_seen.insert(f) {
                return Err(format!("face {f} appears in more than one link"));
            }
        }
    }
    Ok(())
}

fn pair_from_json(p: PairJson, header: &DatasetHeader) -> std::result::Result<ImageCaptionPair, String> {
    let id = &p.pair_id;
    if p.faces.is_empty() && p.names.is_empty() {
        return Err(format!("pair {id} has neither faces nor names"));
    }
    for (i, f) in p.faces.iter().enumerate() {
        if f.len() != header.d_f {
            return Err(format!(
                "pair {id}: face {i} has {} dims, header says d_f = {}",
                f.len(),
                header.d_f
            ));
        }
        if !all_finite(f) {
            return Err(format!("pair {id}: face {i} has non-finite values"));
        }
    }
    let mut names = Vec::with_capacity(p.names.len());
    for (j, n) in p.names.into_iter().enumerate() {
        if n.emb.len() != header.d_n {
            return Err(format!(
                "pair {id}: name {j} ({}) has {} dims, header says d_n = {}",
                n.text,
                n.emb.len(),
                header.d_n
            ));
        }
        if !all_finite(&n.emb) {
            return Err(format!("pair {id}: name {j} has non-finite values"));
        }
        let is_noname = n.is_noname || n.text == NONAME_TEXT;
        names.push(NameRecord {
            text: n.text,
            embedding: n.emb,
            is_noname,
        });
    }
    if names.iter().filter(|n| n.is_noname).count() > 1 {
        return Err(format!("pair {id} lists NONAME more than once"));
    }
    let gt_links = match p.gt_links {
        None => None,
        Some(recs) => {
            let links = recs
                .iter()
                .map(|r| ScoredLink::try_from(r).map(|s| s.link))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| format!("pair {id}: {e}"))?;
            validate_links(&links, p.faces.len(), names.len()).map_err(|e| format!("pair {id}: {e}"))?;
            Some(links)
        }
    };
    Ok(ImageCaptionPair {
        pair_id: p.pair_id,
        faces: p.faces,
        names,
        gt_links,
    })
}

/// Parses and validates a dataset from any reader.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut header: Option<DatasetHeader> = None;
    let mut pairs = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse {
            line: line_no,
            message: e.to_string(),
        };
        match &header {
            None => {
                let h: DatasetHeader = serde_json::from_str(&line).map_err(parse_err)?;
                if h.format_version != DATASET_FORMAT_VERSION {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("unsupported format_version {}", h.format_version),
                    });
                }
                if h.d_f == 0 || h.d_n == 0 {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "d_f and d_n must be positive".into(),
                    });
                }
                if h.noname_embedding.len() != h.d_n || !all_finite(&h.noname_embedding) {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!(
                            "noname_embedding must hold {} finite values, got {}",
                            h.d_n,
                            h.noname_embedding.len()
                        ),
                    });
                }
                header = Some(h);
            }
            Some(h) => {
                let raw: PairJson = serde_json::from_str(&line).map_err(parse_err)?;
                if !ids.insert(raw.pair_id.clone()) {
                    return Err(Error::Validation(format!(
                        "line {line_no}: duplicate pair_id {}",
                        raw.pair_id
                    )));
                }
                let pair = pair_from_json(raw, h)
                    .map_err(|m| Error::Validation(format!("line {line_no}: {m}")))?;
                pairs.push(pair);
            }
        }
    }
    let header = header.ok_or(Error::Parse {
        line: 1,
        message: "missing dataset header".into(),
    })?;
    Ok(Dataset { header, pairs })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(BufReader::new(file))
}

pub fn write_dataset<W: Write>(dataset: &Dataset, mut w: W) -> Result<()> {
    serde_json::to_writer(&mut w, &dataset.header)?;
    w.write_all(b"\n")?;
    for p in &dataset.pairs {
        let rec = PairJson {
            pair_id: p.pair_id.clone(),
            faces: p.faces.clone(),
            names: p
                .names
                .iter()
                .map(|n| NameJson {
                    text: n.text.clone(),
                    emb: n.embedding.clone(),
                    is_noname: n.is_noname,
                })
                .collect(),
            gt_links: p.gt_links.as_ref().map(|links| {
                links
                    .iter()
                    .map(|&link| LinkRecord::from(&ScoredLink { link, score: None }))
                    .collect()
            }),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_dataset(dataset, std::io::BufWriter::new(file))
}

/// Easy subset, the rest, and the names seen in the easy subset.
#[derive(Clone, Debug, PartialEq)]
pub struct EasySplit {
    pub easy: Vec<ImageCaptionPair>,
    pub rest: Vec<ImageCaptionPair>,
    pub n_unique: BTreeSet<String>,
}

/// Pairs with `1 <= faces <= max_faces` and `1 <= real names <= max_names`
/// (and, with `exclude_null`, no null ground-truth link) form the easy subset.
pub fn make_easy_split(
    pairs: &[ImageCaptionPair],
    max_faces: usize,
    max_names: usize,
    exclude_null: bool,
) -> EasySplit {
    let (easy, rest): (Vec<_>, Vec<_>) = pairs.iter().cloned().partition(|p| {
        let n = p.faces.len();
        let m = p.real_name_count();
        (1..=max_faces).contains(&n) && (1..=max_names).contains(&m) && !(exclude_null && p.has_null_gt())
    });
    let n_unique = easy
        .iter()
        .flat_map(|p| p.names.iter().filter(|n| !n.is_noname).map(|n| n.text.clone()))
        .collect();
    EasySplit { easy, rest, n_unique }
}

/// Shuffled index batches for one epoch; the last batch may be short.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = rng_for_indexed(seed, "batch-shuffle", epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Inclusive integer range sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

impl CountRange {
    pub fn fixed(n: usize) -> Self {
        Self { min: n, max: n }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.gen_range(self.min..=self.max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub num_pairs: usize,
    pub faces_per_pair: CountRange,
    /// Upper bound on caption length; `None` means unbounded.
    pub max_names_per_pair: Option<usize>,
    /// Per-coordinate standard deviation of face noise before re-normalising.
    pub sigma: f64,
    pub noname_rate: f64,
    pub noface_rate: f64,
    pub d_f: usize,
    pub d_n: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 20,
            num_pairs: 200,
            faces_per_pair: CountRange::fixed(1),
            max_names_per_pair: None,
            sigma: 0.05,
            noname_rate: 0.0,
            noface_rate: 0.0,
            d_f: 32,
            d_n: 48,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_identities == 0 || self.num_pairs == 0 || self.d_f == 0 || self.d_n == 0 {
            return bad("identity, pair and dimension counts must be at least 1");
        }
        if self.faces_per_pair.min == 0 || self.faces_per_pair.min > self.faces_per_pair.max {
            return bad("faces per pair must be a range with 1 <= min <= max");
        }
        if self.max_names_per_pair == Some(0) {
            return bad("names per pair must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.noname_rate) || !(0.0..=1.0).contains(&self.noface_rate) {
            return bad("rates must lie in [0, 1]");
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return bad("sigma must be a finite non-negative number");
        }
        let needed = self.faces_per_pair.max + usize::from(self.noface_rate > 0.0);
        if needed > self.num_identities {
            return Err(Error::Config(format!(
                "a pair can need {needed} distinct identities but only {} exist",
                self.num_identities
            )));
        }
        Ok(())
    }
}

fn unit_normal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn identity_name(id: usize) -> String {
    format!("person_{id:04}")
}

/// Generates a dataset with exact ground truth. Identities are unit vectors in
/// face space with one fixed name embedding each (norm `sqrt(d_n)`); faces are
/// noisy, re-normalised copies of their identity centre.
pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut id_rng = rng_for(config.seed, "synth-identities");
    let centers: Vec<Vec<f64>> = (0..config.num_identities)
        .map(|_| unit_normal(&mut id_rng, config.d_f))
        .collect();
    let scale = (config.d_n as f64).sqrt();
    let name_embs: Vec<Vec<f64>> = (0..config.num_identities)
        .map(|_| unit_normal(&mut id_rng, config.d_n).into_iter().map(|x| x * scale).collect())
        .collect();
    let mut noname_rng = rng_for(config.seed, "synth-noname");
    let noname_embedding: Vec<f64> = (0..config.d_n).map(|_| noname_rng.sample(StandardNormal)).collect();

    let mut rng = rng_for(config.seed, "synth-pairs");
    let mut pairs = Vec::with_capacity(config.num_pairs);
    for p in 0..config.num_pairs {
        let n = config.faces_per_pair.sample(&mut rng);
        let extra = config.noface_rate > 0.0 && rng.gen_bool(config.noface_rate);
        let ids = rand::seq::index::sample(&mut rng, config.num_identities, n + usize::from(extra)).into_vec();
        let face_ids = &ids[..n];

        let faces: Vec<Vec<f64>> = face_ids
            .iter()
            .map(|&id| {
                let v: Vec<f64> = centers[id]
                    .iter()
                    .map(|c| c + config.sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let nv = norm(&v);
                v.into_iter().map(|x| x / nv).collect()
            })
            .collect();

        // caption entries: (identity, face index or None for a name without face)
        let mut caption: Vec<(usize, Option<usize>)> = Vec::new();
        for (i, &id) in face_ids.iter().enumerate() {
            let omitted = config.noname_rate > 0.0 && rng.gen_bool(config.noname_rate);
            if !omitted {
                caption.push((id, Some(i)));
            }
        }
        if extra {
            caption.push((ids[n], None));
        }
        if let Some(cap) = config.max_names_per_pair {
            if caption.len() > cap {
                if extra {
                    caption.pop();
                }
                caption.truncate(cap);
            }
        }
        caption.shuffle(&mut rng);

        let names: Vec<NameRecord> = caption
            .iter()
            .map(|&(id, _)| NameRecord::new(identity_name(id), name_embs[id].clone()))
            .collect();
        let mut gt = Vec::with_capacity(n + 1);
        for face in 0..n {
            match caption.iter().position(|&(_, f)| f == Some(face)) {
                Some(name) => gt.push(Link::FaceName { face, name }),
                None => gt.push(Link::FaceNoName { face }),
            }
        }
        for (name, &(_, f)) in caption.iter().enumerate() {
            if f.is_none() {
                gt.push(Link::NameNoFace { name });
            }
        }
        pairs.push(ImageCaptionPair {
            pair_id: format!("synth-{p:06}"),
            faces,
            names,
            gt_links: Some(gt),
        });
    }
    Ok(Dataset {
        header: DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            d_f: config.d_f,
            d_n: config.d_n,
            noname_embedding,
        },
        pairs,
    })
}
