//! Inference-time alignment: NONAME augmentation, per-face argmax, and the
//! NOFACE fallback for names no face picked.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::model::{similarity_matrix, NameRecord, ProjectorStack};
use crate::numerics::Matrix;

/// One face-name link. Name indices refer to the pair's name list as stored
/// in the dataset (the appended NONAME entry never appears as an index).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Link {
    FaceName { face: usize, name: usize },
    /// Face with no name in the caption.
    FaceNoName { face: usize },
    /// Caption name with no face in the image.
    NameNoFace { name: usize },
}

impl Link {
    pub fn face(&self) -> Option<usize> {
        match *self {
            Link::FaceName { face, .. } | Link::FaceNoName { face } => Some(face),
            Link::NameNoFace { .. } => None,
        }
    }

    pub fn is_null(&self) -> bool {
        !matches!(self, Link::FaceName { .. })
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Link::FaceName { face, name } => write!(f, "f{face}->n{name}"),
            Link::FaceNoName { face } => write!(f, "f{face}->NONAME"),
            Link::NameNoFace { name } => write!(f, "NOFACE<-n{name}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredLink {
    pub link: Link,
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkSet {
    pub pair_id: String,
    pub links: Vec<ScoredLink>,
}

/// Wire form: `{"face": i | null, "name": j | "NONAME" | "NOFACE", "score": s}`.
/// A name-without-face link is written with `"face": null` and the name index.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinkRecord {
    pub face: Option<FaceField>,
    pub name: NameField,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FaceField {
    Index(usize),
    Label(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NameField {
    Index(usize),
    Label(String),
}

pub const NOFACE_LABEL: &str = "NOFACE";
pub const NONAME_LABEL: &str = "NONAME";

impl From<&ScoredLink> for LinkRecord {
    fn from(l: &ScoredLink) -> Self {
        let (face, name) = match l.link {
            Link::FaceName { face, name } => (Some(FaceField::Index(face)), NameField::Index(name)),
            Link::FaceNoName { face } => (
                Some(FaceField::Index(face)),
                NameField::Label(NONAME_LABEL.to_string()),
            ),
            Link::NameNoFace { name } => (None, NameField::Index(name)),
        };
        LinkRecord {
            face,
            name,
            score: l.score,
        }
    }
}

impl TryFrom<&LinkRecord> for ScoredLink {
    type Error = String;

    fn try_from(r: &LinkRecord) -> std::result::Result<Self, String> {
        let face = match &r.face {
            None => None,
            Some(FaceField::Index(i)) => Some(*i),
            Some(FaceField::Label(s)) if s == NOFACE_LABEL => None,
            Some(FaceField::Label(s)) => return Err(format!("unknown face reference {s:?}")),
        };
        let link = match (face, &r.name) {
            (Some(face), NameField::Index(name)) => Link::FaceName { face, name: *name },
            (Some(face), NameField::Label(s)) if s == NONAME_LABEL => Link::FaceNoName { face },
            (None, NameField::Index(name)) => Link::NameNoFace { name: *name },
            (None, NameField::Label(s)) => {
                return Err(format!("a link without a face must name a caption index, got {s:?}"))
            }
            (Some(_), NameField::Label(s)) => return Err(format!("unknown name reference {s:?}")),
        };
        Ok(ScoredLink { link, score: r.score })
    }
}

/// Prediction line: `{"pair_id": ..., "links": [...]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinkSetRecord {
    pub pair_id: String,
    pub links: Vec<LinkRecord>,
}

impl From<&LinkSet> for LinkSetRecord {
    fn from(s: &LinkSet) -> Self {
        Self {
            pair_id: s.pair_id.clone(),
            links: s.links.iter().map(LinkRecord::from).collect(),
        }
    }
}

impl TryFrom<&LinkSetRecord> for LinkSet {
    type Error = String;

    fn try_from(r: &LinkSetRecord) -> std::result::Result<Self, String> {
        Ok(LinkSet {
            pair_id: r.pair_id.clone(),
            links: r.links.iter().map(ScoredLink::try_from).collect::<std::result::Result<_, _>>()?,
        })
    }
}

/// Appends a NONAME record unless one is already present.
pub fn augment_with_noname(names: &[NameRecord], noname_embedding: &[f64]) -> Result<Vec<NameRecord>> {
    if let Some(first) = names.first() {
        if first.embedding.len() != noname_embedding.len() {
            return Err(Error::shape(format!(
                "NONAME embedding has {} dims, names have {}",
                noname_embedding.len(),
                first.embedding.len()
            )));
        }
    }
    let mut out = names.to_vec();
    if !names.iter().any(|n| n.is_noname) {
        out.push(NameRecord::noname(noname_embedding.to_vec()));
    }
    Ok(out)
}

/// Links every face (row of `sim`) to its best name column. Columns flagged in
/// `is_noname` produce face→NONAME links. With `enable_noface`, real names
/// that no face picked are linked to NOFACE.
pub fn align_pair(sim: &Matrix, is_noname: &[bool], enable_noface: bool) -> Result<Vec<ScoredLink>> {
    if sim.is_empty() {
        return Err(Error::contract("cannot align an empty similarity matrix"));
    }
    if is_noname.len() != sim.cols() {
        return Err(Error::shape(format!(
            "{} NONAME flags for {} name columns",
            is_noname.len(),
            sim.cols()
        )));
    }
    let mut links = Vec::with_capacity(sim.rows() + sim.cols());
    let mut used = vec![false; sim.cols()];
    for face in 0..sim.rows() {
        let row = sim.row(face);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        used[best] = true;
        let link = if is_noname[best] {
            Link::FaceNoName { face }
        } else {
            Link::FaceName { face, name: best }
        };
        links.push(ScoredLink {
            link,
            score: Some(row[best]),
        });
    }
    if enable_noface {
        links.extend(
            (0..sim.cols())
                .filter(|&j| !used[j] && !is_noname[j])
                .map(|name| ScoredLink {
                    link: Link::NameNoFace { name },
                    score: None,
                }),
        );
    }
    Ok(links)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignOptions {
    pub enable_noface: bool,
    pub add_noname: bool,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            enable_noface: true,
            add_noname: true,
        }
    }
}

/// Aligns a single pair given raw faces and names.
pub fn align_faces_names(
    stack: &ProjectorStack,
    pair_id: &str,
    faces: &[Vec<f64>],
    names: &[NameRecord],
    noname_embedding: &[f64],
    options: &AlignOptions,
) -> Result<LinkSet> {
    let names = if options.add_noname {
        augment_with_noname(names, noname_embedding)?
    } else {
        names.to_vec()
    };
    let links = if faces.is_empty() || names.is_empty() {
        // nothing to score: only NOFACE fallbacks (or face->NONAME without names)
        let mut links: Vec<ScoredLink> = (0..faces.len())
            .map(|face| ScoredLink {
                link: Link::FaceNoName { face },
                score: None,
            })
            .collect();
        if options.enable_noface {
            links.extend(
                names
                    .iter()
                    .enumerate()
                    .filter(|(_, n)| !n.is_noname)
                    .map(|(name, _)| ScoredLink {
                        link: Link::NameNoFace { name },
                        score: None,
                    }),
            );
        }
        links
    } else {
        let sim = similarity_matrix(stack, faces, &names)?;
        let flags: Vec<bool> = names.iter().map(|n| n.is_noname).collect();
        align_pair(&sim, &flags, options.enable_noface)?
    };
    Ok(LinkSet {
        pair_id: pair_id.to_string(),
        links,
    })
}

pub fn align_dataset(stack: &ProjectorStack, dataset: &Dataset, options: &AlignOptions) -> Result<Vec<LinkSet>> {
    let dims = stack.dims();
    if dataset.header.d_f != dims.d_f || dataset.header.d_n != dims.d_n {
        return Err(Error::shape(format!(
            "dataset is {}/{} (faces/names) but the model expects {}/{}",
            dataset.header.d_f, dataset.header.d_n, dims.d_f, dims.d_n
        )));
    }
    dataset
        .pairs
        .iter()
        .map(|p| {
            align_faces_names(
                stack,
                &p.pair_id,
                &p.faces,
                &p.names,
                &dataset.header.noname_embedding,
                options,
            )
        })
        .collect()
}
