//! Browser demo: generate a synthetic corpus, train the projectors a few
//! epochs at a time, and inspect the alignment of individual pairs.
//!
//! [`Session`] holds the state and is plain Rust; [`Demo`] is the thin
//! wasm-bindgen wrapper the page talks to. Everything crosses the boundary as
//! JSON strings.

use facename_core::alignment::{align_dataset, align_faces_names, augment_with_noname, AlignOptions, Link};
use facename_core::datasets::{synth_generate, CountRange, Dataset, SynthConfig, TrainPair};
use facename_core::eval::{evaluate, GtLinks};
use facename_core::model::{similarity_matrix, ModelDims, ProjectorStack};
use facename_core::training::{fine_tune, TrainConfig};
use facename_core::{Error, Result};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

pub struct Session {
    data: Dataset,
    train: Vec<TrainPair>,
    cfg: TrainConfig,
    stack: ProjectorStack,
    epochs: usize,
}

impl Session {
    pub fn new(seed: u64, pairs: usize, identities: usize, max_faces: usize, sigma: f64, null_rate: f64) -> Result<Self> {
        let data = synth_generate(&SynthConfig {
            num_identities: identities,
            num_pairs: pairs,
            faces_per_pair: CountRange { min: 1, max: max_faces },
            sigma,
            noname_rate: null_rate,
            noface_rate: null_rate,
            d_f: 16,
            d_n: 24,
            seed,
            ..Default::default()
        })?;
        let cfg = TrainConfig {
            dims: ModelDims {
                d_f: 16,
                d_n: 24,
                d_p: 8,
                hidden: [24, 24],
                shared_common: true,
            },
            seed,
            ..Default::default()
        };
        cfg.validate()?;
        let stack = ProjectorStack::init(cfg.dims.clone(), seed)?;
        Ok(Self {
            train: data.train_pairs(),
            data,
            cfg,
            stack,
            epochs: 0,
        })
    }

    pub fn pair_count(&self) -> usize {
        self.data.pairs.len()
    }

    pub fn epochs_trained(&self) -> usize {
        self.epochs
    }

    /// Runs `epochs` more epochs and returns the last epoch's mean loss.
    pub fn train(&mut self, epochs: usize) -> Result<f64> {
        let out = fine_tune(
            self.stack.clone(),
            &self.train,
            &self.data.header.noname_embedding,
            &self.cfg,
            epochs,
            1,
            self.epochs,
        )?;
        self.stack = out.stack;
        self.epochs += epochs;
        Ok(out.log.last().map_or(f64::NAN, |e| e.total))
    }

    /// Similarity matrix, predicted links and ground truth of one pair.
    pub fn pair_view(&self, index: usize) -> Result<Value> {
        let pair = self
            .data
            .pairs
            .get(index)
            .ok_or_else(|| Error::Contract(format!("no pair {index}")))?;
        let noname = &self.data.header.noname_embedding;
        let names = augment_with_noname(&pair.names, noname)?;
        let sim = if pair.faces.is_empty() {
            Vec::new()
        } else {
            similarity_matrix(&self.stack, &pair.faces, &names)?.to_rows()
        };
        let predicted = align_faces_names(&self.stack, &pair.pair_id, &pair.faces, &pair.names, noname, &AlignOptions::default())?;
        let links = |ls: &mut dyn Iterator<Item = Link>| ls.map(link_json).collect::<Vec<_>>();
        Ok(json!({
            "pair_id": pair.pair_id,
            "faces": pair.faces.len(),
            "names": names.iter().map(|n| n.text.clone()).collect::<Vec<_>>(),
            "similarity": sim,
            "predicted": links(&mut predicted.links.iter().map(|l| l.link)),
            "truth": links(&mut pair.gt_links.iter().flatten().copied()),
        }))
    }

    pub fn metrics(&self) -> Result<Value> {
        let pred = align_dataset(&self.stack, &self.data, &AlignOptions::default())?;
        let gt: Vec<GtLinks> = self
            .data
            .pairs
            .iter()
            .map(|p| GtLinks {
                pair_id: &p.pair_id,
                links: p.gt_links.as_deref().unwrap_or(&[]),
            })
            .collect();
        let r = evaluate(&pred, &gt, true, Value::Null)?;
        Ok(json!({
            "precision": r.precision,
            "recall": r.recall,
            "f1": r.f1,
            "accuracy": r.accuracy,
            "epochs": self.epochs,
        }))
    }
}

fn link_json(l: Link) -> Value {
    match l {
        Link::FaceName { face, name } => json!({"face": face, "name": name}),
        Link::FaceNoName { face } => json!({"face": face, "name": "NONAME"}),
        Link::NameNoFace { name } => json!({"face": null, "name": name}),
    }
}

fn js_err(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    session: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, pairs: usize, identities: usize, max_faces: usize, sigma: f64, null_rate: f64) -> std::result::Result<Demo, JsError> {
        Session::new(seed.into(), pairs, identities, max_faces, sigma, null_rate)
            .map(|session| Demo { session })
            .map_err(js_err)
    }

    #[wasm_bindgen(js_name = pairCount)]
    pub fn pair_count(&self) -> usize {
        self.session.pair_count()
    }

    #[wasm_bindgen(js_name = epochsTrained)]
    pub fn epochs_trained(&self) -> usize {
        self.session.epochs_trained()
    }

    pub fn train(&mut self, epochs: usize) -> std::result::Result<f64, JsError> {
        self.session.train(epochs).map_err(js_err)
    }

    #[wasm_bindgen(js_name = pairView)]
    pub fn pair_view(&self, index: usize) -> std::result::Result<String, JsError> {
        self.session.pair_view(index).map(|v| v.to_string()).map_err(js_err)
    }

    pub fn metrics(&self) -> std::result::Result<String, JsError> {
        self.session.metrics().map(|v| v.to_string()).map_err(js_err)
    }
}
