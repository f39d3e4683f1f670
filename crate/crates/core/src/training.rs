//! Training procedures: plain bidirectional contrastive training, the
//! heuristic two-stage pipeline, and two-stage training with bootstrapping
//! and prototype losses.
//!
//! Trainers only ever see [`TrainPair`]s, which carry no ground truth.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_faces_names, AlignOptions, Link};
use crate::datasets::{batch_indices, TrainPair};
use crate::error::{Error, Result};
use crate::losses::{
    stage2_loss, total_loss_with_grad, BagItems, BatchSimilarity, LossBreakdown, LossWeights, MatchedSample,
    Stage2Weights,
};
use crate::model::{ModelDims, NameRecord, ProjectionTape, ProjectorStack};
use crate::numerics::{adam_step, dot, AdamState};
use crate::seed::{derive_seed, rng_for, rng_for_indexed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeKind {
    RandomFace,
    AvgFace,
    MedoidFace,
    MatchedFace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dims: ModelDims,
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub seed: u64,
    pub prototype: PrototypeKind,
    pub add_noname: bool,
    pub add_noface_to_matched: bool,
    pub use_fn: bool,
    pub use_nf: bool,
    pub stage2_use_fnp: bool,
    pub stage2_use_fp: bool,
    /// Match known names with the frozen stage-1 model instead of the
    /// model being trained.
    pub frozen_matching: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dims: ModelDims::default(),
            alpha: 0.15,
            lr: 3e-4,
            batch_size: 20,
            epochs: 30,
            stage1_epochs: 15,
            stage2_epochs: 20,
            seed: 0,
            prototype: PrototypeKind::AvgFace,
            add_noname: true,
            add_noface_to_matched: false,
            use_fn: true,
            use_nf: true,
            stage2_use_fnp: true,
            stage2_use_fp: true,
            frozen_matching: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad("alpha must be non-negative");
        }
        if !self.use_fn && !self.use_nf {
            return bad("at least one contrastive direction must be enabled");
        }
        Ok(())
    }

    fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            use_fn: self.use_fn,
            use_nf: self.use_nf,
        }
    }

    fn stage2_weights(&self) -> Stage2Weights {
        Stage2Weights {
            use_fnp: self.stage2_use_fnp,
            use_fp: self.stage2_use_fp,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub l_fn: f64,
    pub l_nf: f64,
    pub l_agree: f64,
    pub l_stage2: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub stack: ProjectorStack,
    pub log: Vec<EpochLog>,
}

/// Matched face material handed to one optimisation step.
struct MatchedInput {
    faces: Vec<Vec<f64>>,
    names: Vec<Vec<f64>>,
    prototypes: Vec<Vec<f64>>,
}

struct Trainer {
    stack: ProjectorStack,
    adam: AdamState,
    weights: LossWeights,
    stage2: Stage2Weights,
    lr: f64,
}

#[derive(Default)]
struct EpochAccumulator {
    steps: usize,
    sum: EpochLog,
}

impl EpochAccumulator {
    fn add(&mut self, l: &LossBreakdown) {
        self.steps += 1;
        self.sum.l_fn += l.l_fn;
        self.sum.l_nf += l.l_nf;
        self.sum.l_agree += l.l_agree;
        self.sum.l_stage2 += l.l_stage2.unwrap_or(0.0);
        self.sum.total += l.total + l.l_stage2.unwrap_or(0.0);
    }

    fn finish(self, stage: u8, epoch: usize) -> EpochLog {
        let n = self.steps.max(1) as f64;
        EpochLog {
            stage,
            epoch,
            l_fn: self.sum.l_fn / n,
            l_nf: self.sum.l_nf / n,
            l_agree: self.sum.l_agree / n,
            l_stage2: self.sum.l_stage2 / n,
            total: self.sum.total / n,
        }
    }
}

impl Trainer {
    fn new(stack: ProjectorStack, cfg: &TrainConfig) -> Self {
        let adam = AdamState::new(&stack.param_shapes());
        Self {
            stack,
            adam,
            weights: cfg.loss_weights(),
            stage2: cfg.stage2_weights(),
            lr: cfg.lr,
        }
    }

    /// One optimiser step on `L(bags) + L_stage2(matched)`.
    fn step(
        &mut self,
        bags: &[(&[Vec<f64>], &[NameRecord])],
        matched: &[MatchedInput],
        context: &str,
    ) -> Result<Option<LossBreakdown>> {
        if bags.is_empty() && matched.is_empty() {
            return Ok(None);
        }
        let stack = &self.stack;
        let mut tape = ProjectionTape::new();
        let mut bag_items = Vec::with_capacity(bags.len());
        for (faces, names) in bags {
            let faces = faces.iter().map(|f| tape.push_face(stack, f)).collect::<Result<Vec<_>>>()?;
            let names = names
                .iter()
                .map(|n| tape.push_name(stack, &n.embedding))
                .collect::<Result<Vec<_>>>()?;
            bag_items.push(BagItems { faces, names });
        }
        let mut samples = Vec::with_capacity(matched.len());
        for m in matched {
            let faces = m.faces.iter().map(|f| tape.push_face(stack, f)).collect::<Result<Vec<_>>>()?;
            let names = m.names.iter().map(|n| tape.push_name(stack, n)).collect::<Result<Vec<_>>>()?;
            let prototypes = m
                .prototypes
                .iter()
                .map(|p| tape.push_face(stack, p))
                .collect::<Result<Vec<_>>>()?;
            samples.push(MatchedSample {
                faces,
                names,
                prototypes,
            });
        }

        let vectors = tape.vectors();
        let mut item_grads: Vec<Vec<f64>> = vectors.iter().map(|v| vec![0.0; v.len()]).collect();
        let mut breakdown = LossBreakdown::default();
        if !bag_items.is_empty() {
            let bs = BatchSimilarity::from_items(vectors, &bag_items)?;
            let (l, g) = total_loss_with_grad(&bs, &self.weights)?;
            bs.backward(&g, vectors, &mut item_grads);
            breakdown = l;
        }
        if !samples.is_empty() {
            let s2 = stage2_loss(vectors, &samples, &self.stage2)?;
            s2.backward(vectors, &mut item_grads);
            breakdown.l_fnp_b = Some(s2.l_fnp_b);
            breakdown.l_fp_b = Some(s2.l_fp_b);
            breakdown.l_stage2 = Some(s2.l_stage2);
        }
        let objective = breakdown.total + breakdown.l_stage2.unwrap_or(0.0);
        if !objective.is_finite() {
            return Err(Error::numeric(format!(
                "{context}: non-finite loss (l_fn={}, l_nf={}, l_agree={}, l_stage2={:?})",
                breakdown.l_fn, breakdown.l_nf, breakdown.l_agree, breakdown.l_stage2
            )));
        }
        let grads = tape.backward(stack, &item_grads)?;
        if !grads.is_finite() {
            return Err(Error::numeric(format!("{context}: non-finite gradient")));
        }
        let slices = grads.slices();
        adam_step(&mut self.stack.param_slices_mut(), &slices, &mut self.adam, self.lr)?;
        if !self.stack.is_finite() {
            return Err(Error::numeric(format!("{context}: parameters became non-finite")));
        }
        Ok(Some(breakdown))
    }
}

/// Faces and (optionally NONAME-augmented) names of a pair, or `None` when
/// the pair cannot form a dense similarity (no faces or no names).
fn training_view(pair: &TrainPair, noname: &[f64], add_noname: bool) -> Option<(Vec<Vec<f64>>, Vec<NameRecord>)> {
    if pair.faces.is_empty() {
        return None;
    }
    let mut names = pair.names.clone();
    if add_noname && !names.iter().any(|n| n.is_noname) {
        names.push(NameRecord::noname(noname.to_vec()));
    }
    if names.is_empty() {
        return None;
    }
    Some((pair.faces.clone(), names))
}

fn run_secla(
    stack: ProjectorStack,
    pairs: &[TrainPair],
    noname: &[f64],
    cfg: &TrainConfig,
    epochs: usize,
    stage: u8,
    first_epoch: usize,
) -> Result<TrainOutcome> {
    let views: Vec<_> = pairs
        .iter()
        .filter_map(|p| training_view(p, noname, cfg.add_noname))
        .collect();
    let mut trainer = Trainer::new(stack, cfg);
    let shuffle_seed = derive_seed(cfg.seed, &format!("stage{stage}-shuffle"));
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut acc = EpochAccumulator::default();
        for (b, idx) in batch_indices(views.len(), cfg.batch_size, shuffle_seed, epoch as u64)?
            .into_iter()
            .enumerate()
        {
            let bags: Vec<(&[Vec<f64>], &[NameRecord])> = idx
                .iter()
                .map(|&i| (views[i].0.as_slice(), views[i].1.as_slice()))
                .collect();
            let ctx = format!("stage {stage}, epoch {epoch}, batch {b}");
            if let Some(l) = trainer.step(&bags, &[], &ctx)? {
                acc.add(&l);
            }
        }
        log.push(acc.finish(stage, first_epoch + epoch));
    }
    Ok(TrainOutcome {
        stack: trainer.stack,
        log,
    })
}

fn check_pairs(pairs: &[TrainPair], noname: &[f64], dims: &ModelDims) -> Result<()> {
    if noname.len() != dims.d_n {
        return Err(Error::shape(format!(
            "NONAME embedding has {} dims, model expects {}",
            noname.len(),
            dims.d_n
        )));
    }
    for p in pairs {
        if p.faces.iter().any(|f| f.len() != dims.d_f) || p.names.iter().any(|n| n.embedding.len() != dims.d_n) {
            return Err(Error::shape(format!(
                "pair {} does not match model dimensions {}/{}",
                p.pair_id, dims.d_f, dims.d_n
            )));
        }
    }
    Ok(())
}

/// Trains from a fresh seeded initialisation for `cfg.epochs` epochs.
pub fn train_secla(pairs: &[TrainPair], noname: &[f64], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    check_pairs(pairs, noname, &cfg.dims)?;
    let stack = ProjectorStack::init(cfg.dims.clone(), cfg.seed)?;
    run_secla(stack, pairs, noname, cfg, cfg.epochs, 1, 0)
}

/// Continues training an existing stack.
pub fn fine_tune(
    stack: ProjectorStack,
    pairs: &[TrainPair],
    noname: &[f64],
    cfg: &TrainConfig,
    epochs: usize,
    stage: u8,
    first_epoch: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_pairs(pairs, noname, stack.dims())?;
    run_secla(stack, pairs, noname, cfg, epochs, stage, first_epoch)
}

/// Known-name matches of one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct NameMatch {
    /// `(face index, name index)` duos in name order.
    pub matched: Vec<(usize, usize)>,
    /// The pair without matched faces and matched names.
    pub residual: TrainPair,
}

/// For every name whose text is known, picks the face with the highest
/// similarity. Several names may pick the same face.
pub fn match_known_names(stack: &ProjectorStack, pair: &TrainPair, known: &BTreeSet<String>) -> Result<NameMatch> {
    let known_names: Vec<usize> = pair
        .names
        .iter()
        .enumerate()
        .filter(|(_, n)| !n.is_noname && known.contains(&n.text))
        .map(|(j, _)| j)
        .collect();
    if known_names.is_empty() || pair.faces.is_empty() {
        return Ok(NameMatch {
            matched: Vec::new(),
            residual: pair.clone(),
        });
    }
    let faces = pair
        .faces
        .iter()
        .map(|f| stack.project_face(f))
        .collect::<Result<Vec<_>>>()?;
    let mut matched = Vec::with_capacity(known_names.len());
    for j in known_names {
        let pn = stack.project_name(&pair.names[j])?;
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, pf) in faces.iter().enumerate() {
            let s = dot(pf, &pn);
            if s > best_score {
                best_score = s;
                best = i;
            }
        }
        matched.push((best, j));
    }
    let used_faces: HashSet<usize> = matched.iter().map(|&(f, _)| f).collect();
    let used_names: HashSet<usize> = matched.iter().map(|&(_, n)| n).collect();
    let residual = TrainPair {
        pair_id: pair.pair_id.clone(),
        faces: pair
            .faces
            .iter()
            .enumerate()
            .filter(|(i, _)| !used_faces.contains(i))
            .map(|(_, f)| f.clone())
            .collect(),
        names: pair
            .names
            .iter()
            .enumerate()
            .filter(|(j, _)| !used_names.contains(j))
            .map(|(_, n)| n.clone())
            .collect(),
    };
    Ok(NameMatch { matched, residual })
}

/// Faces banked per known name. Entries are keyed by their origin so the same
/// face is never banked twice under one name.
#[derive(Clone, Debug, Default)]
pub struct FaceBank {
    faces: BTreeMap<String, Vec<Vec<f64>>>,
    seen: HashSet<(String, String, usize)>,
}

impl FaceBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Banks `face` (face `face_idx` of pair `pair_id`) under `name`.
    /// Returns false when that face was already banked for the name.
    pub fn add(&mut self, name: &str, pair_id: &str, face_idx: usize, face: &[f64]) -> bool {
        if !self
            .seen
            .insert((name.to_string(), pair_id.to_string(), face_idx))
        {
            return false;
        }
        self.faces.entry(name.to_string()).or_default().push(face.to_vec());
        true
    }

    pub fn faces(&self, name: &str) -> Option<&[Vec<f64>]> {
        self.faces.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> BTreeSet<String> {
        self.faces.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.faces.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }
}

pub fn average_face(faces: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; faces[0].len()];
    for f in faces {
        for (o, v) in out.iter_mut().zip(f) {
            *o += v;
        }
    }
    let n = faces.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Face with the smallest mean Euclidean distance to the others (first on ties).
pub fn medoid_face(faces: &[Vec<f64>]) -> Vec<f64> {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut best = 0;
    let mut best_cost = f64::INFINITY;
    for (i, a) in faces.iter().enumerate() {
        let cost: f64 = faces.iter().map(|b| dist(a, b)).sum();
        if cost < best_cost {
            best_cost = cost;
            best = i;
        }
    }
    faces[best].clone()
}

fn matched_face(stack: &ProjectorStack, faces: &[Vec<f64>], name: &NameRecord) -> Result<Vec<f64>> {
    let pn = stack.project_name(name)?;
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, f) in faces.iter().enumerate() {
        let s = dot(&stack.project_face(f)?, &pn);
        if s > best_score {
            best_score = s;
            best = i;
        }
    }
    Ok(faces[best].clone())
}

/// One prototype face per requested name.
pub fn select_prototypes<R: Rng + ?Sized>(
    bank: &FaceBank,
    names: &[NameRecord],
    kind: PrototypeKind,
    stack: &ProjectorStack,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    names
        .iter()
        .map(|n| {
            let faces = bank
                .faces(&n.text)
                .filter(|f| !f.is_empty())
                .ok_or_else(|| Error::contract(format!("no banked faces for name {:?}", n.text)))?;
            Ok(match kind {
                PrototypeKind::RandomFace => faces[rng.gen_range(0..faces.len())].clone(),
                PrototypeKind::AvgFace => average_face(faces),
                PrototypeKind::MedoidFace => medoid_face(faces),
                PrototypeKind::MatchedFace => matched_face(stack, faces, n)?,
            })
        })
        .collect()
}

/// Outcome of a two-stage run.
#[derive(Clone, Debug)]
pub struct TwoStageOutcome {
    pub stage1: ProjectorStack,
    pub stack: ProjectorStack,
    pub log: Vec<EpochLog>,
    /// Number of known-name matches made on the rest of the data (pipeline)
    /// or banked faces after stage 2 (bootstrapping).
    pub matched: usize,
}

/// Two-stage training with simple heuristics: stage 1 on the easy subset,
/// known names in the rest matched with the stage-1 model and removed, then
/// fine-tuning on what remains.
pub fn train_pipeline_heuristic(
    easy: &[TrainPair],
    rest: &[TrainPair],
    n_unique: &BTreeSet<String>,
    noname: &[f64],
    cfg: &TrainConfig,
) -> Result<TwoStageOutcome> {
    cfg.validate()?;
    if easy.is_empty() {
        return Err(Error::contract("the easy subset is empty"));
    }
    check_pairs(easy, noname, &cfg.dims)?;
    check_pairs(rest, noname, &cfg.dims)?;
    let s1 = run_secla(
        ProjectorStack::init(cfg.dims.clone(), cfg.seed)?,
        easy,
        noname,
        cfg,
        cfg.stage1_epochs,
        1,
        0,
    )?;
    let mut matched = 0;
    let mut unmatch = Vec::with_capacity(rest.len());
    for p in rest {
        let m = match_known_names(&s1.stack, p, n_unique)?;
        matched += m.matched.len();
        if !m.residual.faces.is_empty() || !m.residual.names.is_empty() {
            unmatch.push(m.residual);
        }
    }
    let mut log = s1.log;
    let s2 = run_secla(
        s1.stack.clone(),
        &unmatch,
        noname,
        cfg,
        cfg.stage2_epochs,
        2,
        cfg.stage1_epochs,
    )?;
    log.extend(s2.log);
    Ok(TwoStageOutcome {
        stage1: s1.stack,
        stack: s2.stack,
        log,
        matched,
    })
}

/// Frozen NOFACE face-space vector with standard-normal entries.
pub fn noface_embedding(seed: u64, d_f: usize) -> Vec<f64> {
    let mut rng = rng_for(seed, "noface-embedding");
    (0..d_f).map(|_| rng.sample(StandardNormal)).collect()
}

/// Banks each easy-subset face under the real name it aligns to.
pub fn initial_bank(stack: &ProjectorStack, easy: &[TrainPair], noname: &[f64]) -> Result<FaceBank> {
    let mut bank = FaceBank::new();
    let opts = AlignOptions {
        enable_noface: false,
        add_noname: true,
    };
    for p in easy {
        let links = align_faces_names(stack, &p.pair_id, &p.faces, &p.names, noname, &opts)?;
        for l in links.links {
            if let Link::FaceName { face, name } = l.link {
                bank.add(&p.names[name].text, &p.pair_id, face, &p.faces[face]);
            }
        }
    }
    Ok(bank)
}

/// Two-stage training with bootstrapping. Stage 1 trains on the easy subset;
/// stage 2 walks the full dataset, matches known names with the current model,
/// trains matched duos with the prototype losses and the rest with the
/// stage-1 objective in one step per batch, and banks newly matched faces.
pub fn train_secla_b(
    all: &[TrainPair],
    easy: &[TrainPair],
    noname: &[f64],
    cfg: &TrainConfig,
) -> Result<TwoStageOutcome> {
    cfg.validate()?;
    if easy.is_empty() {
        return Err(Error::contract("the easy subset is empty"));
    }
    check_pairs(all, noname, &cfg.dims)?;
    check_pairs(easy, noname, &cfg.dims)?;
    let s1 = run_secla(
        ProjectorStack::init(cfg.dims.clone(), cfg.seed)?,
        easy,
        noname,
        cfg,
        cfg.stage1_epochs,
        1,
        0,
    )?;
    let mut bank = initial_bank(&s1.stack, easy, noname)?;
    let known = bank.names();
    let noface = noface_embedding(cfg.seed, cfg.dims.d_f);
    let frozen = s1.stack.clone();
    let mut trainer = Trainer::new(s1.stack.clone(), cfg);
    let mut log = s1.log;
    let shuffle_seed = derive_seed(cfg.seed, "stage2-shuffle");

    for epoch in 0..cfg.stage2_epochs {
        let mut proto_rng: ChaCha8Rng = rng_for_indexed(cfg.seed, "prototype-random", epoch as u64);
        // avg / medoid prototypes are refreshed once per epoch
        let mut epoch_protos: HashMap<String, Vec<f64>> = HashMap::new();
        let mut acc = EpochAccumulator::default();
        for (b, idx) in batch_indices(all.len(), cfg.batch_size, shuffle_seed, epoch as u64)?
            .into_iter()
            .enumerate()
        {
            let matcher = if cfg.frozen_matching { &frozen } else { &trainer.stack };
            let mut residual_views = Vec::new();
            let mut matched_inputs = Vec::new();
            let mut new_bank_entries = Vec::new();
            for &i in &idx {
                let pair = &all[i];
                let m = match_known_names(matcher, pair, &known)?;
                if !m.matched.is_empty() {
                    let mut face_ids: Vec<usize> = Vec::new();
                    for &(f, _) in &m.matched {
                        if !face_ids.contains(&f) {
                            face_ids.push(f);
                        }
                    }
                    let mut faces: Vec<Vec<f64>> = face_ids.iter().map(|&f| pair.faces[f].clone()).collect();
                    if cfg.add_noface_to_matched {
                        faces.push(noface.clone());
                    }
                    let names: Vec<NameRecord> = m.matched.iter().map(|&(_, n)| pair.names[n].clone()).collect();
                    let prototypes = match cfg.prototype {
                        PrototypeKind::AvgFace | PrototypeKind::MedoidFace => names
                            .iter()
                            .map(|n| match epoch_protos.get(&n.text) {
                                Some(p) => Ok(p.clone()),
                                None => {
                                    let p = select_prototypes(
                                        &bank,
                                        std::slice::from_ref(n),
                                        cfg.prototype,
                                        matcher,
                                        &mut proto_rng,
                                    )?
                                    .remove(0);
                                    epoch_protos.insert(n.text.clone(), p.clone());
                                    Ok(p)
                                }
                            })
                            .collect::<Result<Vec<_>>>()?,
                        kind => select_prototypes(&bank, &names, kind, &trainer.stack, &mut proto_rng)?,
                    };
                    for &(f, n) in &m.matched {
                        new_bank_entries.push((pair.names[n].text.clone(), pair.pair_id.clone(), f, pair.faces[f].clone()));
                    }
                    matched_inputs.push(MatchedInput {
                        faces,
                        names: names.into_iter().map(|n| n.embedding).collect(),
                        prototypes,
                    });
                }
                if let Some(view) = training_view(&m.residual, noname, cfg.add_noname) {
                    residual_views.push(view);
                }
            }
            let bags: Vec<(&[Vec<f64>], &[NameRecord])> = residual_views
                .iter()
                .map(|(f, n)| (f.as_slice(), n.as_slice()))
                .collect();
            let ctx = format!("stage 2, epoch {epoch}, batch {b}");
            if let Some(l) = trainer.step(&bags, &matched_inputs, &ctx)? {
                acc.add(&l);
            }
            for (name, pid, f, face) in new_bank_entries {
                bank.add(&name, &pid, f, &face);
            }
        }
        log.push(acc.finish(2, cfg.stage1_epochs + epoch));
    }
    Ok(TwoStageOutcome {
        stage1: s1.stack,
        stack: trainer.stack,
        log,
        matched: bank.len(),
    })
}
