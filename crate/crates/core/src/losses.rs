//! Training objectives and their exact gradients.
//!
//! All set-to-set scores use the dense similarity: the mean, over the query
//! set, of each query item's best score against the key set. The `max` is
//! routed: during backward only the recorded argmax (lowest index on ties)
//! receives gradient.
//!
//! Every softmax-style loss here is the same column-wise contrastive form on a
//! square score matrix `M`: for each column `c`, `-log softmax(M[.., c])[c]`,
//! averaged over columns. The face-to-name loss uses `D_fn[image, caption]`,
//! the name-to-face loss uses `D_nf[caption, image]`, and the four stage-2
//! losses assemble their own matrices from set similarities.

use crate::error::{Error, Result};
use crate::model::{NameRecord, ProjectionTape, ProjectorStack};
use crate::numerics::{axpy, dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    FaceToName,
    NameToFace,
}

/// Dense similarity of a per-pair similarity matrix `A` (faces × names).
pub fn dense_similarity(a: &Matrix, direction: Direction) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::contract("dense similarity of an empty matrix"));
    }
    let value = match direction {
        Direction::FaceToName => {
            let total: f64 = (0..a.rows())
                .map(|i| a.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .sum();
            total / a.rows() as f64
        }
        Direction::NameToFace => {
            let total: f64 = (0..a.cols())
                .map(|j| (0..a.rows()).map(|i| a.get(i, j)).fold(f64::NEG_INFINITY, f64::max))
                .sum();
            total / a.cols() as f64
        }
    };
    Ok(value)
}

/// Dense similarity between two sets of projected items, with the argmax
/// chosen for every query item.
#[derive(Clone, Debug, PartialEq)]
pub struct SetSimilarity {
    pub value: f64,
    /// `(query item, best key item)` for each query item.
    pub route: Vec<(usize, usize)>,
}

pub fn set_similarity(vectors: &[Vec<f64>], query: &[usize], keys: &[usize]) -> Result<SetSimilarity> {
    if query.is_empty() || keys.is_empty() {
        return Err(Error::contract(format!(
            "dense similarity needs non-empty sets (query {}, keys {})",
            query.len(),
            keys.len()
        )));
    }
    let mut route = Vec::with_capacity(query.len());
    let mut total = 0.0;
    for &q in query {
        let mut best = f64::NEG_INFINITY;
        let mut best_k = keys[0];
        for &k in keys {
            let s = dot(&vectors[q], &vectors[k]);
            // strict comparison keeps the lowest index on ties
            if s > best {
                best = s;
                best_k = k;
            }
        }
        total += best;
        route.push((q, best_k));
    }
    Ok(SetSimilarity {
        value: total / query.len() as f64,
        route,
    })
}

impl SetSimilarity {
    fn backward(&self, g: f64, vectors: &[Vec<f64>], item_grads: &mut [Vec<f64>]) {
        if g == 0.0 {
            return;
        }
        let scale = g / self.route.len() as f64;
        for &(q, k) in &self.route {
            axpy(&mut item_grads[q], scale, &vectors[k]);
            axpy(&mut item_grads[k], scale, &vectors[q]);
        }
    }
}

/// Square matrix of set similarities that remembers its routing.
#[derive(Clone, Debug)]
pub struct CellMatrix {
    values: Matrix,
    cells: Vec<SetSimilarity>,
}

impl CellMatrix {
    fn build(n: usize, mut cell: impl FnMut(usize, usize) -> Result<SetSimilarity>) -> Result<Self> {
        let mut cells = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                cells.push(cell(r, c)?);
            }
        }
        let values = Matrix::from_fn(n, n, |r, c| cells[r * n + c].value);
        Ok(Self { values, cells })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn cell(&self, r: usize, c: usize) -> &SetSimilarity {
        &self.cells[r * self.values.cols() + c]
    }

    /// Argmax routes of every cell, in row-major order.
    pub fn routes(&self) -> impl Iterator<Item = &(usize, usize)> + '_ {
        self.cells.iter().flat_map(|c| c.route.iter())
    }

    /// Routes `dvalues` (gradient w.r.t. each cell value) to item gradients.
    pub fn backward(&self, dvalues: &Matrix, vectors: &[Vec<f64>], item_grads: &mut [Vec<f64>]) {
        let n = self.values.cols();
        for (idx, cell) in self.cells.iter().enumerate() {
            cell.backward(dvalues.get(idx / n, idx % n), vectors, item_grads);
        }
    }
}

/// Item indices (into a tape) belonging to one image-caption pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BagItems {
    pub faces: Vec<usize>,
    pub names: Vec<usize>,
}

/// `D_fn[k][l] = sim_d(F_k, N_l)` and `D_nf[l][k] = sim_d(N_l, F_k)` for all
/// image/caption combinations of a batch.
#[derive(Clone, Debug)]
pub struct BatchSimilarity {
    pub d_fn: CellMatrix,
    pub d_nf: CellMatrix,
}

impl BatchSimilarity {
    pub fn from_items(vectors: &[Vec<f64>], bags: &[BagItems]) -> Result<Self> {
        if bags.is_empty() {
            return Err(Error::contract("batch must contain at least one pair"));
        }
        let d_fn = CellMatrix::build(bags.len(), |k, l| {
            set_similarity(vectors, &bags[k].faces, &bags[l].names)
        })?;
        let d_nf = CellMatrix::build(bags.len(), |l, k| {
            set_similarity(vectors, &bags[l].names, &bags[k].faces)
        })?;
        Ok(Self { d_fn, d_nf })
    }

    pub fn size(&self) -> usize {
        self.d_fn.values().rows()
    }
}

/// A forward pass over a batch: the tape holding every projected item, the
/// per-pair item indices and the batch similarity matrices.
#[derive(Clone, Debug)]
pub struct ProjectedBatch {
    pub tape: ProjectionTape,
    pub bags: Vec<BagItems>,
    pub similarity: BatchSimilarity,
}

/// Projects every face and name of the batch and fills both `B×B` matrices.
pub fn batch_similarity(
    stack: &ProjectorStack,
    batch: &[(&[Vec<f64>], &[NameRecord])],
) -> Result<ProjectedBatch> {
    let mut tape = ProjectionTape::new();
    let mut bags = Vec::with_capacity(batch.len());
    for (faces, names) in batch {
        let faces = faces
            .iter()
            .map(|f| tape.push_face(stack, f))
            .collect::<Result<Vec<_>>>()?;
        let names = names
            .iter()
            .map(|n| tape.push_name(stack, &n.embedding))
            .collect::<Result<Vec<_>>>()?;
        bags.push(BagItems { faces, names });
    }
    let similarity = BatchSimilarity::from_items(tape.vectors(), &bags)?;
    Ok(ProjectedBatch {
        tape,
        bags,
        similarity,
    })
}

fn check_square(d: &Matrix) -> Result<()> {
    if d.rows() != d.cols() || d.rows() == 0 {
        return Err(Error::shape(format!(
            "contrastive loss needs a non-empty square matrix, got {}x{}",
            d.rows(),
            d.cols()
        )));
    }
    if !d.is_finite() {
        return Err(Error::numeric("similarity matrix contains non-finite values"));
    }
    Ok(())
}

/// Column-wise contrastive loss with its gradient w.r.t. every entry.
pub fn contrastive_with_grad(d: &Matrix) -> Result<(f64, Matrix)> {
    check_square(d)?;
    let b = d.rows();
    let mut grad = Matrix::zeros(b, b);
    let mut loss = 0.0;
    for c in 0..b {
        let max = (0..b).map(|r| d.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..b).map(|r| (d.get(r, c) - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - d.get(c, c);
        for r in 0..b {
            let p = (d.get(r, c) - lse).exp();
            let target = if r == c { 1.0 } else { 0.0 };
            grad.set(r, c, (p - target) / b as f64);
        }
    }
    Ok((loss / b as f64, grad))
}

pub fn contrastive(d: &Matrix) -> Result<f64> {
    contrastive_with_grad(d).map(|(l, _)| l)
}

/// Face-to-name contrastive loss on `D_fn` (softmax over images per caption).
pub fn contrastive_fn(d_fn: &Matrix) -> Result<f64> {
    contrastive(d_fn)
}

/// Name-to-face contrastive loss on `D_nf` (softmax over captions per image).
pub fn contrastive_nf(d_nf: &Matrix) -> Result<f64> {
    contrastive(d_nf)
}

/// Mean squared difference between the two diagonals, with gradients for both.
pub fn agreement_with_grad(d_nf: &Matrix, d_fn: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    if d_nf.rows() != d_fn.rows() || d_nf.cols() != d_fn.cols() || d_nf.rows() != d_nf.cols() {
        return Err(Error::shape(format!(
            "agreement loss needs equal square matrices, got {}x{} and {}x{}",
            d_nf.rows(),
            d_nf.cols(),
            d_fn.rows(),
            d_fn.cols()
        )));
    }
    let b = d_nf.rows();
    if b == 0 {
        return Err(Error::shape("agreement loss of an empty batch"));
    }
    let mut g_nf = Matrix::zeros(b, b);
    let mut g_fn = Matrix::zeros(b, b);
    let mut loss = 0.0;
    for k in 0..b {
        let diff = d_nf.get(k, k) - d_fn.get(k, k);
        loss += diff * diff;
        g_nf.set(k, k, 2.0 * diff / b as f64);
        g_fn.set(k, k, -2.0 * diff / b as f64);
    }
    Ok((loss / b as f64, g_nf, g_fn))
}

pub fn agreement_loss(d_nf: &Matrix, d_fn: &Matrix) -> Result<f64> {
    agreement_with_grad(d_nf, d_fn).map(|(l, _, _)| l)
}

/// Which terms of the stage-1 objective are active, and the agreement weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub use_fn: bool,
    pub use_nf: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.15,
            use_fn: true,
            use_nf: true,
        }
    }
}

/// Loss values of one step. Disabled terms are reported as zero so that
/// `total = l_fn + l_nf + alpha * l_agree` always holds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_fn: f64,
    pub l_nf: f64,
    pub l_agree: f64,
    pub total: f64,
    pub l_fnp_b: Option<f64>,
    pub l_fp_b: Option<f64>,
    pub l_stage2: Option<f64>,
}

/// Gradients of the stage-1 objective w.r.t. the batch similarity matrices.
#[derive(Clone, Debug)]
pub struct BatchGrads {
    pub d_fn: Matrix,
    pub d_nf: Matrix,
}

pub fn total_loss_with_grad(bs: &BatchSimilarity, weights: &LossWeights) -> Result<(LossBreakdown, BatchGrads)> {
    if !(weights.alpha >= 0.0) {
        return Err(Error::Config("alpha must be non-negative".into()));
    }
    let d_fn = bs.d_fn.values();
    let d_nf = bs.d_nf.values();
    let (l_fn, g_fn_c) = contrastive_with_grad(d_fn)?;
    let (l_nf, g_nf_c) = contrastive_with_grad(d_nf)?;
    let (l_agree, g_nf_a, g_fn_a) = agreement_with_grad(d_nf, d_fn)?;
    let b = d_fn.rows();
    let mut g_fn = Matrix::zeros(b, b);
    let mut g_nf = Matrix::zeros(b, b);
    let mut out = LossBreakdown::default();
    if weights.use_fn {
        out.l_fn = l_fn;
        axpy(g_fn.as_mut_slice(), 1.0, g_fn_c.as_slice());
    }
    if weights.use_nf {
        out.l_nf = l_nf;
        axpy(g_nf.as_mut_slice(), 1.0, g_nf_c.as_slice());
    }
    out.l_agree = l_agree;
    axpy(g_fn.as_mut_slice(), weights.alpha, g_fn_a.as_slice());
    axpy(g_nf.as_mut_slice(), weights.alpha, g_nf_a.as_slice());
    out.total = out.l_fn + out.l_nf + weights.alpha * out.l_agree;
    Ok((out, BatchGrads { d_fn: g_fn, d_nf: g_nf }))
}

/// Value-only total loss with both directions enabled.
pub fn total_loss(bs: &BatchSimilarity, alpha: f64) -> Result<LossBreakdown> {
    let weights = LossWeights {
        alpha,
        use_fn: true,
        use_nf: true,
    };
    total_loss_with_grad(bs, &weights).map(|(l, _)| l)
}

impl BatchSimilarity {
    /// Pushes matrix gradients down to per-item gradients.
    pub fn backward(&self, grads: &BatchGrads, vectors: &[Vec<f64>], item_grads: &mut [Vec<f64>]) {
        self.d_fn.backward(&grads.d_fn, vectors, item_grads);
        self.d_nf.backward(&grads.d_nf, vectors, item_grads);
    }
}

/// One bootstrapped sample: its matched faces `F'`, matched names `N'` and the
/// prototype faces `P` retrieved for those names. All entries index a tape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchedSample {
    pub faces: Vec<usize>,
    pub names: Vec<usize>,
    pub prototypes: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage2Weights {
    /// Matched faces/names against other samples' prototypes (both directions).
    pub use_fnp: bool,
    /// Matched faces against prototypes (both directions).
    pub use_fp: bool,
}

impl Default for Stage2Weights {
    fn default() -> Self {
        Self {
            use_fnp: true,
            use_fp: true,
        }
    }
}

/// Score matrices of the four stage-2 terms, each arranged for
/// [`contrastive_with_grad`].
#[derive(Clone, Debug)]
pub struct Stage2Similarity {
    /// `[i][i] = sim_d(F'_i, N'_i)`, `[j][i] = sim_d(P_j, N'_i)`.
    pub fn_p: CellMatrix,
    /// `[i][i] = sim_d(N'_i, F'_i)`, `[j][i] = sim_d(N'_i, P_j)`.
    pub nf_p: CellMatrix,
    /// `[j][i] = sim_d(F'_i, P_j)`.
    pub f_p: CellMatrix,
    /// `[j][i] = sim_d(P_j, F'_i)`.
    pub p_f: CellMatrix,
}

impl Stage2Similarity {
    pub fn from_items(vectors: &[Vec<f64>], samples: &[MatchedSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("stage-2 loss needs at least one matched sample"));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.faces.is_empty() || s.names.is_empty() {
                return Err(Error::contract(format!("matched sample {i} has an empty face or name set")));
            }
            if s.prototypes.is_empty() {
                return Err(Error::contract(format!("matched sample {i} has no prototypes")));
            }
        }
        let k = samples.len();
        let fn_p = CellMatrix::build(k, |j, i| {
            if i == j {
                set_similarity(vectors, &samples[i].faces, &samples[i].names)
            } else {
                set_similarity(vectors, &samples[j].prototypes, &samples[i].names)
            }
        })?;
        let nf_p = CellMatrix::build(k, |j, i| {
            if i == j {
                set_similarity(vectors, &samples[i].names, &samples[i].faces)
            } else {
                set_similarity(vectors, &samples[i].names, &samples[j].prototypes)
            }
        })?;
        let f_p = CellMatrix::build(k, |j, i| {
            set_similarity(vectors, &samples[i].faces, &samples[j].prototypes)
        })?;
        let p_f = CellMatrix::build(k, |j, i| {
            set_similarity(vectors, &samples[j].prototypes, &samples[i].faces)
        })?;
        Ok(Self { fn_p, nf_p, f_p, p_f })
    }
}

/// Stage-2 loss values plus the gradient routing needed for backward.
#[derive(Clone, Debug)]
pub struct Stage2Loss {
    pub l_fnp_b: f64,
    pub l_fp_b: f64,
    pub l_stage2: f64,
    grads: [Matrix; 4],
    sim: Stage2Similarity,
}

impl Stage2Loss {
    pub fn similarity(&self) -> &Stage2Similarity {
        &self.sim
    }

    pub fn backward(&self, vectors: &[Vec<f64>], item_grads: &mut [Vec<f64>]) {
        self.sim.fn_p.backward(&self.grads[0], vectors, item_grads);
        self.sim.nf_p.backward(&self.grads[1], vectors, item_grads);
        self.sim.f_p.backward(&self.grads[2], vectors, item_grads);
        self.sim.p_f.backward(&self.grads[3], vectors, item_grads);
    }
}

pub fn stage2_loss(vectors: &[Vec<f64>], samples: &[MatchedSample], weights: &Stage2Weights) -> Result<Stage2Loss> {
    let sim = Stage2Similarity::from_items(vectors, samples)?;
    let (l_fnp, g_fnp) = contrastive_with_grad(sim.fn_p.values())?;
    let (l_nfp, g_nfp) = contrastive_with_grad(sim.nf_p.values())?;
    let (l_fp, g_fp) = contrastive_with_grad(sim.f_p.values())?;
    let (l_pf, g_pf) = contrastive_with_grad(sim.p_f.values())?;
    let k = samples.len();
    let zero = || Matrix::zeros(k, k);
    let (l_fnp_b, g0, g1) = if weights.use_fnp {
        (l_fnp + l_nfp, g_fnp, g_nfp)
    } else {
        (0.0, zero(), zero())
    };
    let (l_fp_b, g2, g3) = if weights.use_fp {
        (l_fp + l_pf, g_fp, g_pf)
    } else {
        (0.0, zero(), zero())
    };
    Ok(Stage2Loss {
        l_fnp_b,
        l_fp_b,
        l_stage2: l_fnp_b + l_fp_b,
        grads: [g0, g1, g2, g3],
        sim,
    })
}

/// Bidirectional matched-set vs. prototype loss.
pub fn stage2_fnp(vectors: &[Vec<f64>], samples: &[MatchedSample]) -> Result<f64> {
    stage2_loss(vectors, samples, &Stage2Weights::default()).map(|l| l.l_fnp_b)
}

/// Bidirectional face vs. prototype loss.
pub fn stage2_fp(vectors: &[Vec<f64>], samples: &[MatchedSample]) -> Result<f64> {
    stage2_loss(vectors, samples, &Stage2Weights::default()).map(|l| l.l_fp_b)
}

pub fn stage2_total(vectors: &[Vec<f64>], samples: &[MatchedSample]) -> Result<f64> {
    stage2_loss(vectors, samples, &Stage2Weights::default()).map(|l| l.l_stage2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn dense_similarity_examples() {
        let a = m(&[&[0.7]]);
        assert_eq!(dense_similarity(&a, Direction::FaceToName).unwrap(), 0.7);
        assert_eq!(dense_similarity(&a, Direction::NameToFace).unwrap(), 0.7);

        let a = m(&[&[0.5, 0.2], &[0.4, 0.3]]);
        assert!((dense_similarity(&a, Direction::FaceToName).unwrap() - 0.45).abs() < 1e-12);
        assert!((dense_similarity(&a, Direction::NameToFace).unwrap() - 0.4).abs() < 1e-12);

        let p = m(&[&[0.3, 0.4], &[0.2, 0.5]]);
        assert!((dense_similarity(&p, Direction::FaceToName).unwrap() - 0.45).abs() < 1e-12);
        assert!((dense_similarity(&p, Direction::NameToFace).unwrap() - 0.4).abs() < 1e-12);

        assert!(dense_similarity(&Matrix::zeros(0, 3), Direction::FaceToName).is_err());
    }

    #[test]
    fn set_similarity_breaks_ties_low() {
        let v = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![2.0, 5.0]];
        let s = set_similarity(&v, &[0], &[1, 2]).unwrap();
        assert_eq!(s.route, vec![(0, 1)]);
        assert_eq!(s.value, 2.0);
    }

    #[test]
    fn contrastive_examples() {
        assert_eq!(contrastive_fn(&m(&[&[3.0]])).unwrap(), 0.0);
        let uni = m(&[&[0.4, 0.4], &[0.4, 0.4]]);
        assert!((contrastive_fn(&uni).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((contrastive_nf(&uni).unwrap() - 2f64.ln()).abs() < 1e-12);
        let eye = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((contrastive_fn(&eye).unwrap() - expected).abs() < 1e-12);
        assert!((contrastive_nf(&eye).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn contrastive_is_column_wise() {
        // column 0 softmax over [2, 0]; column 1 over [1, 1]
        let d = m(&[&[2.0, 1.0], &[0.0, 1.0]]);
        let c0 = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        let c1 = 2f64.ln();
        assert!((contrastive(&d).unwrap() - (c0 + c1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_rejects_bad_input() {
        assert!(matches!(contrastive(&Matrix::zeros(2, 3)), Err(Error::Shape(_))));
        assert!(matches!(
            contrastive(&m(&[&[f64::NAN]])),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn contrastive_survives_large_scores() {
        let d = m(&[&[1000.0, -1000.0], &[-1000.0, 1000.0]]);
        let l = contrastive(&d).unwrap();
        assert!((0.0..1e-12).contains(&l));
    }

    #[test]
    fn agreement_examples() {
        let a = m(&[&[0.3, 9.0], &[1.0, 0.7]]);
        assert_eq!(agreement_loss(&a, &a).unwrap(), 0.0);
        let nf = m(&[&[0.4, 0.0], &[0.0, 0.2]]);
        let fnm = m(&[&[0.1, 5.0], &[5.0, 0.2]]);
        assert!((agreement_loss(&nf, &fnm).unwrap() - 0.045).abs() < 1e-12);
        assert!(agreement_loss(&nf, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        // total = 0.3 + 0.5 + 0.15 * 0.2
        let b = LossBreakdown {
            l_fn: 0.3,
            l_nf: 0.5,
            l_agree: 0.2,
            ..Default::default()
        };
        let total = b.l_fn + b.l_nf + 0.15 * b.l_agree;
        assert!((total - 0.83).abs() < 1e-12);
        assert_eq!(LossWeights::default().alpha, 0.15);
    }

    #[test]
    fn ragged_batch_by_hand() {
        // pair 0: faces {0, 1}, names {2}; pair 1: faces {3}, names {4, 5}
        let v = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.5, 0.2],
            vec![1.0, 1.0],
            vec![0.1, 0.3],
            vec![-0.4, 0.6],
        ];
        let bags = vec![
            BagItems { faces: vec![0, 1], names: vec![2] },
            BagItems { faces: vec![3], names: vec![4, 5] },
        ];
        let bs = BatchSimilarity::from_items(&v, &bags).unwrap();
        // D_fn[0][0] = mean(0.5, 0.2) = 0.35; D_fn[0][1] = mean(max(.1,-.4), max(.3,.6)) = 0.35
        // D_fn[1][0] = 0.7; D_fn[1][1] = max(0.4, 0.2) = 0.4
        let expected_fn = [[0.35, 0.35], [0.7, 0.4]];
        // D_nf[0][0] = max(0.5, 0.2) = 0.5; D_nf[0][1] = 0.7
        // D_nf[1][0] = mean(max(.1,.3), max(-.4,.6)) = 0.45; D_nf[1][1] = mean(0.4, 0.2) = 0.3
        let expected_nf = [[0.5, 0.7], [0.45, 0.3]];
        for r in 0..2 {
            for c in 0..2 {
                assert!((bs.d_fn.values().get(r, c) - expected_fn[r][c]).abs() < 1e-12);
                assert!((bs.d_nf.values().get(r, c) - expected_nf[r][c]).abs() < 1e-12);
            }
        }
    }

    fn proto_fixture() -> (Vec<Vec<f64>>, Vec<MatchedSample>) {
        // sample 0: F' = {0}, N' = {1}, P = {2}; sample 1: F' = {3}, N' = {4}, P = {5}
        let v = vec![
            vec![1.0, 0.0],
            vec![0.8, 0.1],
            vec![0.9, 0.2],
            vec![0.0, 1.0],
            vec![0.2, 0.7],
            vec![0.1, 0.5],
        ];
        let s = vec![
            MatchedSample { faces: vec![0], names: vec![1], prototypes: vec![2] },
            MatchedSample { faces: vec![3], names: vec![4], prototypes: vec![5] },
        ];
        (v, s)
    }

    #[test]
    fn stage2_single_sample_is_zero() {
        let (v, s) = proto_fixture();
        let l = stage2_loss(&v, &s[..1], &Stage2Weights::default()).unwrap();
        assert_eq!(l.l_fnp_b, 0.0);
        assert_eq!(l.l_fp_b, 0.0);
        assert_eq!(l.l_stage2, 0.0);
    }

    #[test]
    fn stage2_hand_values() {
        let (v, s) = proto_fixture();
        let nll = |pos: f64, negs: &[f64]| {
            let denom: f64 = pos.exp() + negs.iter().map(|x| x.exp()).sum::<f64>();
            -(pos.exp() / denom).ln()
        };
        // singleton sets: every sim_d is a plain dot product
        let f0n0 = 0.8;
        let f1n1 = 0.7;
        let p1n0 = 0.1 * 0.8 + 0.5 * 0.1; // 0.13
        let p0n1 = 0.9 * 0.2 + 0.2 * 0.7; // 0.32
        let fnp = (nll(f0n0, &[p1n0]) + nll(f1n1, &[p0n1])) / 2.0;
        let expected_fnp_b = 2.0 * fnp; // both directions agree for singletons
        let f0p0 = 0.9;
        let f0p1 = 0.1;
        let f1p0 = 0.2;
        let f1p1 = 0.5;
        let fp = (nll(f0p0, &[f0p1]) + nll(f1p1, &[f1p0])) / 2.0;
        let expected_fp_b = 2.0 * fp;
        let l = stage2_loss(&v, &s, &Stage2Weights::default()).unwrap();
        assert!((l.l_fnp_b - expected_fnp_b).abs() < 1e-12);
        assert!((l.l_fp_b - expected_fp_b).abs() < 1e-12);
        assert!((l.l_stage2 - expected_fnp_b - expected_fp_b).abs() < 1e-12);
        assert!((stage2_total(&v, &s).unwrap() - l.l_stage2).abs() < 1e-15);
    }

    #[test]
    fn stage2_uniform_prototypes_give_log_k() {
        // three samples whose faces score identically against every prototype
        let v = vec![vec![1.0, 1.0], vec![0.5, 0.5], vec![1.0, 1.0], vec![0.5, 0.5], vec![1.0, 1.0], vec![0.5, 0.5]];
        let s: Vec<MatchedSample> = (0..3)
            .map(|i| MatchedSample { faces: vec![2 * i], names: vec![2 * i], prototypes: vec![2 * i + 1] })
            .collect();
        let l = stage2_fp(&v, &s).unwrap();
        assert!((l - 2.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn stage2_scaling_lowers_loss_when_positive_dominates() {
        let (v, s) = proto_fixture();
        let base = stage2_fnp(&v, &s).unwrap();
        // scale all vectors by sqrt(2) -> every similarity doubles
        let scaled: Vec<Vec<f64>> = v.iter().map(|x| x.iter().map(|y| y * 2f64.sqrt()).collect()).collect();
        let doubled = stage2_fnp(&scaled, &s).unwrap();
        assert!(doubled < base);
    }

    #[test]
    fn stage2_rejects_empty_sets() {
        let (v, mut s) = proto_fixture();
        s[1].faces.clear();
        assert!(matches!(stage2_total(&v, &s), Err(Error::Contract(_))));
        let (v, mut s) = proto_fixture();
        s[0].prototypes.clear();
        assert!(matches!(stage2_total(&v, &s), Err(Error::Contract(_))));
    }
}
