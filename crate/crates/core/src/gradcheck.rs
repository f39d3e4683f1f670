//! Finite-difference verification of the training objectives against the
//! analytic gradients, over every projector parameter.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    stage2_loss, total_loss_with_grad, BagItems, BatchSimilarity, CellMatrix, LossWeights, MatchedSample, Stage2Weights,
};
use crate::model::{ModelDims, ProjectionTape, ProjectorStack};
use crate::numerics::grad_check;
use crate::seed::rng_for_indexed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub tolerance: f64,
    pub step: f64,
    pub seed: u64,
    pub alpha: f64,
    /// Deliberately corrupt the analytic gradients; the check must then fail.
    pub inject_fault: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 24,
            tolerance: 1e-4,
            step: 1e-5,
            seed: 0,
            alpha: 0.15,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub instance: usize,
    pub objective: String,
    pub params: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub passed: bool,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub checks: Vec<CheckResult>,
    /// Instances discarded because a probe crossed a kink.
    pub skipped: Vec<usize>,
}

const DIMS: (usize, usize, usize) = (8, 6, 4);
const MAX_DRAWS_PER_INSTANCE: usize = 4;

type Bag = (Vec<Vec<f64>>, Vec<Vec<f64>>);
/// (faces, names, prototypes)
type MatchedBag = (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>);

struct Instance {
    stack: ProjectorStack,
    bags: Vec<Bag>,
    matched: Vec<MatchedBag>,
}

fn gaussian_vecs<R: Rng>(rng: &mut R, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

fn random_instance(seed: u64, index: usize) -> Result<Instance> {
    let mut rng = rng_for_indexed(seed, "gradcheck-instance", index as u64);
    let (d_f, d_n, d_p) = DIMS;
    let mut dims = ModelDims::small(d_f, d_n, d_p);
    dims.shared_common = index % 3 != 2;
    let stack = ProjectorStack::init(dims, rng.gen())?;
    let b = rng.gen_range(2..=4);
    let bags = (0..b)
        .map(|_| {
            let n = rng.gen_range(1..=3);
            let m = rng.gen_range(1..=3);
            (gaussian_vecs(&mut rng, n, d_f), gaussian_vecs(&mut rng, m, d_n))
        })
        .collect();
    let samples = rng.gen_range(1..=3);
    let matched = (0..samples)
        .map(|_| {
            let n = rng.gen_range(1..=3);
            let m = rng.gen_range(1..=3);
            (
                gaussian_vecs(&mut rng, n, d_f),
                gaussian_vecs(&mut rng, m, d_n),
                gaussian_vecs(&mut rng, m, d_f),
            )
        })
        .collect();
    Ok(Instance { stack, bags, matched })
}

struct Evaluation {
    value: f64,
    grad: Vec<f64>,
    /// ReLU signs and argmax routes; the objective is smooth while this stays fixed.
    signature: Vec<usize>,
}

fn signature_of(tape: &ProjectionTape, matrices: &[&CellMatrix]) -> Vec<usize> {
    let mut sig: Vec<usize> = tape.activation_pattern().into_iter().map(usize::from).collect();
    for m in matrices {
        for &(q, k) in m.routes() {
            sig.push(q);
            sig.push(k);
        }
    }
    sig
}

fn stage1_objective(inst: &Instance, stack: &ProjectorStack, alpha: f64, grad_alpha: f64) -> Result<Evaluation> {
    let mut tape = ProjectionTape::new();
    let mut items = Vec::new();
    for (faces, names) in &inst.bags {
        items.push(BagItems {
            faces: faces.iter().map(|f| tape.push_face(stack, f)).collect::<Result<_>>()?,
            names: names.iter().map(|n| tape.push_name(stack, n)).collect::<Result<_>>()?,
        });
    }
    let bs = BatchSimilarity::from_items(tape.vectors(), &items)?;
    let weights = |alpha| LossWeights {
        alpha,
        use_fn: true,
        use_nf: true,
    };
    let (loss, _) = total_loss_with_grad(&bs, &weights(alpha))?;
    let (_, g) = total_loss_with_grad(&bs, &weights(grad_alpha))?;
    let mut item_grads: Vec<Vec<f64>> = tape.vectors().iter().map(|v| vec![0.0; v.len()]).collect();
    bs.backward(&g, tape.vectors(), &mut item_grads);
    Ok(Evaluation {
        value: loss.total,
        grad: tape.backward(stack, &item_grads)?.to_flat(),
        signature: signature_of(&tape, &[&bs.d_fn, &bs.d_nf]),
    })
}

fn stage2_objective(inst: &Instance, stack: &ProjectorStack, grad_weights: &Stage2Weights) -> Result<Evaluation> {
    let mut tape = ProjectionTape::new();
    let mut samples = Vec::new();
    for (faces, names, protos) in &inst.matched {
        samples.push(MatchedSample {
            faces: faces.iter().map(|f| tape.push_face(stack, f)).collect::<Result<_>>()?,
            names: names.iter().map(|n| tape.push_name(stack, n)).collect::<Result<_>>()?,
            prototypes: protos.iter().map(|p| tape.push_face(stack, p)).collect::<Result<_>>()?,
        });
    }
    let full = Stage2Weights {
        use_fnp: true,
        use_fp: true,
    };
    let loss = stage2_loss(tape.vectors(), &samples, &full)?;
    let for_grad = stage2_loss(tape.vectors(), &samples, grad_weights)?;
    let mut item_grads: Vec<Vec<f64>> = tape.vectors().iter().map(|v| vec![0.0; v.len()]).collect();
    for_grad.backward(tape.vectors(), &mut item_grads);
    let sim = loss.similarity();
    Ok(Evaluation {
        value: loss.l_stage2,
        grad: tape.backward(stack, &item_grads)?.to_flat(),
        signature: signature_of(&tape, &[&sim.fn_p, &sim.nf_p, &sim.f_p, &sim.p_f]),
    })
}

/// `None` when some finite-difference probe crosses a kink (a ReLU or argmax
/// switch), where central differences do not estimate the gradient.
fn check<F>(instance: usize, name: &str, stack: &ProjectorStack, h: f64, eval: F) -> Result<Option<CheckResult>>
where
    F: Fn(&ProjectorStack) -> Result<Evaluation>,
{
    let params = stack.to_flat();
    let base = eval(stack)?;
    let mut probe = stack.clone();
    let mut failure = None;
    let mut kinked = false;
    let report = grad_check(
        |p| match probe.set_flat(p).and_then(|_| eval(&probe)) {
            Ok(e) => {
                kinked |= e.signature != base.signature;
                e.value
            }
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        &params,
        &base.grad,
        h,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let report = report?;
    if kinked {
        return Ok(None);
    }
    Ok(Some(CheckResult {
        instance,
        objective: name.to_string(),
        params: params.len(),
        max_rel_error: report.max_rel_error,
        worst_index: report.worst_index,
    }))
}

/// Checks the stage-1 total loss and the stage-2 prototype loss on
/// `config.instances` random instances. Instances with a kink inside the
/// finite-difference step are replaced by fresh ones and counted.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    if config.instances == 0 {
        return Err(Error::Config("at least one gradcheck instance is required".into()));
    }
    if !(config.tolerance > 0.0) {
        return Err(Error::Config("tolerance must be positive".into()));
    }
    let grad_alpha = if config.inject_fault { 2.0 * config.alpha } else { config.alpha };
    let stage2_grad = Stage2Weights {
        use_fnp: true,
        use_fp: !config.inject_fault,
    };
    let mut checks = Vec::with_capacity(2 * config.instances);
    let mut skipped = Vec::new();
    let mut candidate = 0;
    while checks.len() < 2 * config.instances {
        if candidate >= MAX_DRAWS_PER_INSTANCE * config.instances {
            return Err(Error::numeric(format!(
                "{} of {candidate} gradcheck instances hit kinks",
                skipped.len()
            )));
        }
        let inst = random_instance(config.seed, candidate)?;
        let total = check(candidate, "total", &inst.stack, config.step, |s| {
            stage1_objective(&inst, s, config.alpha, grad_alpha)
        })?;
        let stage2 = check(candidate, "stage2", &inst.stack, config.step, |s| {
            stage2_objective(&inst, s, &stage2_grad)
        })?;
        match (total, stage2) {
            (Some(a), Some(b)) => checks.extend([a, b]),
            _ => skipped.push(candidate),
        }
        candidate += 1;
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        passed: max_rel_error < config.tolerance,
        tolerance: config.tolerance,
        max_rel_error,
        checks,
        skipped,
    })
}
