//! Link-level scoring against ground truth.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::alignment::{Link, LinkSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub correct: usize,
    pub found: usize,
    pub gt: usize,
}

/// Ground truth for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct GtLinks<'a> {
    pub pair_id: &'a str,
    pub links: &'a [Link],
}

fn gt_index<'a>(gt: &'a [GtLinks<'a>]) -> HashMap<&'a str, &'a [Link]> {
    gt.iter().map(|g| (g.pair_id, g.links)).collect()
}

/// Counts correct/found/gt links. Null links (NONAME/NOFACE) count on both
/// sides iff `include_null`.
pub fn score_links(pred: &[LinkSet], gt: &[GtLinks<'_>], include_null: bool) -> Result<EvalCounts> {
    let by_id = gt_index(gt);
    let keep = |l: &Link| include_null || !l.is_null();
    let mut counts = EvalCounts::default();
    for g in gt {
        counts.gt += g.links.iter().filter(|l| keep(l)).collect::<HashSet<_>>().len();
    }
    for p in pred {
        let truth = by_id
            .get(p.pair_id.as_str())
            .ok_or_else(|| Error::contract(format!("no ground truth for pair {}", p.pair_id)))?;
        let truth: HashSet<&Link> = truth.iter().filter(|l| keep(l)).collect();
        let found: HashSet<&Link> = p.links.iter().map(|s| &s.link).filter(|l| keep(l)).collect();
        counts.found += found.len();
        counts.correct += found.intersection(&truth).count();
    }
    Ok(counts)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Zero denominators yield 0.
pub fn precision_recall_f1(c: &EvalCounts) -> Prf {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    f1_from(ratio(c.correct, c.found), ratio(c.correct, c.gt))
}

pub fn f1_from(precision: f64, recall: f64) -> Prf {
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Prf {
        precision,
        recall,
        f1,
    }
}

/// Fraction of ground-truth face links whose predicted name matches.
pub fn accuracy(pred: &[LinkSet], gt: &[GtLinks<'_>]) -> Result<f64> {
    let pred_by_id: HashMap<&str, &LinkSet> = pred.iter().map(|p| (p.pair_id.as_str(), p)).collect();
    let mut total = 0usize;
    let mut right = 0usize;
    for g in gt {
        let face_links: Vec<&Link> = g.links.iter().filter(|l| l.face().is_some()).collect();
        if face_links.is_empty() {
            continue;
        }
        let p = pred_by_id
            .get(g.pair_id)
            .ok_or_else(|| Error::contract(format!("no prediction for pair {}", g.pair_id)))?;
        for l in face_links {
            total += 1;
            if p.links.iter().any(|s| s.link == *l) {
                right += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { right as f64 / total as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub counts: EvalCounts,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    pub config_echo: serde_json::Value,
}

pub fn evaluate(
    pred: &[LinkSet],
    gt: &[GtLinks<'_>],
    include_null: bool,
    config_echo: serde_json::Value,
) -> Result<MetricsReport> {
    let counts = score_links(pred, gt, include_null)?;
    let prf = precision_recall_f1(&counts);
    let mut warnings = Vec::new();
    if counts.found == 0 {
        warnings.push("no links found; precision reported as 0".to_string());
    }
    if counts.gt == 0 {
        warnings.push("no ground-truth links; recall reported as 0".to_string());
    }
    Ok(MetricsReport {
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        accuracy: accuracy(pred, gt)?,
        counts,
        warnings,
        config_echo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::ScoredLink;

    fn set(id: &str, links: &[Link]) -> LinkSet {
        LinkSet {
            pair_id: id.to_string(),
            links: links.iter().map(|&link| ScoredLink { link, score: None }).collect(),
        }
    }

    fn fixture() -> (Vec<(String, Vec<Link>)>, Vec<LinkSet>) {
        use Link::*;
        let gt = vec![
            ("p1".to_string(), vec![FaceName { face: 0, name: 0 }, FaceName { face: 1, name: 1 }]),
            ("p2".to_string(), vec![FaceName { face: 0, name: 1 }, NameNoFace { name: 0 }]),
            ("p3".to_string(), vec![FaceNoName { face: 0 }, FaceName { face: 1, name: 0 }]),
        ];
        let pred = vec![
            // one wrong face->name
            set("p1", &[FaceName { face: 0, name: 0 }, FaceName { face: 1, name: 0 }, NameNoFace { name: 1 }]),
            // missed NOFACE: face 0 took name 0, name 1 left over
            set("p2", &[FaceName { face: 0, name: 0 }, NameNoFace { name: 1 }]),
            set("p3", &[FaceNoName { face: 0 }, FaceName { face: 1, name: 0 }]),
        ];
        (gt, pred)
    }

    fn gt_refs(gt: &[(String, Vec<Link>)]) -> Vec<GtLinks<'_>> {
        gt.iter().map(|(id, l)| GtLinks { pair_id: id, links: l }).collect()
    }

    #[test]
    fn perfect_prediction() {
        let (gt, _) = fixture();
        let pred: Vec<LinkSet> = gt.iter().map(|(id, l)| set(id, l)).collect();
        let c = score_links(&pred, &gt_refs(&gt), true).unwrap();
        assert_eq!(c, EvalCounts { correct: 6, found: 6, gt: 6 });
        let prf = precision_recall_f1(&c);
        assert_eq!((prf.precision, prf.recall, prf.f1), (1.0, 1.0, 1.0));
        assert_eq!(accuracy(&pred, &gt_refs(&gt)).unwrap(), 1.0);
    }

    #[test]
    fn hand_counted_fixture() {
        let (gt, pred) = fixture();
        // p1: 1 of 3 correct; p2: 0 of 2; p3: 2 of 2 -> correct 3, found 7, gt 6
        let c = score_links(&pred, &gt_refs(&gt), true).unwrap();
        assert_eq!(c, EvalCounts { correct: 3, found: 7, gt: 6 });
        // real links only: p1 1/2, p2 0/1, p3 1/1 -> correct 2, found 4, gt 4
        let c = score_links(&pred, &gt_refs(&gt), false).unwrap();
        assert_eq!(c, EvalCounts { correct: 2, found: 4, gt: 4 });
        // face-side gt links: p1 (2), p2 (1), p3 (2); correct p1 1, p2 0, p3 2
        assert!((accuracy(&pred, &gt_refs(&gt)).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn empty_predictions_and_zero_cases() {
        let (gt, _) = fixture();
        let c = score_links(&[], &gt_refs(&gt), true).unwrap();
        assert_eq!(c.found, 0);
        let prf = precision_recall_f1(&c);
        assert_eq!((prf.precision, prf.recall, prf.f1), (0.0, 0.0, 0.0));
        let report = evaluate(&[], &gt_refs(&gt), true, serde_json::Value::Null);
        assert!(report.is_err(), "accuracy needs predictions for every gt pair");
        let c = EvalCounts { correct: 0, found: 5, gt: 5 };
        let prf = precision_recall_f1(&c);
        assert_eq!((prf.precision, prf.recall, prf.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn reported_f1_formula() {
        let prf = f1_from(0.7696, 0.8511);
        assert!((prf.f1 - 0.8083).abs() < 1e-4, "{}", prf.f1);
    }

    #[test]
    fn accuracy_three_of_four() {
        use Link::*;
        let gt = vec![(
            "p".to_string(),
            vec![
                FaceName { face: 0, name: 0 },
                FaceName { face: 1, name: 1 },
                FaceName { face: 2, name: 2 },
                FaceNoName { face: 3 },
            ],
        )];
        let pred = vec![set(
            "p",
            &[
                FaceName { face: 0, name: 0 },
                FaceName { face: 1, name: 1 },
                FaceName { face: 2, name: 2 },
                FaceName { face: 3, name: 0 },
            ],
        )];
        assert!((accuracy(&pred, &gt_refs(&gt)).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn missing_ground_truth_is_an_error() {
        let (gt, _) = fixture();
        let pred = vec![set("nope", &[])];
        assert!(score_links(&pred, &gt_refs(&gt), true).is_err());
    }
}
