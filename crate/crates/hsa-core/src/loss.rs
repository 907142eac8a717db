//! The contrastive objectives: single-positive InfoNCE, the two-positive
//! pair losses, the lambda-weighted mixed-sample loss, per-stage companion
//! losses, and the weighted grand total.
//!
//! Everything here is a graph builder: callers hand in node ids for queries
//! (with gradient), keys and negatives (constant inputs), and get back the
//! scalar loss nodes plus a per-term breakdown for logging. Each softmax
//! ratio is evaluated through max-subtracted log-sum-exp inside the fused
//! InfoNCE node, so temperatures down to 0.01 are safe at single precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, NodeId, Scalar};

/// Weights of the three final-head terms; the reference setting is 1/3 each.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub anchor: f64,
    pub positive: f64,
    pub mixed: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            anchor: 1.0 / 3.0,
            positive: 1.0 / 3.0,
            mixed: 1.0 / 3.0,
        }
    }
}

/// Single-positive InfoNCE over one positive and the queue negatives.
pub fn info_nce(g: &mut Graph<impl Scalar>, q: NodeId, k_pos: NodeId, negatives: NodeId, tau: f64) -> NodeId {
    g.info_nce(q, k_pos, negatives, None, tau)
}

/// Two-positive loss: the average of the InfoNCE terms against each key,
/// each with its own denominator. Symmetric in the two keys.
pub fn pair_loss(
    g: &mut Graph<impl Scalar>,
    q: NodeId,
    k_first: NodeId,
    k_second: NodeId,
    negatives: NodeId,
    tau: f64,
) -> NodeId {
    let a = g.info_nce(q, k_first, negatives, None, tau);
    let b = g.info_nce(q, k_second, negatives, None, tau);
    let sum = g.add(a, b);
    g.scale(sum, 0.5)
}

/// Mixed-sample loss with a scalar combination ratio:
/// `lambda * nce(q_hat, k_a) + (1 - lambda) * nce(q_hat, k_p)`.
/// The ratio must be the post-clip adjusted lambda from the mask.
pub fn mixed_loss(
    g: &mut Graph<impl Scalar>,
    q_hat: NodeId,
    k_a: NodeId,
    k_p: NodeId,
    negatives: NodeId,
    tau: f64,
    lambda: f64,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda must lie in [0,1], got {lambda}"
        )));
    }
    let toward_a = g.info_nce(q_hat, k_a, negatives, None, tau);
    let toward_p = g.info_nce(q_hat, k_p, negatives, None, tau);
    let wa = g.scale(toward_a, lambda);
    let wp = g.scale(toward_p, 1.0 - lambda);
    Ok(g.add(wa, wp))
}

/// Batched mixed-sample loss where every row carries its own adjusted
/// lambda; `lambda` and `one_minus_lambda` are `[B]` weight inputs.
pub fn mixed_loss_weighted(
    g: &mut Graph<impl Scalar>,
    q_hat: NodeId,
    k_a: NodeId,
    k_p: NodeId,
    negatives: NodeId,
    tau: f64,
    lambda: NodeId,
    one_minus_lambda: NodeId,
) -> NodeId {
    let toward_a = g.info_nce(q_hat, k_a, negatives, Some(lambda), tau);
    let toward_p = g.info_nce(q_hat, k_p, negatives, Some(one_minus_lambda), tau);
    g.add(toward_a, toward_p)
}

/// Node ids for one loss head (final embedding or one companion stage).
/// Optional fields follow the configured variant: a missing positive query
/// reduces the anchor term to plain single-positive InfoNCE.
#[derive(Clone, Copy, Debug)]
pub struct HeadInputs {
    pub q_a: NodeId,
    pub q_p: Option<NodeId>,
    pub q_hat: Option<NodeId>,
    pub k_a: NodeId,
    pub k_p: Option<NodeId>,
    pub negatives: NodeId,
    /// Per-row adjusted lambda weights (with complement), required with `q_hat`.
    pub lambda: Option<(NodeId, NodeId)>,
}

/// Per-term scalar nodes of one head.
#[derive(Clone, Copy, Debug)]
pub struct HeadLossNodes {
    pub anchor: NodeId,
    pub positive: Option<NodeId>,
    pub mixed: Option<NodeId>,
    /// Weighted combination of the active terms.
    pub combined: NodeId,
}

/// Build one head's loss terms and their weighted combination. With every
/// term active this is exactly the three-way weighted sum; with terms
/// disabled by the variant flags the weights renormalize over the active
/// ones so the loss scale stays comparable across ablations.
pub fn head_loss<T: Scalar>(
    g: &mut Graph<T>,
    inputs: &HeadInputs,
    weights: &LossWeights,
    tau: f64,
) -> Result<HeadLossNodes> {
    let anchor = match inputs.k_p {
        Some(k_p) => pair_loss(g, inputs.q_a, inputs.k_a, k_p, inputs.negatives, tau),
        None => info_nce(g, inputs.q_a, inputs.k_a, inputs.negatives, tau),
    };

    let positive = match inputs.q_p {
        Some(q_p) => {
            let k_p = inputs.k_p.ok_or_else(|| {
                Error::InvalidArgument("positive query requires a positive key".into())
            })?;
            Some(pair_loss(g, q_p, k_p, inputs.k_a, inputs.negatives, tau))
        }
        None => None,
    };

    let mixed = match inputs.q_hat {
        Some(q_hat) => {
            let k_p = inputs.k_p.ok_or_else(|| {
                Error::InvalidArgument("mixed query requires a positive key".into())
            })?;
            let (lam, one_minus) = inputs.lambda.ok_or_else(|| {
                Error::InvalidArgument("mixed query requires lambda weights".into())
            })?;
            Some(mixed_loss_weighted(
                g, q_hat, inputs.k_a, k_p, inputs.negatives, tau, lam, one_minus,
            ))
        }
        None => None,
    };

    let mut terms: Vec<(NodeId, f64)> = vec![(anchor, weights.anchor)];
    if let Some(p) = positive {
        terms.push((p, weights.positive));
    }
    if let Some(m) = mixed {
        terms.push((m, weights.mixed));
    }
    let wsum: f64 = terms.iter().map(|&(_, w)| w).sum();
    if wsum <= 0.0 {
        return Err(Error::InvalidArgument(
            "active loss weights must sum to a positive value".into(),
        ));
    }
    let norm = if terms.len() == 3 { 1.0 } else { 1.0 / wsum };

    let mut combined: Option<NodeId> = None;
    for &(node, w) in &terms {
        let scaled = g.scale(node, w * norm);
        combined = Some(match combined {
            Some(acc) => g.add(acc, scaled),
            None => scaled,
        });
    }

    Ok(HeadLossNodes {
        anchor,
        positive,
        mixed,
        combined: combined.expect("at least the anchor term exists"),
    })
}

/// Every loss node of a full training step: the final head, the active
/// stage heads (combined with the fixed 1/3 stage weighting), and the grand
/// total `L + sum_l L^l`.
#[derive(Clone, Debug)]
pub struct TotalLossNodes {
    pub final_head: HeadLossNodes,
    pub stages: Vec<(usize, HeadLossNodes)>,
    pub total: NodeId,
}

/// Assemble the network total. Stage heads reuse the final head's variant
/// structure; their internal weighting is the uniform average the stage
/// formula prescribes.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    final_inputs: &HeadInputs,
    stage_inputs: &[(usize, HeadInputs)],
    weights: &LossWeights,
    tau: f64,
) -> Result<TotalLossNodes> {
    let final_head = head_loss(g, final_inputs, weights, tau)?;
    let stage_weights = LossWeights::default();

    let mut total = final_head.combined;
    let mut stages = Vec::with_capacity(stage_inputs.len());
    for (stage, inputs) in stage_inputs {
        let head = head_loss(g, inputs, &stage_weights, tau)?;
        total = g.add(total, head.combined);
        stages.push((*stage, head));
    }

    Ok(TotalLossNodes {
        final_head,
        stages,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Bindings, Graph, Mode, ParamStore, Tensor};
    use crate::rng::{stream_rng, StreamTag};
    use rand::Rng;

    // scalar-loop reference of the InfoNCE ratio, no log-sum-exp tricks
    fn nce_ref(q: &[f64], kp: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let pos = (d(q, kp) / tau).exp();
        let mut den = pos;
        for n in negs {
            den += (d(q, n) / tau).exp();
        }
        -(pos / den).ln()
    }

    fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        v.iter_mut().for_each(|x| *x /= n);
        v
    }

    struct Setup {
        g: Graph<f64>,
        bind: Bindings<f64>,
    }

    impl Setup {
        fn new() -> Self {
            Setup {
                g: Graph::new(Mode::Eval),
                bind: Bindings::new(),
            }
        }

        fn vec_input(&mut self, name: &str, rows: &[Vec<f64>]) -> NodeId {
            let d = rows[0].len();
            let data: Vec<f64> = rows.iter().flatten().copied().collect();
            self.bind
                .set(name, Tensor::new(vec![rows.len(), d], data).unwrap());
            self.g.input(name)
        }

        fn weight_input(&mut self, name: &str, w: &[f64]) -> NodeId {
            self.bind.set(name, Tensor::from_vec(w.to_vec()));
            self.g.input(name)
        }

        fn eval(&mut self, node: NodeId) -> f64 {
            let mut ps = ParamStore::new();
            self.g.forward(&mut ps, &self.bind).unwrap();
            self.g.value(node).unwrap().item().unwrap()
        }
    }

    #[test]
    fn uniform_logits_give_ln_k_plus_one() {
        let mut s = Setup::new();
        let q = s.vec_input("q", &[vec![1.0, 0.0, 0.0]]);
        let kp = s.vec_input("kp", &[vec![0.0, 1.0, 0.0]]);
        let negs = s.vec_input(
            "negs",
            &[
                vec![0.0, 0.0, 1.0],
                vec![0.0, 0.0, -1.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, -1.0, 0.0],
            ],
        );
        // wait: kp.q = 0 and negs.q = 0, tau=1, K=4
        let node = info_nce(&mut s.g, q, kp, negs, 1.0);
        let loss = s.eval(node);
        assert!((loss - 5.0f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn aligned_positive_with_orthogonal_negatives() {
        // q = k_pos, tau = 0.2, 4 orthogonal negatives:
        // loss = -log(e^5 / (e^5 + 4)) = ln(1 + 4 e^-5)
        let mut s = Setup::new();
        let q = s.vec_input("q", &[vec![1.0, 0.0, 0.0]]);
        let kp = s.vec_input("kp", &[vec![1.0, 0.0, 0.0]]);
        let negs = s.vec_input(
            "negs",
            &[
                vec![0.0, 1.0, 0.0],
                vec![0.0, -1.0, 0.0],
                vec![0.0, 0.0, 1.0],
                vec![0.0, 0.0, -1.0],
            ],
        );
        let node = info_nce(&mut s.g, q, kp, negs, 0.2);
        let loss = s.eval(node);
        let expect = (1.0 + 4.0 * (-5.0f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
        assert!((loss - 0.02660).abs() < 1e-5);
    }

    #[test]
    fn zero_negatives_give_zero_loss() {
        let mut s = Setup::new();
        let q = s.vec_input("q", &[vec![0.6, 0.8]]);
        let kp = s.vec_input("kp", &[vec![1.0, 0.0]]);
        s.bind.set("negs", Tensor::zeros(&[0, 2]));
        let negs = s.g.input("negs");
        let node = info_nce(&mut s.g, q, kp, negs, 0.2);
        assert_eq!(s.eval(node), 0.0);
    }

    #[test]
    fn pair_loss_with_equal_keys_collapses_to_info_nce() {
        let mut rng = stream_rng(1, StreamTag::Queue, 0, 0);
        let q_v = unit(&mut rng, 8);
        let k_v = unit(&mut rng, 8);
        let negs_v: Vec<Vec<f64>> = (0..6).map(|_| unit(&mut rng, 8)).collect();

        let mut s = Setup::new();
        let q = s.vec_input("q", &[q_v.clone()]);
        let ka = s.vec_input("ka", &[k_v.clone()]);
        let negs = s.vec_input("negs", &negs_v);
        let pair = pair_loss(&mut s.g, q, ka, ka, negs, 0.2);
        let single = info_nce(&mut s.g, q, ka, negs, 0.2);
        let mut ps = ParamStore::new();
        s.g.forward(&mut ps, &s.bind).unwrap();
        let pv = s.g.value(pair).unwrap().item().unwrap();
        let sv = s.g.value(single).unwrap().item().unwrap();
        assert!((pv - sv).abs() < 1e-12);
    }

    #[test]
    fn pair_loss_is_symmetric_in_the_keys() {
        let mut rng = stream_rng(2, StreamTag::Queue, 0, 0);
        let mut s = Setup::new();
        let q = s.vec_input("q", &[unit(&mut rng, 8)]);
        let ka = s.vec_input("ka", &[unit(&mut rng, 8)]);
        let kp = s.vec_input("kp", &[unit(&mut rng, 8)]);
        let negs_v: Vec<Vec<f64>> = (0..5).map(|_| unit(&mut rng, 8)).collect();
        let negs = s.vec_input("negs", &negs_v);
        let ab = pair_loss(&mut s.g, q, ka, kp, negs, 0.15);
        let ba = pair_loss(&mut s.g, q, kp, ka, negs, 0.15);
        let mut ps = ParamStore::new();
        s.g.forward(&mut ps, &s.bind).unwrap();
        assert_eq!(
            s.g.value(ab).unwrap().item().unwrap(),
            s.g.value(ba).unwrap().item().unwrap()
        );
    }

    #[test]
    fn mixed_loss_boundaries_and_affinity() {
        let mut rng = stream_rng(3, StreamTag::Queue, 0, 0);
        let mut s = Setup::new();
        let qh = s.vec_input("qh", &[unit(&mut rng, 8)]);
        let ka = s.vec_input("ka", &[unit(&mut rng, 8)]);
        let kp = s.vec_input("kp", &[unit(&mut rng, 8)]);
        let negs_v: Vec<Vec<f64>> = (0..7).map(|_| unit(&mut rng, 8)).collect();
        let negs = s.vec_input("negs", &negs_v);

        let at_one = mixed_loss(&mut s.g, qh, ka, kp, negs, 0.2, 1.0).unwrap();
        let at_zero = mixed_loss(&mut s.g, qh, ka, kp, negs, 0.2, 0.0).unwrap();
        let at_lambda = mixed_loss(&mut s.g, qh, ka, kp, negs, 0.2, 0.37).unwrap();
        let nce_a = info_nce(&mut s.g, qh, ka, negs, 0.2);
        let nce_p = info_nce(&mut s.g, qh, kp, negs, 0.2);

        let mut ps = ParamStore::new();
        s.g.forward(&mut ps, &s.bind).unwrap();
        let v = |n: NodeId| s.g.value(n).unwrap().item().unwrap();

        assert!((v(at_one) - v(nce_a)).abs() < 1e-12);
        assert!((v(at_zero) - v(nce_p)).abs() < 1e-12);
        let affine = 0.37 * v(at_one) + (1.0 - 0.37) * v(at_zero);
        assert!((v(at_lambda) - affine).abs() < 1e-12);
        let mean = 0.5 * (v(at_one) + v(at_zero));
        let at_half = mixed_loss(&mut s.g, qh, ka, kp, negs, 0.2, 0.5).unwrap();
        s.g.forward(&mut ps, &s.bind).unwrap();
        assert!((s.g.value(at_half).unwrap().item().unwrap() - mean).abs() < 1e-12);

        assert!(mixed_loss(&mut s.g, qh, ka, kp, negs, 0.2, 1.2).is_err());
    }

    #[test]
    fn full_head_matches_scalar_loop_oracle() {
        // Eqs: anchor pair, positive pair, mixed, and the weighted total,
        // each against an independent scalar-loop implementation.
        let mut rng = stream_rng(4, StreamTag::Queue, 0, 0);
        for trial in 0..100 {
            let d = 4 + (trial % 5);
            let kn = 1 + (trial % 8);
            let tau = [0.07, 0.2, 1.0][trial % 3];
            let lambda: f64 = rng.gen_range(0.0..1.0);

            let q_a = unit(&mut rng, d);
            let q_p = unit(&mut rng, d);
            let q_h = unit(&mut rng, d);
            let k_a = unit(&mut rng, d);
            let k_p = unit(&mut rng, d);
            let negs: Vec<Vec<f64>> = (0..kn).map(|_| unit(&mut rng, d)).collect();

            let l_qa_ref = 0.5 * (nce_ref(&q_a, &k_a, &negs, tau) + nce_ref(&q_a, &k_p, &negs, tau));
            let l_qp_ref = 0.5 * (nce_ref(&q_p, &k_p, &negs, tau) + nce_ref(&q_p, &k_a, &negs, tau));
            let l_qh_ref =
                lambda * nce_ref(&q_h, &k_a, &negs, tau) + (1.0 - lambda) * nce_ref(&q_h, &k_p, &negs, tau);
            let total_ref = (l_qa_ref + l_qp_ref + l_qh_ref) / 3.0;

            let mut s = Setup::new();
            let qa = s.vec_input("qa", &[q_a.clone()]);
            let qp = s.vec_input("qp", &[q_p.clone()]);
            let qh = s.vec_input("qh", &[q_h.clone()]);
            let ka = s.vec_input("ka", &[k_a.clone()]);
            let kp = s.vec_input("kp", &[k_p.clone()]);
            let ng = s.vec_input("negs", &negs);
            let lam = s.weight_input("lam", &[lambda]);
            let oml = s.weight_input("oml", &[1.0 - lambda]);

            let head = head_loss(
                &mut s.g,
                &HeadInputs {
                    q_a: qa,
                    q_p: Some(qp),
                    q_hat: Some(qh),
                    k_a: ka,
                    k_p: Some(kp),
                    negatives: ng,
                    lambda: Some((lam, oml)),
                },
                &LossWeights::default(),
                tau,
            )
            .unwrap();

            let mut ps = ParamStore::new();
            s.g.forward(&mut ps, &s.bind).unwrap();
            let v = |n: NodeId| s.g.value(n).unwrap().item().unwrap();
            assert!((v(head.anchor) - l_qa_ref).abs() < 1e-12, "trial {trial} anchor");
            assert!(
                (v(head.positive.unwrap()) - l_qp_ref).abs() < 1e-12,
                "trial {trial} positive"
            );
            assert!((v(head.mixed.unwrap()) - l_qh_ref).abs() < 1e-12, "trial {trial} mixed");
            assert!((v(head.combined) - total_ref).abs() < 1e-12, "trial {trial} combined");
        }
    }

    #[test]
    fn total_with_uniform_logits_and_two_stages_is_three_ln_five() {
        // all dot products zero, tau 1, K=4: every head contributes ln 5
        let mut s = Setup::new();
        let e = |i: usize| {
            let mut v = vec![0.0; 10];
            v[i] = 1.0;
            v
        };
        let orth_negs: Vec<Vec<f64>> = (4..8).map(e).collect();

        let mut mk_head = |s: &mut Setup, tag: &str| {
            let qa = s.vec_input(&format!("{tag}qa"), &[e(0)]);
            let qp = s.vec_input(&format!("{tag}qp"), &[e(1)]);
            let qh = s.vec_input(&format!("{tag}qh"), &[e(2)]);
            let ka = s.vec_input(&format!("{tag}ka"), &[e(3)]);
            let kp = s.vec_input(&format!("{tag}kp"), &[e(9)]);
            let ng = s.vec_input(&format!("{tag}negs"), &orth_negs);
            let lam = s.weight_input(&format!("{tag}lam"), &[0.5]);
            let oml = s.weight_input(&format!("{tag}oml"), &[0.5]);
            HeadInputs {
                q_a: qa,
                q_p: Some(qp),
                q_hat: Some(qh),
                k_a: ka,
                k_p: Some(kp),
                negatives: ng,
                lambda: Some((lam, oml)),
            }
        };

        let final_inputs = mk_head(&mut s, "f.");
        let s2 = mk_head(&mut s, "s2.");
        let s3 = mk_head(&mut s, "s3.");
        let nodes = total_loss(
            &mut s.g,
            &final_inputs,
            &[(2, s2), (3, s3)],
            &LossWeights::default(),
            1.0,
        )
        .unwrap();
        let total = s.eval(nodes.total);
        assert!((total - 3.0 * 5.0f64.ln()).abs() < 1e-12, "{total}");
    }

    #[test]
    fn equal_thirds_weighting_is_the_arithmetic_mean() {
        let mut rng = stream_rng(5, StreamTag::Queue, 0, 0);
        let mut s = Setup::new();
        let qa = s.vec_input("qa", &[unit(&mut rng, 6)]);
        let qp = s.vec_input("qp", &[unit(&mut rng, 6)]);
        let qh = s.vec_input("qh", &[unit(&mut rng, 6)]);
        let ka = s.vec_input("ka", &[unit(&mut rng, 6)]);
        let kp = s.vec_input("kp", &[unit(&mut rng, 6)]);
        let negs_v: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 6)).collect();
        let ng = s.vec_input("negs", &negs_v);
        let lam = s.weight_input("lam", &[0.25]);
        let oml = s.weight_input("oml", &[0.75]);
        let head = head_loss(
            &mut s.g,
            &HeadInputs {
                q_a: qa,
                q_p: Some(qp),
                q_hat: Some(qh),
                k_a: ka,
                k_p: Some(kp),
                negatives: ng,
                lambda: Some((lam, oml)),
            },
            &LossWeights::default(),
            0.2,
        )
        .unwrap();
        let mut ps = ParamStore::new();
        s.g.forward(&mut ps, &s.bind).unwrap();
        let v = |n: NodeId| s.g.value(n).unwrap().item().unwrap();
        let mean = (v(head.anchor) + v(head.positive.unwrap()) + v(head.mixed.unwrap())) / 3.0;
        assert!((v(head.combined) - mean).abs() < 1e-12);
    }

    #[test]
    fn baseline_variant_reduces_to_single_positive_nce() {
        let mut rng = stream_rng(6, StreamTag::Queue, 0, 0);
        let mut s = Setup::new();
        let qa = s.vec_input("qa", &[unit(&mut rng, 6)]);
        let ka = s.vec_input("ka", &[unit(&mut rng, 6)]);
        let negs_v: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 6)).collect();
        let ng = s.vec_input("negs", &negs_v);
        let head = head_loss(
            &mut s.g,
            &HeadInputs {
                q_a: qa,
                q_p: None,
                q_hat: None,
                k_a: ka,
                k_p: None,
                negatives: ng,
                lambda: None,
            },
            &LossWeights::default(),
            0.2,
        )
        .unwrap();
        let reference = info_nce(&mut s.g, qa, ka, ng, 0.2);
        let mut ps = ParamStore::new();
        s.g.forward(&mut ps, &s.bind).unwrap();
        let got = s.g.value(head.combined).unwrap().item().unwrap();
        let want = s.g.value(reference).unwrap().item().unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn monotone_in_positive_similarity() {
        // raising q.k_pos with all other logits fixed strictly lowers the loss
        let negs: Vec<Vec<f64>> = vec![vec![0.0, 1.0], vec![0.0, -1.0]];
        let mut prev = f64::INFINITY;
        for step in 0..20 {
            let cos = -1.0 + 2.0 * (step as f64) / 19.0;
            let sin = (1.0 - cos * cos).sqrt();
            let mut s = Setup::new();
            // negatives orthogonal to q, positive at varying angle
            let q = s.vec_input("q", &[vec![1.0, 0.0]]);
            let kp = s.vec_input("kp", &[vec![cos, sin]]);
            let ng = s.vec_input("negs", &negs);
            let node = info_nce(&mut s.g, q, kp, ng, 0.2);
            let loss = s.eval(node);
            assert!(loss < prev, "loss must strictly decrease: {loss} vs {prev}");
            prev = loss;
        }
    }

    #[test]
    fn gradient_reaches_queries_only() {
        let mut rng = stream_rng(7, StreamTag::Queue, 0, 0);
        let mut g: Graph<f64> = Graph::new(Mode::Eval);
        let mut bind = Bindings::new();
        let mut ps: ParamStore<f64> = ParamStore::new();

        ps.insert_param("qraw", Tensor::new(vec![1, 6], unit(&mut rng, 6)).unwrap());
        let qraw = g.param("qraw");
        let q = g.l2_normalize(qraw);

        bind.set("ka", Tensor::new(vec![1, 6], unit(&mut rng, 6)).unwrap());
        bind.set("kp", Tensor::new(vec![1, 6], unit(&mut rng, 6)).unwrap());
        let negs: Vec<f64> = (0..4).flat_map(|_| unit(&mut rng, 6)).collect();
        bind.set("negs", Tensor::new(vec![4, 6], negs).unwrap());
        let ka = g.input("ka");
        let kp = g.input("kp");
        let ng = g.input("negs");
        g.mark_input_differentiable("ka");
        g.mark_input_differentiable("kp");
        g.mark_input_differentiable("negs");

        let loss = pair_loss(&mut g, q, ka, kp, ng, 0.2);
        g.forward(&mut ps, &bind).unwrap();
        let grads = g.backward(loss).unwrap();

        assert!(grads.get("qraw").is_some());
        assert!(g.grad(ka).is_none(), "keys must not receive gradient");
        assert!(g.grad(kp).is_none());
        assert!(g.grad(ng).is_none());
    }

    #[test]
    fn losses_nonnegative_and_finite_across_temperatures() {
        let mut rng = stream_rng(8, StreamTag::Queue, 0, 0);
        for trial in 0..50 {
            let tau = [0.01, 0.07, 0.5, 10.0][trial % 4];
            let mut s = Setup::new();
            let q = s.vec_input("q", &[unit(&mut rng, 8)]);
            let kp = s.vec_input("kp", &[unit(&mut rng, 8)]);
            let negs_v: Vec<Vec<f64>> = (0..8).map(|_| unit(&mut rng, 8)).collect();
            let ng = s.vec_input("negs", &negs_v);
            let node = info_nce(&mut s.g, q, kp, ng, tau);
            let loss = s.eval(node);
            assert!(loss.is_finite() && loss >= 0.0, "tau {tau}: {loss}");
        }
    }
}
