//! Central finite-difference verification of the adjoint rules.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::graph::{Bindings, Graph, NodeId, ParamStore};
use super::tensor::{Precision, Scalar};
#[cfg(test)]
use super::tensor::Tensor;

/// Worst relative error per parameter, from comparing adjoint gradients to
/// central differences.
#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_error: f64,
    pub elements_checked: usize,
}

impl FiniteDiffReport {
    pub fn worst_param(&self) -> Option<(&String, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(k, &v)| (k, v))
    }
}

/// Compare the adjoint gradient of `loss` against
/// `(L(θ+εe_i) − L(θ−εe_i)) / 2ε` for every element of every trainable
/// parameter. Relative error uses denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// Only defined at double precision; single precision is rejected.
pub fn finite_diff_check<T: Scalar>(
    graph: &mut Graph<T>,
    params: &mut ParamStore<T>,
    bindings: &Bindings<T>,
    loss: NodeId,
    epsilon: f64,
) -> Result<FiniteDiffReport> {
    if T::PRECISION != Precision::Double {
        return Err(Error::RequiresDoublePrecision);
    }
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be in (0, 1e-2], got {epsilon}"
        )));
    }

    let snapshot = params.clone();
    graph.forward(params, bindings)?;
    let grads = graph.backward(loss)?;

    let names: Vec<String> = params
        .iter()
        .filter(|(_, s)| s.trainable)
        .map(|(n, _)| n.clone())
        .collect();

    let mut per_param = BTreeMap::new();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let eps = T::from_f64(epsilon);

    for name in names {
        let numel = params.get(&name)?.numel();
        let analytic: Vec<f64> = match grads.get(&name) {
            Some(g) => g.data().iter().map(|v| v.to_f64()).collect(),
            None => vec![0.0; numel],
        };
        let mut worst = 0.0f64;
        for i in 0..numel {
            let orig = params.get(&name)?.data()[i];

            params.get_mut(&name)?.data_mut()[i] = orig + eps;
            graph.forward(params, bindings)?;
            let plus = graph.value(loss)?.item()?.to_f64();

            params.get_mut(&name)?.data_mut()[i] = orig - eps;
            graph.forward(params, bindings)?;
            let minus = graph.value(loss)?.item()?.to_f64();

            params.get_mut(&name)?.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic[i] - numeric).abs() / denom;
            worst = worst.max(rel);
            checked += 1;
        }
        max_rel = max_rel.max(worst);
        per_param.insert(name, worst);
    }

    // undo batchnorm running-statistic drift from the probe forwards
    *params = snapshot;
    graph.forward(params, bindings)?;
    graph.backward(loss)?;

    Ok(FiniteDiffReport {
        per_param,
        max_rel_error: max_rel,
        elements_checked: checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::graph::Mode;
    use crate::rng::{stream_rng, StreamTag};
    use rand::Rng;

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = stream_rng(seed, StreamTag::Init, 0, 0);
        let numel: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn rejects_single_precision() {
        let mut g = Graph::<f32>::new(Mode::Eval);
        let w = g.param("w");
        let loss = g.sum(w);
        let mut ps = ParamStore::new();
        ps.insert_param("w", Tensor::<f32>::from_vec(vec![1.0]));
        let err = finite_diff_check(&mut g, &mut ps, &Bindings::new(), loss, 1e-5).unwrap_err();
        assert!(matches!(err, Error::RequiresDoublePrecision));
    }

    #[test]
    fn rejects_out_of_range_epsilon() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let w = g.param("w");
        let loss = g.sum(w);
        let mut ps = ParamStore::new();
        ps.insert_param("w", Tensor::from_vec(vec![1.0]));
        assert!(finite_diff_check(&mut g, &mut ps, &Bindings::new(), loss, 0.0).is_err());
        assert!(finite_diff_check(&mut g, &mut ps, &Bindings::new(), loss, 0.1).is_err());
    }

    #[test]
    fn linear_softmax_ce_matches_central_differences() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let x = g.input("x");
        let w = g.param("w");
        let b = g.param("b");
        let logits = g.linear(x, w, Some(b));
        let t = g.input("t");
        let loss = g.softmax_cross_entropy(logits, t);

        let mut ps = ParamStore::new();
        ps.insert_param("w", random_tensor(&[3, 4], 1));
        ps.insert_param("b", random_tensor(&[3], 2));
        let mut bind = Bindings::new();
        bind.set("x", random_tensor(&[4, 4], 3));
        bind.set("t", Tensor::from_vec(vec![0.0, 1.0, 2.0, 1.0]));

        let report = finite_diff_check(&mut g, &mut ps, &bind, loss, 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-6,
            "max rel error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn restores_parameters_after_probing() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let w = g.param("w");
        let d = g.dot(w, w);
        let loss = g.scale(d, 0.5);
        let mut ps = ParamStore::new();
        ps.insert_param("w", Tensor::from_vec(vec![1.0, 2.0]));
        finite_diff_check(&mut g, &mut ps, &Bindings::new(), loss, 1e-5).unwrap();
        assert_eq!(ps.get("w").unwrap().data(), &[1.0, 2.0]);
    }
}
