//! Static computation graph with reverse-mode gradient propagation.
//!
//! Nodes are appended in construction order, so the node list is already a
//! topological order. Parameters live outside the graph in a [`ParamStore`]
//! and are referenced by name; the same store can back several graphs (a
//! training graph and an eval-mode feature extractor, for instance), and a
//! parameter name used twice in one graph resolves to a single node, which
//! makes gradient accumulation across shared-weight branches automatic.
//!
//! Shapes are checked at `forward` time against the bound tensors, so one
//! graph instance serves any batch size.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

use super::kernels;
use super::tensor::{dot, Scalar, Tensor};

pub type NodeId = usize;

/// Batchnorm behavior switch: batch statistics vs. running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
enum Op {
    Input {
        name: String,
    },
    Param {
        name: String,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean_state: String,
        var_state: String,
        momentum: f64,
        eps: f64,
    },
    /// Fixed per-channel standardization `(x - mean[c]) / std[c]` with
    /// statistics held as non-trainable state (dataset normalization living
    /// in the encoder stem).
    ChannelNorm {
        x: NodeId,
        mean_state: String,
        std_state: String,
    },
    Relu {
        x: NodeId,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
    },
    L2Normalize {
        x: NodeId,
        eps: f64,
    },
    Dot {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Log {
        x: NodeId,
    },
    Exp {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: NodeId,
    },
    InfoNce {
        q: NodeId,
        k_pos: NodeId,
        negatives: NodeId,
        weights: Option<NodeId>,
        tau: f64,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::ChannelNorm { .. } => "channel-norm",
            Op::Relu { .. } => "relu",
            Op::GlobalAvgPool { .. } => "global-average-pool",
            Op::Linear { .. } => "linear",
            Op::L2Normalize { .. } => "l2-normalize",
            Op::Dot { .. } => "dot-product",
            Op::Scale { .. } => "scalar-scale",
            Op::Add { .. } => "elementwise-add",
            Op::Mul { .. } => "elementwise-mul",
            Op::Log { .. } => "log",
            Op::Exp { .. } => "exp",
            Op::Sum { .. } => "sum",
            Op::SoftmaxCrossEntropy { .. } => "softmax-cross-entropy",
            Op::InfoNce { .. } => "info-nce",
        }
    }
}

/// One named tensor in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Slot<T> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Named tensor storage: trainable parameters plus non-trainable state
/// (batchnorm running statistics). Ordered by name for determinism.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    slots: BTreeMap<String, Slot<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            slots: BTreeMap::new(),
        }
    }

    pub fn insert_param(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.slots.insert(
            name.into(),
            Slot {
                tensor,
                trainable: true,
            },
        );
    }

    pub fn insert_state(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.slots.insert(
            name.into(),
            Slot {
                tensor,
                trainable: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.slots
            .get(name)
            .map(|s| &s.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.slots
            .get_mut(name)
            .map(|s| &mut s.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Slot<T>)> {
        self.slots.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Slot<T>)> {
        self.slots.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of trainable elements.
    pub fn num_trainable_elements(&self) -> usize {
        self.slots
            .values()
            .filter(|s| s.trainable)
            .map(|s| s.tensor.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            slots: self
                .slots
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        Slot {
                            tensor: s.tensor.cast::<U>(),
                            trainable: s.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// True when both stores hold the same names with identical shapes.
    pub fn shape_isomorphic(&self, other: &ParamStore<T>) -> bool {
        self.slots.len() == other.slots.len()
            && self.slots.iter().zip(other.slots.iter()).all(|((na, sa), (nb, sb))| {
                na == nb && sa.tensor.shape() == sb.tensor.shape() && sa.trainable == sb.trainable
            })
    }
}

/// Named tensors bound to graph inputs for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Bindings<T> {
    pub fn new() -> Self {
        Bindings {
            map: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> &mut Self {
        self.map.insert(name.into(), tensor);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }
}

/// Per-parameter gradients returned by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Scalar> {
    by_param: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_param.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.by_param.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }
}

pub struct Graph<T: Scalar> {
    ops: Vec<Op>,
    by_name: BTreeMap<String, NodeId>,
    diff_inputs: BTreeSet<String>,
    mode: Mode,
    values: Vec<Option<Tensor<T>>>,
    bn_cache: Vec<Option<(Vec<T>, Vec<T>)>>,
    grads: Vec<Option<Tensor<T>>>,
    evaluated: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Graph {
            ops: Vec::new(),
            by_name: BTreeMap::new(),
            diff_inputs: BTreeSet::new(),
            mode,
            values: Vec::new(),
            bn_cache: Vec::new(),
            grads: Vec::new(),
            evaluated: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.evaluated = false;
    }

    pub fn num_nodes(&self) -> usize {
        self.ops.len()
    }

    fn label(&self, id: NodeId) -> String {
        format!("node {}:{}", id, self.ops[id].kind())
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.ops.push(op);
        self.ops.len() - 1
    }

    /// Placeholder bound per forward pass. Repeated names return the same node.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.by_name.get(name) {
            return id;
        }
        let id = self.push(Op::Input {
            name: name.to_string(),
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Reference to a named tensor in the [`ParamStore`]. Repeated names
    /// return the same node, so shared weights accumulate gradients.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.by_name.get(name) {
            return id;
        }
        let id = self.push(Op::Param {
            name: name.to_string(),
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Request input gradients for a named input (off by default; keys and
    /// negatives bind as inputs and must stay outside the gradient set).
    pub fn mark_input_differentiable(&mut self, name: &str) {
        self.diff_inputs.insert(name.to_string());
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize) -> NodeId {
        assert!(stride == 1 || stride == 2, "conv2d stride must be 1 or 2");
        self.push(Op::Conv2d { x, w, stride })
    }

    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean_state: &str,
        var_state: &str,
        momentum: f64,
    ) -> NodeId {
        self.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            mean_state: mean_state.to_string(),
            var_state: var_state.to_string(),
            momentum,
            eps: 1e-5,
        })
    }

    pub fn channel_norm(&mut self, x: NodeId, mean_state: &str, std_state: &str) -> NodeId {
        self.push(Op::ChannelNorm {
            x,
            mean_state: mean_state.to_string(),
            std_state: std_state.to_string(),
        })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu { x })
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool { x })
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> NodeId {
        self.push(Op::Linear { x, w, bias })
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> NodeId {
        self.push(Op::L2Normalize { x, eps: 1e-12 })
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Dot { a, b })
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale { x, factor })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul { a, b })
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log { x })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Exp { x })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum { x })
    }

    /// `targets` holds integer class indices encoded as floats.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy { logits, targets })
    }

    /// Batch-mean InfoNCE; gradient flows into `q` only. `weights` holds an
    /// optional per-row weight vector (all ones when absent).
    pub fn info_nce(
        &mut self,
        q: NodeId,
        k_pos: NodeId,
        negatives: NodeId,
        weights: Option<NodeId>,
        tau: f64,
    ) -> NodeId {
        assert!(tau > 0.0, "info_nce temperature must be positive");
        self.push(Op::InfoNce {
            q,
            k_pos,
            negatives,
            weights,
            tau,
        })
    }

    fn val(&self, id: NodeId) -> &Tensor<T> {
        self.values[id].as_ref().expect("value computed in order")
    }

    /// Value of a node after [`Graph::forward`].
    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        self.values
            .get(id)
            .and_then(|v| v.as_ref())
            .ok_or(Error::NotEvaluated)
    }

    /// Gradient at a node after [`Graph::backward`] (inputs must have been
    /// marked differentiable to receive one).
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    fn shape_err(&self, id: NodeId, message: String) -> Error {
        Error::shape(self.label(id), message)
    }

    fn expect_rank(&self, id: NodeId, t: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
        if t.rank() != rank {
            return Err(self.shape_err(
                id,
                format!("{} must have rank {}, got shape {:?}", what, rank, t.shape()),
            ));
        }
        Ok(())
    }

    /// Evaluate every node in topological order. In train mode batchnorm
    /// nodes update their running statistics inside `params`.
    pub fn forward(&mut self, params: &mut ParamStore<T>, bindings: &Bindings<T>) -> Result<()> {
        let n = self.ops.len();
        self.values = vec![None; n];
        self.bn_cache = vec![None; n];
        self.grads.clear();
        self.evaluated = false;

        for id in 0..n {
            let value = self.eval_node(id, params, bindings)?;
            self.values[id] = Some(value);
        }
        self.evaluated = true;
        Ok(())
    }

    fn eval_node(
        &mut self,
        id: NodeId,
        params: &mut ParamStore<T>,
        bindings: &Bindings<T>,
    ) -> Result<Tensor<T>> {
        let op = self.ops[id].clone();
        let out = match op {
            Op::Input { ref name } => bindings
                .get(name)
                .cloned()
                .ok_or_else(|| Error::UnboundInput(name.clone()))?,
            Op::Param { ref name } => params.get(name)?.clone(),
            Op::Conv2d { x, w, stride } => {
                let xv = self.val(x);
                let wv = self.val(w);
                self.expect_rank(id, xv, 4, "conv input")?;
                self.expect_rank(id, wv, 4, "conv weight")?;
                let k = wv.shape()[2];
                if k != wv.shape()[3] || (k != 1 && k != 3) {
                    return Err(self.shape_err(id, format!("kernel must be 1x1 or 3x3, got {:?}", wv.shape())));
                }
                if xv.shape()[1] != wv.shape()[1] {
                    return Err(self.shape_err(
                        id,
                        format!(
                            "input channels {} != weight channels {}",
                            xv.shape()[1],
                            wv.shape()[1]
                        ),
                    ));
                }
                kernels::conv2d_forward(xv, wv, stride)
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ref mean_state,
                ref var_state,
                momentum,
                eps,
            } => {
                let xv = self.val(x);
                self.expect_rank(id, xv, 4, "batchnorm input")?;
                let c = xv.shape()[1];
                let gv = self.val(gamma);
                let bv = self.val(beta);
                if gv.numel() != c || bv.numel() != c {
                    return Err(self.shape_err(
                        id,
                        format!("gamma/beta must have {} channels, got {}/{}", c, gv.numel(), bv.numel()),
                    ));
                }
                let epsv = T::from_f64(eps);
                let (mean, var) = match self.mode {
                    Mode::Train => kernels::batch_stats(xv),
                    Mode::Eval => (
                        params.get(mean_state)?.data().to_vec(),
                        params.get(var_state)?.data().to_vec(),
                    ),
                };
                let out = kernels::batchnorm_apply(xv, gv.data(), bv.data(), &mean, &var, epsv);
                if self.mode == Mode::Train {
                    let m = T::from_f64(momentum);
                    let one_m = T::ONE - m;
                    let rm = params.get_mut(mean_state)?;
                    for (r, &b) in rm.data_mut().iter_mut().zip(mean.iter()) {
                        *r = *r * m + b * one_m;
                    }
                    let rv = params.get_mut(var_state)?;
                    for (r, &b) in rv.data_mut().iter_mut().zip(var.iter()) {
                        *r = *r * m + b * one_m;
                    }
                }
                self.bn_cache[id] = Some((mean, var));
                out
            }
            Op::ChannelNorm {
                x,
                ref mean_state,
                ref std_state,
            } => {
                let xv = self.val(x);
                self.expect_rank(id, xv, 4, "channel-norm input")?;
                let c = xv.shape()[1];
                let mean = params.get(mean_state)?.data().to_vec();
                let std = params.get(std_state)?.data().to_vec();
                if mean.len() != c || std.len() != c {
                    return Err(self.shape_err(
                        id,
                        format!("norm stats must have {} channels, got {}/{}", c, mean.len(), std.len()),
                    ));
                }
                let inv: Vec<T> = std.iter().map(|&s| T::ONE / s).collect();
                let plane = xv.shape()[2] * xv.shape()[3];
                let mut out = xv.clone();
                for (bi, img) in out.data_mut().chunks_mut(c * plane).enumerate() {
                    let _ = bi;
                    for (ch, pl) in img.chunks_mut(plane).enumerate() {
                        let (m, iv) = (mean[ch], inv[ch]);
                        for v in pl {
                            *v = (*v - m) * iv;
                        }
                    }
                }
                self.bn_cache[id] = Some((mean, inv));
                out
            }
            Op::Relu { x } => self.val(x).map(|v| v.maxv(T::ZERO)),
            Op::GlobalAvgPool { x } => {
                let xv = self.val(x);
                self.expect_rank(id, xv, 4, "pool input")?;
                let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let inv = T::ONE / T::from_f64((h * w) as f64);
                let mut out = Tensor::zeros(&[b, c]);
                for bi in 0..b {
                    for ch in 0..c {
                        let plane = &xv.data()[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
                        let mut s = T::ZERO;
                        for &v in plane {
                            s += v;
                        }
                        out.data_mut()[bi * c + ch] = s * inv;
                    }
                }
                out
            }
            Op::Linear { x, w, bias } => {
                let xv = self.val(x);
                let wv = self.val(w);
                self.expect_rank(id, xv, 2, "linear input")?;
                self.expect_rank(id, wv, 2, "linear weight")?;
                if xv.shape()[1] != wv.shape()[1] {
                    return Err(self.shape_err(
                        id,
                        format!("input features {} != weight features {}", xv.shape()[1], wv.shape()[1]),
                    ));
                }
                let bv = bias.map(|b| self.val(b));
                if let Some(b) = bv {
                    if b.numel() != wv.shape()[0] {
                        return Err(self.shape_err(
                            id,
                            format!("bias length {} != output features {}", b.numel(), wv.shape()[0]),
                        ));
                    }
                }
                kernels::linear_forward(xv, wv, bv)
            }
            Op::L2Normalize { x, eps } => {
                let xv = self.val(x);
                if xv.rank() == 0 {
                    return Err(self.shape_err(id, "cannot normalize a scalar".into()));
                }
                let d = *xv.shape().last().unwrap();
                let mut out = xv.clone();
                let epsv = T::from_f64(eps);
                for row in out.data_mut().chunks_mut(d) {
                    super::tensor::l2_normalize_slice(row, epsv);
                }
                out
            }
            Op::Dot { a, b } => {
                let av = self.val(a);
                let bv = self.val(b);
                if av.shape() != bv.shape() || av.rank() == 0 {
                    return Err(self.shape_err(
                        id,
                        format!("operands must share shape of rank >= 1: {:?} vs {:?}", av.shape(), bv.shape()),
                    ));
                }
                let d = *av.shape().last().unwrap();
                let out_shape = &av.shape()[..av.rank() - 1];
                let mut out = Tensor::zeros(out_shape);
                for (i, o) in out.data_mut().iter_mut().enumerate() {
                    *o = dot(&av.data()[i * d..(i + 1) * d], &bv.data()[i * d..(i + 1) * d]);
                }
                out
            }
            Op::Scale { x, factor } => {
                let f = T::from_f64(factor);
                self.val(x).map(|v| v * f)
            }
            Op::Add { a, b } => {
                let av = self.val(a);
                let bv = self.val(b);
                if av.shape() != bv.shape() {
                    return Err(self.shape_err(
                        id,
                        format!("operands must share shape: {:?} vs {:?}", av.shape(), bv.shape()),
                    ));
                }
                let mut out = av.clone();
                for (o, &v) in out.data_mut().iter_mut().zip(bv.data()) {
                    *o += v;
                }
                out
            }
            Op::Mul { a, b } => {
                let av = self.val(a);
                let bv = self.val(b);
                if av.shape() != bv.shape() {
                    return Err(self.shape_err(
                        id,
                        format!("operands must share shape: {:?} vs {:?}", av.shape(), bv.shape()),
                    ));
                }
                let mut out = av.clone();
                for (o, &v) in out.data_mut().iter_mut().zip(bv.data()) {
                    *o *= v;
                }
                out
            }
            Op::Log { x } => self.val(x).map(|v| v.ln()),
            Op::Exp { x } => self.val(x).map(|v| v.exp()),
            Op::Sum { x } => {
                let mut s = T::ZERO;
                for &v in self.val(x).data() {
                    s += v;
                }
                Tensor::scalar(s)
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let lv = self.val(logits);
                self.expect_rank(id, lv, 2, "logits")?;
                let tv = self.val(targets);
                let t = self.decode_targets(id, tv, lv.shape()[1], lv.shape()[0])?;
                Tensor::scalar(kernels::softmax_ce_forward(lv, &t))
            }
            Op::InfoNce {
                q,
                k_pos,
                negatives,
                weights,
                tau,
            } => {
                let qv = self.val(q);
                let kv = self.val(k_pos);
                let nv = self.val(negatives);
                self.expect_rank(id, qv, 2, "queries")?;
                if kv.shape() != qv.shape() {
                    return Err(self.shape_err(
                        id,
                        format!("positive keys {:?} must match queries {:?}", kv.shape(), qv.shape()),
                    ));
                }
                self.expect_rank(id, nv, 2, "negatives")?;
                if nv.shape()[1] != qv.shape()[1] {
                    return Err(self.shape_err(
                        id,
                        format!("negative dim {} != query dim {}", nv.shape()[1], qv.shape()[1]),
                    ));
                }
                let wdata = match weights {
                    Some(wid) => {
                        let wv = self.val(wid);
                        if wv.numel() != qv.shape()[0] {
                            return Err(self.shape_err(
                                id,
                                format!("weights length {} != batch {}", wv.numel(), qv.shape()[0]),
                            ));
                        }
                        wv.data().to_vec()
                    }
                    None => vec![T::ONE; qv.shape()[0]],
                };
                Tensor::scalar(kernels::info_nce_forward(qv, kv, nv, &wdata, tau))
            }
        };
        Ok(out)
    }

    fn decode_targets(&self, id: NodeId, tv: &Tensor<T>, classes: usize, batch: usize) -> Result<Vec<usize>> {
        if tv.numel() != batch {
            return Err(self.shape_err(
                id,
                format!("targets length {} != batch {}", tv.numel(), batch),
            ));
        }
        tv.data()
            .iter()
            .map(|&v| {
                let f = v.to_f64();
                let u = f as usize;
                if f < 0.0 || f.fract() != 0.0 || u >= classes {
                    Err(self.shape_err(id, format!("target {} is not a class index < {}", f, classes)))
                } else {
                    Ok(u)
                }
            })
            .collect()
    }

    /// Which nodes sit on a path from a trainable leaf to anything.
    fn needs_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.ops.len()];
        for (id, op) in self.ops.iter().enumerate() {
            needs[id] = match op {
                Op::Param { .. } => true,
                Op::Input { name } => self.diff_inputs.contains(name),
                Op::Conv2d { x, w, .. } => needs[*x] || needs[*w],
                Op::BatchNorm { x, gamma, beta, .. } => needs[*x] || needs[*gamma] || needs[*beta],
                Op::Relu { x }
                | Op::ChannelNorm { x, .. }
                | Op::GlobalAvgPool { x }
                | Op::L2Normalize { x, .. }
                | Op::Scale { x, .. }
                | Op::Log { x }
                | Op::Exp { x }
                | Op::Sum { x } => needs[*x],
                Op::Linear { x, w, bias } => {
                    needs[*x] || needs[*w] || bias.map(|b| needs[b]).unwrap_or(false)
                }
                Op::Dot { a, b } | Op::Add { a, b } | Op::Mul { a, b } => needs[*a] || needs[*b],
                Op::SoftmaxCrossEntropy { logits, .. } => needs[*logits],
                // contrast targets are not differentiable inputs
                Op::InfoNce { q, .. } => needs[*q],
            };
        }
        needs
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        match &mut grads[id] {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse-mode gradient of a scalar loss node with respect to every
    /// trainable parameter (and any differentiable inputs).
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        let loss_val = self
            .values
            .get(loss)
            .and_then(|v| v.as_ref())
            .ok_or(Error::NotEvaluated)?;
        if !loss_val.is_scalar() {
            return Err(Error::NonScalarLoss(loss, loss_val.shape().to_vec()));
        }

        let needs = self.needs_grad();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.ops.len()];
        grads[loss] = Some(Tensor::full(loss_val.shape(), T::ONE));

        for id in (0..=loss).rev() {
            if grads[id].is_none() || !needs[id] {
                continue;
            }
            let g = grads[id].clone().unwrap();
            self.backward_node(id, &g, &needs, &mut grads)?;
        }

        let mut by_param = BTreeMap::new();
        for (id, op) in self.ops.iter().enumerate() {
            if let Op::Param { name } = op {
                if let Some(g) = &grads[id] {
                    by_param.insert(name.clone(), g.clone());
                }
            }
        }
        self.grads = grads;
        Ok(Gradients { by_param })
    }

    fn backward_node(
        &self,
        id: NodeId,
        g: &Tensor<T>,
        needs: &[bool],
        grads: &mut Vec<Option<Tensor<T>>>,
    ) -> Result<()> {
        match &self.ops[id] {
            Op::Input { .. } | Op::Param { .. } => {}
            Op::Conv2d { x, w, stride } => {
                if needs[*x] {
                    let dx = kernels::conv2d_backward_input(
                        self.val(*x).shape(),
                        self.val(*w),
                        *stride,
                        g,
                    );
                    Self::accumulate(grads, *x, dx);
                }
                if needs[*w] {
                    let dw = kernels::conv2d_backward_weight(
                        self.val(*x),
                        self.val(*w).shape(),
                        *stride,
                        g,
                    );
                    Self::accumulate(grads, *w, dw);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                ..
            } => {
                let (mean, var) = self.bn_cache[id].as_ref().expect("bn stats cached at forward");
                let (dx, dgamma, dbeta) = kernels::batchnorm_backward(
                    self.val(*x),
                    self.val(*gamma).data(),
                    mean,
                    var,
                    T::from_f64(*eps),
                    g,
                    self.mode == Mode::Train,
                );
                if needs[*x] {
                    Self::accumulate(grads, *x, dx);
                }
                if needs[*gamma] {
                    Self::accumulate(grads, *gamma, Tensor::from_vec(dgamma));
                }
                if needs[*beta] {
                    Self::accumulate(grads, *beta, Tensor::from_vec(dbeta));
                }
            }
            Op::ChannelNorm { x, .. } => {
                if needs[*x] {
                    let (_, inv) = self.bn_cache[id].as_ref().expect("stats cached at forward");
                    let xv = self.val(*x);
                    let c = xv.shape()[1];
                    let plane = xv.shape()[2] * xv.shape()[3];
                    let mut dx = g.clone();
                    for img in dx.data_mut().chunks_mut(c * plane) {
                        for (ch, pl) in img.chunks_mut(plane).enumerate() {
                            let iv = inv[ch];
                            for v in pl {
                                *v *= iv;
                            }
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Relu { x } => {
                if needs[*x] {
                    let xv = self.val(*x);
                    let mut dx = g.clone();
                    // subgradient at 0 passes 0
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= T::ZERO {
                            *d = T::ZERO;
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::GlobalAvgPool { x } => {
                if needs[*x] {
                    let xv = self.val(*x);
                    let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                    let inv = T::ONE / T::from_f64((h * w) as f64);
                    let mut dx = Tensor::zeros(xv.shape());
                    for bi in 0..b {
                        for ch in 0..c {
                            let gv = g.data()[bi * c + ch] * inv;
                            let plane =
                                &mut dx.data_mut()[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
                            for d in plane {
                                *d = gv;
                            }
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Linear { x, w, bias } => {
                let (dx, dw, db) = kernels::linear_backward(self.val(*x), self.val(*w), g);
                if needs[*x] {
                    Self::accumulate(grads, *x, dx);
                }
                if needs[*w] {
                    Self::accumulate(grads, *w, dw);
                }
                if let Some(b) = bias {
                    if needs[*b] {
                        Self::accumulate(grads, *b, db);
                    }
                }
            }
            Op::L2Normalize { x, eps } => {
                if needs[*x] {
                    let xv = self.val(*x);
                    let yv = self.val(id);
                    let d = *xv.shape().last().unwrap();
                    let mut dx = Tensor::zeros(xv.shape());
                    let epsv = T::from_f64(*eps);
                    for r in 0..xv.numel() / d {
                        let xr = &xv.data()[r * d..(r + 1) * d];
                        let yr = &yv.data()[r * d..(r + 1) * d];
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                        if norm.to_f64() <= epsv.to_f64() {
                            continue; // guarded zero-output branch has zero gradient
                        }
                        let gy = dot(gr, yr);
                        let dr = &mut dx.data_mut()[r * d..(r + 1) * d];
                        for i in 0..d {
                            dr[i] = (gr[i] - gy * yr[i]) / norm;
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Dot { a, b } => {
                let av = self.val(*a);
                let bv = self.val(*b);
                let d = *av.shape().last().unwrap();
                if needs[*a] {
                    let mut da = Tensor::zeros(av.shape());
                    for (i, &gr) in g.data().iter().enumerate() {
                        let dst = &mut da.data_mut()[i * d..(i + 1) * d];
                        let src = &bv.data()[i * d..(i + 1) * d];
                        for j in 0..d {
                            dst[j] = gr * src[j];
                        }
                    }
                    Self::accumulate(grads, *a, da);
                }
                if needs[*b] {
                    let mut db = Tensor::zeros(bv.shape());
                    for (i, &gr) in g.data().iter().enumerate() {
                        let dst = &mut db.data_mut()[i * d..(i + 1) * d];
                        let src = &av.data()[i * d..(i + 1) * d];
                        for j in 0..d {
                            dst[j] = gr * src[j];
                        }
                    }
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::Scale { x, factor } => {
                if needs[*x] {
                    let f = T::from_f64(*factor);
                    Self::accumulate(grads, *x, g.map(|v| v * f));
                }
            }
            Op::Add { a, b } => {
                if needs[*a] {
                    Self::accumulate(grads, *a, g.clone());
                }
                if needs[*b] {
                    Self::accumulate(grads, *b, g.clone());
                }
            }
            Op::Mul { a, b } => {
                if needs[*a] {
                    let bv = self.val(*b);
                    let mut da = g.clone();
                    for (d, &v) in da.data_mut().iter_mut().zip(bv.data()) {
                        *d *= v;
                    }
                    Self::accumulate(grads, *a, da);
                }
                if needs[*b] {
                    let av = self.val(*a);
                    let mut db = g.clone();
                    for (d, &v) in db.data_mut().iter_mut().zip(av.data()) {
                        *d *= v;
                    }
                    Self::accumulate(grads, *b, db);
                }
            }
            Op::Log { x } => {
                if needs[*x] {
                    let xv = self.val(*x);
                    let mut dx = g.clone();
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *d = *d / v;
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Exp { x } => {
                if needs[*x] {
                    let yv = self.val(id);
                    let mut dx = g.clone();
                    for (d, &v) in dx.data_mut().iter_mut().zip(yv.data()) {
                        *d *= v;
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Sum { x } => {
                if needs[*x] {
                    let xv = self.val(*x);
                    Self::accumulate(grads, *x, Tensor::full(xv.shape(), g.data()[0]));
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                if needs[*logits] {
                    let lv = self.val(*logits);
                    let tv = self.val(*targets);
                    let t = self.decode_targets(id, tv, lv.shape()[1], lv.shape()[0])?;
                    let dl = kernels::softmax_ce_backward(lv, &t, g.data()[0]);
                    Self::accumulate(grads, *logits, dl);
                }
            }
            Op::InfoNce {
                q,
                k_pos,
                negatives,
                weights,
                tau,
            } => {
                if needs[*q] {
                    let wdata = match weights {
                        Some(wid) => self.val(*wid).data().to_vec(),
                        None => vec![T::ONE; self.val(*q).shape()[0]],
                    };
                    let dq = kernels::info_nce_backward(
                        self.val(*q),
                        self.val(*k_pos),
                        self.val(*negatives),
                        &wdata,
                        *tau,
                        g.data()[0],
                    );
                    Self::accumulate(grads, *q, dq);
                }
            }
        }
        Ok(())
    }
}
