//! Staged convolutional backbone with per-stage taps, a 2-layer MLP
//! projection head, and bottleneck + 2-MLP companion heads on the active
//! intermediate stages.
//!
//! The same builder constructs the query and the key encoder; the two sides
//! differ only in which [`ParamStore`] they are evaluated against. Companion
//! heads are pure side branches: dropping them leaves the backbone forward
//! path bit-identical.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Bindings, Graph, Mode, NodeId, ParamStore, Scalar, Tensor};
use crate::rng::{stream_rng, StreamTag};

/// Backbone and head topology. Every field has a desk-scale default; the
/// paper-shaped default keeps 4 stages with channel doubling and stride-2
/// entries from stage 2 on (taps 32-16-8-4 on 32x32 inputs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    /// Stride-2 entry flag per stage.
    pub stage_strides: Vec<bool>,
    /// Final embedding dimension D_e.
    pub embed_dim: usize,
    /// Stages (1-based) that carry a companion head; must be < the last stage.
    pub companion_stages: Vec<usize>,
    pub companion_dim: usize,
    pub bn_momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_channels: 3,
            stem_channels: 32,
            stage_channels: vec![32, 64, 128, 256],
            stage_strides: vec![false, true, true, true],
            embed_dim: 128,
            companion_stages: vec![2, 3],
            companion_dim: 128,
            bn_momentum: 0.9,
        }
    }
}

impl EncoderConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Dimension of the pooled backbone feature (last stage channels).
    pub fn pooled_dim(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_channels == 0 {
            problems.push("encoder.input_channels must be positive".into());
        }
        if self.stem_channels == 0 {
            problems.push("encoder.stem_channels must be positive".into());
        }
        if self.stage_channels.is_empty() {
            problems.push("encoder.stage_channels must not be empty".into());
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            problems.push("encoder.stage_channels must all be positive".into());
        }
        if self.stage_strides.len() != self.stage_channels.len() {
            problems.push(format!(
                "encoder.stage_strides has {} entries for {} stages",
                self.stage_strides.len(),
                self.stage_channels.len()
            ));
        }
        if self.embed_dim == 0 {
            problems.push("encoder.embed_dim must be positive".into());
        }
        if self.companion_dim == 0 {
            problems.push("encoder.companion_dim must be positive".into());
        }
        for &s in &self.companion_stages {
            if s == 0 || s >= self.num_stages() {
                problems.push(format!(
                    "encoder.companion_stages entry {} must lie in 1..{}",
                    s,
                    self.num_stages()
                ));
            }
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            problems.push("encoder.bn_momentum must lie in [0, 1)".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Node handles for one encoder instantiation inside a graph.
#[derive(Clone, Debug)]
pub struct EncoderNodes {
    pub input: NodeId,
    /// Feature map after each stage, 0-indexed by stage-1.
    pub taps: Vec<NodeId>,
    /// Global-average-pooled final stage features.
    pub pooled: NodeId,
    /// L2-normalized projection-head embedding.
    pub embedding: NodeId,
    /// Stage (1-based) -> L2-normalized companion embedding.
    pub companions: BTreeMap<usize, NodeId>,
}

fn conv_bn_relu<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    prefix: &str,
    stride: usize,
    bn_momentum: f64,
) -> NodeId {
    let w = g.param(&format!("{prefix}.conv.w"));
    let conv = g.conv2d(x, w, stride);
    let gamma = g.param(&format!("{prefix}.bn.gamma"));
    let beta = g.param(&format!("{prefix}.bn.beta"));
    let bn = g.batchnorm(
        conv,
        gamma,
        beta,
        &format!("{prefix}.bn.mean"),
        &format!("{prefix}.bn.var"),
        bn_momentum,
    );
    g.relu(bn)
}

fn mlp_head<T: Scalar>(g: &mut Graph<T>, x: NodeId, prefix: &str) -> NodeId {
    let w1 = g.param(&format!("{prefix}.fc1.w"));
    let b1 = g.param(&format!("{prefix}.fc1.b"));
    let h = g.linear(x, w1, Some(b1));
    let h = g.relu(h);
    let w2 = g.param(&format!("{prefix}.fc2.w"));
    let b2 = g.param(&format!("{prefix}.fc2.b"));
    let out = g.linear(h, w2, Some(b2));
    g.l2_normalize(out)
}

/// Instantiate the encoder on `input_name`, sharing parameters with any
/// other instantiation in the same graph. `companions` selects which active
/// stages get a head (normally all of `cfg.companion_stages`, or none).
pub fn build_encoder<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &EncoderConfig,
    input_name: &str,
    companions: &[usize],
) -> EncoderNodes {
    let input = g.input(input_name);
    let x = g.channel_norm(input, "stem.norm.mean", "stem.norm.std");
    let mut x = conv_bn_relu(g, x, "stem", 1, cfg.bn_momentum);

    let mut taps = Vec::with_capacity(cfg.num_stages());
    for (i, _) in cfg.stage_channels.iter().enumerate() {
        let stage = i + 1;
        let stride = if cfg.stage_strides[i] { 2 } else { 1 };
        x = conv_bn_relu(g, x, &format!("stage{stage}.block1"), stride, cfg.bn_momentum);
        x = conv_bn_relu(g, x, &format!("stage{stage}.block2"), 1, cfg.bn_momentum);
        taps.push(x);
    }

    let pooled = g.global_avg_pool(x);
    let embedding = mlp_head(g, pooled, "proj");

    let mut comp_nodes = BTreeMap::new();
    for &stage in companions {
        let tap = taps[stage - 1];
        let p = format!("comp{stage}");
        let h = conv_bn_relu(g, tap, &format!("{p}.bott1"), 1, cfg.bn_momentum);
        let h = conv_bn_relu(g, h, &format!("{p}.bott2"), 1, cfg.bn_momentum);
        let h = conv_bn_relu(g, h, &format!("{p}.bott3"), 1, cfg.bn_momentum);
        let pooled_l = g.global_avg_pool(h);
        let q_l = mlp_head(g, pooled_l, &p);
        comp_nodes.insert(stage, q_l);
    }

    EncoderNodes {
        input,
        taps,
        pooled,
        embedding,
        companions: comp_nodes,
    }
}

fn fan_in_uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

fn init_conv_bn<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) {
    store.insert_param(
        format!("{prefix}.conv.w"),
        fan_in_uniform(rng, &[c_out, c_in, k, k], c_in * k * k),
    );
    store.insert_param(format!("{prefix}.bn.gamma"), Tensor::full(&[c_out], T::ONE));
    store.insert_param(format!("{prefix}.bn.beta"), Tensor::zeros(&[c_out]));
    store.insert_state(format!("{prefix}.bn.mean"), Tensor::zeros(&[c_out]));
    store.insert_state(format!("{prefix}.bn.var"), Tensor::full(&[c_out], T::ONE));
}

fn init_mlp<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    prefix: &str,
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
) {
    store.insert_param(
        format!("{prefix}.fc1.w"),
        fan_in_uniform(rng, &[d_hidden, d_in], d_in),
    );
    store.insert_param(format!("{prefix}.fc1.b"), Tensor::zeros(&[d_hidden]));
    store.insert_param(
        format!("{prefix}.fc2.w"),
        fan_in_uniform(rng, &[d_out, d_hidden], d_hidden),
    );
    store.insert_param(format!("{prefix}.fc2.b"), Tensor::zeros(&[d_out]));
}

/// Deterministic parameter initialization: convolution and linear weights
/// from a fan-in-scaled uniform distribution, batchnorm scale 1 / shift 0.
/// Input normalization state starts at identity until
/// [`set_input_normalization`] installs dataset statistics.
pub fn init_params<T: Scalar>(cfg: &EncoderConfig, seed: u64) -> ParamStore<T> {
    let mut rng = stream_rng(seed, StreamTag::Init, 0, 0);
    let mut store = ParamStore::new();

    store.insert_state("stem.norm.mean", Tensor::zeros(&[cfg.input_channels]));
    store.insert_state(
        "stem.norm.std",
        Tensor::full(&[cfg.input_channels], T::ONE),
    );

    init_conv_bn(&mut store, &mut rng, "stem", cfg.input_channels, cfg.stem_channels, 3);

    let mut c_prev = cfg.stem_channels;
    for (i, &c) in cfg.stage_channels.iter().enumerate() {
        let stage = i + 1;
        init_conv_bn(&mut store, &mut rng, &format!("stage{stage}.block1"), c_prev, c, 3);
        init_conv_bn(&mut store, &mut rng, &format!("stage{stage}.block2"), c, c, 3);
        c_prev = c;
    }

    let pooled = cfg.pooled_dim();
    init_mlp(&mut store, &mut rng, "proj", pooled, pooled, cfg.embed_dim);

    for &stage in &cfg.companion_stages {
        let c = cfg.stage_channels[stage - 1];
        let p = format!("comp{stage}");
        init_conv_bn(&mut store, &mut rng, &format!("{p}.bott1"), c, c, 1);
        init_conv_bn(&mut store, &mut rng, &format!("{p}.bott2"), c, c, 3);
        init_conv_bn(&mut store, &mut rng, &format!("{p}.bott3"), c, c, 1);
        init_mlp(&mut store, &mut rng, &p, c, c, cfg.companion_dim);
    }

    store
}

/// Install dataset per-channel statistics into the stem normalization state.
pub fn set_input_normalization<T: Scalar>(
    store: &mut ParamStore<T>,
    mean: &[f64],
    std: &[f64],
) -> Result<()> {
    let m: Vec<T> = mean.iter().map(|&v| T::from_f64(v)).collect();
    let s: Vec<T> = std
        .iter()
        .map(|&v| T::from_f64(if v > 1e-8 { v } else { 1.0 }))
        .collect();
    *store.get_mut("stem.norm.mean")? = Tensor::from_vec(m);
    *store.get_mut("stem.norm.std")? = Tensor::from_vec(s);
    Ok(())
}

/// Owned values produced by [`Encoder::encode_with_taps`].
#[derive(Clone, Debug)]
pub struct EncoderOutput<T> {
    pub taps: Vec<Tensor<T>>,
    pub pooled: Tensor<T>,
    pub embedding: Tensor<T>,
    pub companions: BTreeMap<usize, Tensor<T>>,
}

/// A standalone encoder graph bound to a config, for feature extraction and
/// evaluation paths. Training composes [`build_encoder`] directly instead.
pub struct Encoder<T: Scalar> {
    graph: Graph<T>,
    nodes: EncoderNodes,
}

pub const ENCODER_INPUT: &str = "images";

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: &EncoderConfig, mode: Mode, companions: &[usize]) -> Self {
        let mut graph = Graph::new(mode);
        let nodes = build_encoder(&mut graph, cfg, ENCODER_INPUT, companions);
        Encoder { graph, nodes }
    }

    pub fn nodes(&self) -> &EncoderNodes {
        &self.nodes
    }

    pub fn mode(&self) -> Mode {
        self.graph.mode()
    }

    /// Forward a batch; values stay inside the graph and are reachable
    /// through [`Encoder::value`].
    pub fn forward(&mut self, params: &mut ParamStore<T>, images: &Tensor<T>) -> Result<()> {
        let mut bindings = Bindings::new();
        bindings.set(ENCODER_INPUT, images.clone());
        self.graph.forward(params, &bindings)
    }

    pub fn value(&self, node: NodeId) -> Result<&Tensor<T>> {
        self.graph.value(node)
    }

    /// Forward and return owned taps, pooled features, and embeddings.
    pub fn encode_with_taps(
        &mut self,
        params: &mut ParamStore<T>,
        images: &Tensor<T>,
    ) -> Result<EncoderOutput<T>> {
        self.forward(params, images)?;
        Ok(EncoderOutput {
            taps: self
                .nodes
                .taps
                .iter()
                .map(|&t| self.graph.value(t).cloned())
                .collect::<Result<_>>()?,
            pooled: self.graph.value(self.nodes.pooled)?.clone(),
            embedding: self.graph.value(self.nodes.embedding)?.clone(),
            companions: self
                .nodes
                .companions
                .iter()
                .map(|(&s, &n)| Ok((s, self.graph.value(n)?.clone())))
                .collect::<Result<_>>()?,
        })
    }
}

/// Rows of an embedding matrix whose norm hit the epsilon guard (zero
/// vectors from degenerate inputs).
pub fn degenerate_rows<T: Scalar>(embeddings: &Tensor<T>) -> Vec<usize> {
    let d = *embeddings.shape().last().unwrap_or(&1);
    embeddings
        .data()
        .chunks(d)
        .enumerate()
        .filter(|(_, row)| row.iter().map(|&v| v * v).sum::<T>().to_f64() < 1e-12)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            input_channels: 3,
            stem_channels: 4,
            stage_channels: vec![4, 8],
            stage_strides: vec![false, true],
            embed_dim: 8,
            companion_stages: vec![1],
            companion_dim: 8,
            bn_momentum: 0.9,
        }
    }

    fn random_images(b: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = stream_rng(seed, StreamTag::Synthetic, 0, 0);
        Tensor::new(
            vec![b, c, h, w],
            (0..b * c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny_cfg();
        let a: ParamStore<f32> = init_params(&cfg, 11);
        let b: ParamStore<f32> = init_params(&cfg, 11);
        let c: ParamStore<f32> = init_params(&cfg, 12);
        for ((na, sa), (nb, sb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(sa.tensor.data(), sb.tensor.data());
        }
        let differs = a
            .iter()
            .zip(c.iter())
            .any(|((_, sa), (_, sc))| sa.tensor.data() != sc.tensor.data());
        assert!(differs);
    }

    #[test]
    fn parameter_count_matches_shape_arithmetic() {
        let cfg = tiny_cfg();
        let store: ParamStore<f64> = init_params(&cfg, 3);
        // stem 3->4 + bn(4+4); stage1 4->4,4->4 + bns; stage2 4->8,8->8 + bns;
        // proj 8->8->8 mlp; companion at stage1: 1x1,3x3,1x1 convs at 4ch + bns + mlp 4->4->8
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k;
        let bn = |c: usize| 2 * c;
        let mlp = |i: usize, h: usize, o: usize| h * i + h + o * h + o;
        let expected = conv(3, 4, 3)
            + bn(4)
            + conv(4, 4, 3)
            + bn(4)
            + conv(4, 4, 3)
            + bn(4)
            + conv(4, 8, 3)
            + bn(8)
            + conv(8, 8, 3)
            + bn(8)
            + mlp(8, 8, 8)
            + conv(4, 4, 1)
            + bn(4)
            + conv(4, 4, 3)
            + bn(4)
            + conv(4, 4, 1)
            + bn(4)
            + mlp(4, 4, 8);
        assert_eq!(store.num_trainable_elements(), expected);
    }

    #[test]
    fn tap_spatial_sizes_follow_stride_flags() {
        let cfg = EncoderConfig {
            stage_channels: vec![4, 8, 8, 8],
            stage_strides: vec![false, true, true, true],
            stem_channels: 4,
            embed_dim: 8,
            companion_stages: vec![],
            companion_dim: 8,
            ..EncoderConfig::default()
        };
        let mut params: ParamStore<f32> = init_params(&cfg, 5);
        let mut enc = Encoder::new(&cfg, Mode::Train, &[]);
        let out = enc
            .encode_with_taps(&mut params, &random_images(2, 3, 32, 32, 1))
            .unwrap();
        let sizes: Vec<usize> = out.taps.iter().map(|t| t.shape()[2]).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4]);
        assert_eq!(out.pooled.shape(), &[2, 8]);
        assert_eq!(out.embedding.shape(), &[2, 8]);
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let cfg = tiny_cfg();
        let mut params: ParamStore<f32> = init_params(&cfg, 7);
        let mut enc = Encoder::new(&cfg, Mode::Train, &[1]);
        let out = enc
            .encode_with_taps(&mut params, &random_images(3, 3, 16, 16, 2))
            .unwrap();
        for row in out.embedding.data().chunks(8) {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "norm {n}");
        }
        for row in out.companions[&1].data().chunks(8) {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "companion norm {n}");
        }
    }

    #[test]
    fn eval_mode_is_batch_independent() {
        let cfg = tiny_cfg();
        let mut params: ParamStore<f32> = init_params(&cfg, 9);
        let mut enc = Encoder::new(&cfg, Mode::Eval, &[]);
        let batch = random_images(8, 3, 16, 16, 3);
        let out8 = enc.encode_with_taps(&mut params, &batch).unwrap();

        let first = Tensor::new(
            vec![1, 3, 16, 16],
            batch.data()[..3 * 16 * 16].to_vec(),
        )
        .unwrap();
        let out1 = enc.encode_with_taps(&mut params, &first).unwrap();
        for (a, b) in out1.embedding.data().iter().zip(out8.embedding.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn companion_heads_leave_backbone_bit_identical() {
        let cfg = tiny_cfg();
        let images = random_images(2, 3, 16, 16, 4);

        let mut p1: ParamStore<f32> = init_params(&cfg, 21);
        let mut with = Encoder::new(&cfg, Mode::Eval, &[1]);
        let out_with = with.encode_with_taps(&mut p1, &images).unwrap();

        let mut p2: ParamStore<f32> = init_params(&cfg, 21);
        let mut without = Encoder::new(&cfg, Mode::Eval, &[]);
        let out_without = without.encode_with_taps(&mut p2, &images).unwrap();

        assert_eq!(out_with.embedding.data(), out_without.embedding.data());
        assert_eq!(out_with.pooled.data(), out_without.pooled.data());
    }

    #[test]
    fn different_images_get_distinct_companion_embeddings() {
        let cfg = tiny_cfg();
        let mut params: ParamStore<f32> = init_params(&cfg, 13);
        let mut enc = Encoder::new(&cfg, Mode::Eval, &[1]);
        let images = random_images(200, 3, 8, 8, 5);
        let out = enc.encode_with_taps(&mut params, &images).unwrap();
        let comp = &out.companions[&1];
        let d = comp.shape()[1];
        for i in 0..100 {
            let a = &comp.data()[2 * i * d..(2 * i + 1) * d];
            let b = &comp.data()[(2 * i + 1) * d..(2 * i + 2) * d];
            assert!(a != b, "pair {i} collided");
        }
    }

    #[test]
    fn zero_feature_map_yields_flagged_zero_vector() {
        // all-zero embedding row trips the epsilon guard after fc biases are
        // zero and weights map zero input to zero
        let t = Tensor::new(vec![2, 4], vec![0.0f32, 0.0, 0.0, 0.0, 0.6, 0.8, 0.0, 0.0]).unwrap();
        assert_eq!(degenerate_rows(&t), vec![0]);
    }

    #[test]
    fn config_validation_catches_bad_stages() {
        let mut cfg = tiny_cfg();
        cfg.companion_stages = vec![2];
        assert!(cfg.validate().is_err(), "last stage cannot carry a companion head");
        cfg.companion_stages = vec![0];
        assert!(cfg.validate().is_err());
        cfg.companion_stages = vec![1];
        assert!(cfg.validate().is_ok());
    }
}
