//! Momentum query/key encoder pair with per-head FIFO negative queues.
//!
//! Keys are produced by a separate graph evaluated against the key
//! [`ParamStore`]; no backward pass ever runs on it, so gradients cannot
//! reach the key parameters by construction. The key encoder is advanced
//! only by the exponential moving average in [`momentum_update`].

use std::collections::BTreeMap;

use rand::Rng;

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::numeric::{l2_normalize_slice, ParamStore, Scalar, Tensor};

/// One contrastive loss head: the final embedding or a stage companion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum LossHead {
    Final,
    Stage(usize),
}

impl std::fmt::Display for LossHead {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossHead::Final => write!(f, "final"),
            LossHead::Stage(l) => write!(f, "stage{l}"),
        }
    }
}

/// Fixed-capacity FIFO ring of unit key vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    buf: Vec<f32>,
    cursor: usize,
    fill: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        NegativeQueue {
            capacity,
            dim,
            buf: vec![0.0; capacity * dim],
            cursor: 0,
            fill: 0,
        }
    }

    /// Start warmed up with random unit vectors (the default policy).
    pub fn random_unit(capacity: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut q = NegativeQueue::new(capacity, dim);
        for row in q.buf.chunks_mut(dim) {
            for v in row.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            if l2_normalize_slice(row, 1e-12) <= 1e-12 {
                row[0] = 1.0;
            }
        }
        q.fill = capacity;
        q
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn is_warm(&self) -> bool {
        self.fill == self.capacity
    }

    /// Append rows of `[B,D]` in order, overwriting the oldest entries once
    /// at capacity.
    pub fn enqueue(&mut self, keys: &Tensor<f32>) -> Result<()> {
        if keys.rank() != 2 || keys.shape()[1] != self.dim {
            return Err(Error::shape(
                "NegativeQueue::enqueue",
                format!("expected [*, {}], got {:?}", self.dim, keys.shape()),
            ));
        }
        for row in keys.data().chunks(self.dim) {
            self.buf[self.cursor * self.dim..(self.cursor + 1) * self.dim].copy_from_slice(row);
            self.cursor = (self.cursor + 1) % self.capacity;
            self.fill = (self.fill + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Snapshot of the stored vectors, oldest first. In strict mode a queue
    /// that has not warmed up is an error; lenient mode returns the current
    /// fill.
    pub fn negatives(&self, strict: bool) -> Result<Tensor<f32>> {
        if strict && !self.is_warm() {
            return Err(Error::InvalidArgument(format!(
                "negative queue warmup incomplete: {}/{}",
                self.fill, self.capacity
            )));
        }
        let mut data = Vec::with_capacity(self.fill * self.dim);
        if self.fill < self.capacity {
            data.extend_from_slice(&self.buf[..self.fill * self.dim]);
        } else {
            data.extend_from_slice(&self.buf[self.cursor * self.dim..]);
            data.extend_from_slice(&self.buf[..self.cursor * self.dim]);
        }
        Tensor::new(vec![self.fill, self.dim], data)
    }

    pub fn raw_parts(&self) -> (&[f32], usize, usize) {
        (&self.buf, self.cursor, self.fill)
    }

    pub fn from_raw_parts(
        capacity: usize,
        dim: usize,
        buf: Vec<f32>,
        cursor: usize,
        fill: usize,
    ) -> Result<Self> {
        if buf.len() != capacity * dim || cursor >= capacity.max(1) || fill > capacity {
            return Err(Error::Checkpoint("negative queue state is inconsistent".into()));
        }
        Ok(NegativeQueue {
            capacity,
            dim,
            buf,
            cursor,
            fill,
        })
    }
}

/// Query parameters, their EMA key copy, and one negative queue per active
/// loss head.
#[derive(Clone, Debug)]
pub struct MomentumPair<T: Scalar> {
    pub query: ParamStore<T>,
    pub key: ParamStore<T>,
    pub momentum: f64,
    pub queues: BTreeMap<LossHead, NegativeQueue>,
}

impl<T: Scalar> MomentumPair<T> {
    pub fn new(query: ParamStore<T>, momentum: f64) -> Self {
        let key = query.clone();
        MomentumPair {
            query,
            key,
            momentum,
            queues: BTreeMap::new(),
        }
    }
}

/// EMA step `theta_k <- m*theta_k + (1-m)*theta_q` over every trainable
/// tensor (batchnorm affine included); non-trainable state (running
/// statistics, stem normalization) is copied from the query side.
pub fn momentum_update<T: Scalar>(pair: &mut MomentumPair<T>) -> Result<()> {
    if !(0.0..=1.0).contains(&pair.momentum) {
        return Err(Error::InvalidArgument(format!(
            "momentum must lie in [0,1], got {}",
            pair.momentum
        )));
    }
    if !pair.query.shape_isomorphic(&pair.key) {
        return Err(Error::shape(
            "momentum_update",
            "query and key stores are not shape-isomorphic",
        ));
    }
    let m = T::from_f64(pair.momentum);
    let one_m = T::ONE - m;
    for ((_, ks), (_, qs)) in pair.key.iter_mut().zip(pair.query.iter()) {
        if ks.trainable {
            for (k, &q) in ks.tensor.data_mut().iter_mut().zip(qs.tensor.data()) {
                *k = m * *k + one_m * q;
            }
        } else {
            ks.tensor = qs.tensor.clone();
        }
    }
    Ok(())
}

/// Per-head key embeddings for one batch of key views.
#[derive(Clone, Debug)]
pub struct KeyEmbeddings {
    /// Final-head keys `[B, D_e]`.
    pub final_keys: Tensor<f32>,
    /// Stage (1-based) -> companion keys `[B, D_comp]`.
    pub stage_keys: BTreeMap<usize, Tensor<f32>>,
}

/// Forward key views through the key encoder. The key graph never sees a
/// backward pass, so this is gradient-free by construction.
pub fn encode_keys(
    encoder: &mut Encoder<f32>,
    key_params: &mut ParamStore<f32>,
    views: &Tensor<f32>,
) -> Result<KeyEmbeddings> {
    encoder.forward(key_params, views)?;
    let nodes = encoder.nodes().clone();
    Ok(KeyEmbeddings {
        final_keys: encoder.value(nodes.embedding)?.clone(),
        stage_keys: nodes
            .companions
            .iter()
            .map(|(&s, &n)| Ok((s, encoder.value(n)?.clone())))
            .collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, Encoder, EncoderConfig};
    use crate::numeric::Mode;
    use crate::rng::{stream_rng, StreamTag};
    use proptest::prelude::*;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor<f32> {
        let mut rng = stream_rng(seed, StreamTag::Queue, 0, 0);
        let mut data: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        for row in data.chunks_mut(d) {
            l2_normalize_slice(row, 1e-12);
        }
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn fifo_keeps_last_capacity_entries() {
        // capacity 4, insert a,b,c,d,e -> queue holds b,c,d,e
        let mut q = NegativeQueue::new(4, 1);
        for v in [1.0f32, 2.0, 3.0, 4.0, 5.0] {
            q.enqueue(&Tensor::new(vec![1, 1], vec![v]).unwrap()).unwrap();
        }
        assert_eq!(q.negatives(true).unwrap().data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn partial_fill_then_batch_evicts_oldest() {
        // capacity 8 holding 7, insert 3 -> oldest 2 evicted
        let mut q = NegativeQueue::new(8, 1);
        let seven: Vec<f32> = (1..=7).map(|v| v as f32).collect();
        q.enqueue(&Tensor::new(vec![7, 1], seven).unwrap()).unwrap();
        assert_eq!(q.fill(), 7);
        q.enqueue(&Tensor::new(vec![3, 1], vec![8.0, 9.0, 10.0]).unwrap())
            .unwrap();
        assert_eq!(q.fill(), 8);
        assert_eq!(
            q.negatives(true).unwrap().data(),
            &[3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]
        );
    }

    #[test]
    fn strict_negatives_requires_warmup_lenient_does_not() {
        let mut q = NegativeQueue::new(4, 2);
        q.enqueue(&unit_rows(2, 2, 1)).unwrap();
        assert!(q.negatives(true).is_err());
        let n = q.negatives(false).unwrap();
        assert_eq!(n.shape(), &[2, 2]);
    }

    #[test]
    fn enqueue_rejects_dim_mismatch() {
        let mut q = NegativeQueue::new(4, 3);
        assert!(q.enqueue(&unit_rows(2, 2, 1)).is_err());
    }

    #[test]
    fn random_init_is_warm_and_unit_norm() {
        let mut rng = stream_rng(0, StreamTag::Queue, 1, 1);
        let q = NegativeQueue::random_unit(16, 8, &mut rng);
        assert!(q.is_warm());
        let negs = q.negatives(true).unwrap();
        for row in negs.data().chunks(8) {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn two_snapshots_within_a_step_are_identical() {
        let mut q = NegativeQueue::new(4, 2);
        q.enqueue(&unit_rows(4, 2, 2)).unwrap();
        assert_eq!(q.negatives(true).unwrap(), q.negatives(true).unwrap());
    }

    #[test]
    fn momentum_boundaries_are_exact() {
        let cfg = EncoderConfig {
            stem_channels: 2,
            stage_channels: vec![2],
            stage_strides: vec![true],
            embed_dim: 4,
            companion_stages: vec![],
            companion_dim: 4,
            ..EncoderConfig::default()
        };
        let q: ParamStore<f32> = init_params(&cfg, 1);

        let mut pair = MomentumPair::new(q.clone(), 1.0);
        // move the query side, keep m=1 -> key unchanged
        for (_, slot) in pair.query.iter_mut() {
            if slot.trainable {
                for v in slot.tensor.data_mut() {
                    *v += 1.0;
                }
            }
        }
        let before = pair.key.clone();
        momentum_update(&mut pair).unwrap();
        for ((_, a), (_, b)) in pair.key.iter().zip(before.iter()) {
            if a.trainable {
                assert_eq!(a.tensor.data(), b.tensor.data());
            }
        }

        pair.momentum = 0.0;
        momentum_update(&mut pair).unwrap();
        for ((_, k), (_, qs)) in pair.key.iter().zip(pair.query.iter()) {
            assert_eq!(k.tensor.data(), qs.tensor.data());
        }
    }

    #[test]
    fn momentum_hand_arithmetic() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert_param("w", Tensor::from_vec(vec![0.0]));
        let mut pair = MomentumPair::new(store, 0.999);
        pair.query.get_mut("w").unwrap().data_mut()[0] = 1.0;
        pair.key.get_mut("w").unwrap().data_mut()[0] = 0.0;
        momentum_update(&mut pair).unwrap();
        let k = pair.key.get("w").unwrap().data()[0];
        assert!((k - 0.001).abs() < 1e-12, "got {k}");
    }

    #[test]
    fn key_equals_query_at_initialization() {
        let cfg = EncoderConfig {
            stem_channels: 2,
            stage_channels: vec![2, 4],
            stage_strides: vec![false, true],
            embed_dim: 4,
            companion_stages: vec![1],
            companion_dim: 4,
            ..EncoderConfig::default()
        };
        let store: ParamStore<f32> = init_params(&cfg, 3);
        let mut pair = MomentumPair::new(store, 0.99);

        let views = unit_rows(2, 3 * 8 * 8, 5);
        let views = Tensor::new(vec![2, 3, 8, 8], views.into_data()).unwrap();

        let mut qenc = Encoder::new(&cfg, Mode::Eval, &[1]);
        qenc.forward(&mut pair.query, &views).unwrap();
        let q_emb = qenc.value(qenc.nodes().embedding).unwrap().clone();

        let mut kenc = Encoder::new(&cfg, Mode::Eval, &[1]);
        let keys = encode_keys(&mut kenc, &mut pair.key, &views).unwrap();
        assert_eq!(q_emb.data(), keys.final_keys.data());
        assert!(keys.stage_keys.contains_key(&1));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn queue_contents_equal_last_k_enqueued(
            capacity in 1usize..12,
            batches in proptest::collection::vec(1usize..5, 1..12),
        ) {
            let dim = 2;
            let mut q = NegativeQueue::new(capacity, dim);
            let mut log: Vec<f32> = Vec::new();
            let mut counter = 0f32;
            for b in batches {
                let mut data = Vec::new();
                for _ in 0..b {
                    counter += 1.0;
                    data.extend_from_slice(&[counter, -counter]);
                    log.extend_from_slice(&[counter, -counter]);
                }
                q.enqueue(&Tensor::new(vec![b, dim], data).unwrap()).unwrap();
                prop_assert!(q.fill() <= capacity);
            }
            let want_rows = (log.len() / dim).min(capacity);
            let expect = &log[log.len() - want_rows * dim..];
            let got = q.negatives(false).unwrap();
            prop_assert_eq!(got.data(), expect);
        }
    }
}
