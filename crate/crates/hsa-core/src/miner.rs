//! Full-training-set embedding bank and cosine kNN positive selection.
//!
//! The bank holds L2-normalized pooled backbone features from the query
//! encoder in eval mode, refreshed on a fixed epoch cadence. Neighbor
//! lookups are exact scans; at desk scale that buys the brute-force
//! equivalence property outright.

use rand::Rng;

use crate::dataio::Dataset;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::numeric::{dot, l2_normalize_slice, Mode, ParamStore, Tensor};
use crate::rng::{stream_rng, StreamTag};

/// L2-normalized pooled features for every training sample, stamped with
/// the refresh epoch.
#[derive(Clone, Debug)]
pub struct EmbeddingBank {
    rows: Tensor<f32>,
    epoch_stamp: u64,
}

impl EmbeddingBank {
    pub fn from_rows(rows: Tensor<f32>, epoch_stamp: u64) -> Self {
        EmbeddingBank { rows, epoch_stamp }
    }

    pub fn len(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn epoch_stamp(&self) -> u64 {
        self.epoch_stamp
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows.data()[i * self.dim()..(i + 1) * self.dim()]
    }

    pub fn rows(&self) -> &Tensor<f32> {
        &self.rows
    }
}

/// Neighbor ids ordered by descending cosine similarity (ties broken by
/// smaller id); the anchor itself is always excluded.
#[derive(Clone, Debug)]
pub struct NeighborSet {
    pub anchor: u32,
    pub ids: Vec<u32>,
    pub scores: Vec<f32>,
}

/// Eval-mode forward over the whole training set with the query encoder;
/// pooled features are L2-normalized into the bank.
pub fn refresh_bank(
    encoder: &mut Encoder<f32>,
    query_params: &mut ParamStore<f32>,
    dataset: &Dataset,
    batch: usize,
    epoch_stamp: u64,
) -> Result<EmbeddingBank> {
    if encoder.mode() != Mode::Eval {
        return Err(Error::InvalidArgument(
            "bank refresh requires an eval-mode encoder".into(),
        ));
    }
    let n = dataset.len();
    let mut rows: Vec<f32> = Vec::new();
    let mut dim = 0;
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let ids: Vec<u32> = (start as u32..end as u32).collect();
        encoder.forward(query_params, &dataset.gather(&ids))?;
        let pooled = encoder.value(encoder.nodes().pooled)?;
        dim = pooled.shape()[1];
        rows.extend_from_slice(pooled.data());
        start = end;
    }
    for row in rows.chunks_mut(dim) {
        l2_normalize_slice(row, 1e-12);
    }
    Ok(EmbeddingBank {
        rows: Tensor::new(vec![n, dim], rows)?,
        epoch_stamp,
    })
}

/// Exact top-k cosine neighbors of `anchor` within the bank.
pub fn knn_neighbors(bank: &EmbeddingBank, anchor: u32, k: usize) -> Result<NeighborSet> {
    let n = bank.len();
    if anchor as usize >= n {
        return Err(Error::InvalidArgument(format!(
            "anchor {anchor} out of range for bank of {n}"
        )));
    }
    if k >= n {
        return Err(Error::InvalidArgument(format!(
            "k={k} must be smaller than the bank size {n}"
        )));
    }
    if k == 0 {
        return Ok(NeighborSet {
            anchor,
            ids: Vec::new(),
            scores: Vec::new(),
        });
    }
    let q = bank.row(anchor as usize);
    let mut scored: Vec<(f32, u32)> = (0..n as u32)
        .filter(|&i| i != anchor)
        .map(|i| (dot(bank.row(i as usize), q), i))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.truncate(k);
    Ok(NeighborSet {
        anchor,
        ids: scored.iter().map(|&(_, i)| i).collect(),
        scores: scored.iter().map(|&(s, _)| s).collect(),
    })
}

/// Neighbor table for every anchor, computed once per refresh.
pub fn all_neighbors(bank: &EmbeddingBank, k: usize) -> Result<Vec<Vec<u32>>> {
    (0..bank.len() as u32)
        .map(|a| knn_neighbors(bank, a, k).map(|n| n.ids))
        .collect()
}

/// Uniform draw from the neighbor set; an empty set (k = 0) falls back to
/// the anchor itself.
pub fn sample_positive(neighbors: &NeighborSet, seed: u64) -> u32 {
    if neighbors.ids.is_empty() {
        return neighbors.anchor;
    }
    let mut rng = stream_rng(seed, StreamTag::Mining, neighbors.anchor as u64, 0);
    neighbors.ids[rng.gen_range(0..neighbors.ids.len())]
}

/// Uniform draw from a plain neighbor-id slice (the precomputed table path).
pub fn sample_positive_from(ids: &[u32], anchor: u32, seed: u64) -> u32 {
    if ids.is_empty() {
        return anchor;
    }
    let mut rng = stream_rng(seed, StreamTag::Mining, anchor as u64, 0);
    ids[rng.gen_range(0..ids.len())]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SyntheticSpec};
    use crate::encoder::{init_params, EncoderConfig};

    fn bank_from(rows: Vec<Vec<f32>>) -> EmbeddingBank {
        let d = rows[0].len();
        let mut data: Vec<f32> = rows.into_iter().flatten().collect();
        for row in data.chunks_mut(d) {
            l2_normalize_slice(row, 1e-12);
        }
        let n = data.len() / d;
        EmbeddingBank::from_rows(Tensor::new(vec![n, d], data).unwrap(), 0)
    }

    #[test]
    fn worked_example_from_unit_vectors() {
        let bank = bank_from(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]);
        let n = knn_neighbors(&bank, 0, 1).unwrap();
        assert_eq!(n.ids, vec![2]);
        assert!((n.scores[0] - 0.6).abs() < 1e-6);
        let n2 = knn_neighbors(&bank, 0, 2).unwrap();
        assert_eq!(n2.ids, vec![2, 1]);
    }

    #[test]
    fn anchor_is_always_excluded_and_k_bounded() {
        let bank = bank_from(vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.8, 0.2]]);
        for k in 0..3 {
            let n = knn_neighbors(&bank, 1, k).unwrap();
            assert!(!n.ids.contains(&1));
            assert_eq!(n.ids.len(), k);
        }
        assert!(knn_neighbors(&bank, 1, 3).is_err());
        assert!(knn_neighbors(&bank, 9, 1).is_err());
    }

    #[test]
    fn matches_bruteforce_scan_with_tie_break() {
        let mut rng = stream_rng(31, StreamTag::Queue, 0, 0);
        let n = 300;
        let d = 16;
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let bank = bank_from(rows);
        for k in [1usize, 5, 10, 50] {
            for anchor in [0u32, 7, 299] {
                let got = knn_neighbors(&bank, anchor, k).unwrap();
                // independent oracle: full argsort by (-sim, id)
                let q = bank.row(anchor as usize);
                let mut all: Vec<(f32, u32)> = (0..n as u32)
                    .filter(|&i| i != anchor)
                    .map(|i| (dot(bank.row(i as usize), q), i))
                    .collect();
                all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                let want: Vec<u32> = all[..k].iter().map(|&(_, i)| i).collect();
                assert_eq!(got.ids, want, "k={k} anchor={anchor}");
            }
        }
    }

    #[test]
    fn scores_are_nonincreasing_and_in_range() {
        let mut rng = stream_rng(77, StreamTag::Queue, 1, 0);
        let rows: Vec<Vec<f32>> = (0..64)
            .map(|_| (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let bank = bank_from(rows);
        let n = knn_neighbors(&bank, 3, 20).unwrap();
        for w in n.scores.windows(2) {
            assert!(w[0] >= w[1]);
        }
        for &s in &n.scores {
            assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&s));
        }
    }

    #[test]
    fn k_zero_falls_back_to_anchor() {
        let bank = bank_from(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let n = knn_neighbors(&bank, 1, 0).unwrap();
        assert!(n.ids.is_empty());
        assert_eq!(sample_positive(&n, 42), 1);
    }

    #[test]
    fn singleton_sampling_is_deterministic_and_uniform_overall() {
        let single = NeighborSet {
            anchor: 5,
            ids: vec![9],
            scores: vec![0.5],
        };
        assert_eq!(sample_positive(&single, 0), 9);
        assert_eq!(sample_positive(&single, 123), 9);

        let ten = NeighborSet {
            anchor: 0,
            ids: (1..=10).collect(),
            scores: vec![0.0; 10],
        };
        let mut counts = vec![0usize; 11];
        let draws = 10_000;
        for s in 0..draws {
            counts[sample_positive(&ten, s) as usize] += 1;
        }
        // 3 sigma of Binomial(1e4, 0.1)
        let sigma = (draws as f64 * 0.1 * 0.9).sqrt();
        for id in 1..=10 {
            let dev = (counts[id] as f64 - 1000.0).abs();
            assert!(dev < 3.0 * sigma, "id {id} count {}", counts[id]);
        }
    }

    #[test]
    fn refresh_is_deterministic_unit_norm_and_matches_direct_encoding() {
        let spec = SyntheticSpec {
            num_classes: 3,
            samples_per_class: 5,
            image_size: (16, 16),
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec, 4).unwrap();
        let cfg = EncoderConfig {
            stem_channels: 4,
            stage_channels: vec![4, 8],
            stage_strides: vec![true, true],
            embed_dim: 8,
            companion_stages: vec![],
            companion_dim: 8,
            ..EncoderConfig::default()
        };
        let mut params: ParamStore<f32> = init_params(&cfg, 6);
        let mut enc = Encoder::new(&cfg, Mode::Eval, &[]);

        let a = refresh_bank(&mut enc, &mut params, &ds, 4, 0).unwrap();
        let b = refresh_bank(&mut enc, &mut params, &ds, 7, 0).unwrap();
        assert_eq!(a.rows().data(), b.rows().data());

        for i in 0..a.len() {
            let norm: f32 = a.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }

        // spot-check row 3 against a direct single-image encoding
        let out = enc.encode_with_taps(&mut params, &ds.gather(&[3])).unwrap();
        let mut pooled = out.pooled.into_data();
        l2_normalize_slice(&mut pooled, 1e-12);
        for (x, y) in a.row(3).iter().zip(pooled.iter()) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }

        let train_mode_enc = &mut Encoder::new(&cfg, Mode::Train, &[]);
        assert!(refresh_bank(train_mode_enc, &mut params, &ds, 4, 0).is_err());
    }
}
