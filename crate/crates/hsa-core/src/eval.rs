//! Evaluation protocols over a pretrained encoder: similarity-weighted kNN
//! classification, linear probing of frozen pooled features, semi-supervised
//! fine-tuning with two learning-rate groups, entropy-filtered pseudo-label
//! mining with joint retraining, per-class accuracy, and embedding export.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::augment::{augment_view, ViewParams};
use crate::dataio::Dataset;
use crate::encoder::{build_encoder, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::miner::refresh_bank;
use crate::numeric::{
    cosine_lr, dot, sgd_update_grouped, Bindings, Graph, Mode, OptimState, ParamStore, Tensor,
};
use crate::rng::{mix_seed, stream_rng, StreamTag};

/// Frozen features for a labeled set: unit rows of eval-mode pooled
/// backbone features plus their labels.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    features: Tensor<f32>,
    labels: Vec<u32>,
    num_classes: usize,
}

impl FeatureBank {
    pub fn new(features: Tensor<f32>, labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        if features.shape()[0] != labels.len() {
            return Err(Error::shape(
                "FeatureBank::new",
                format!("{} rows for {} labels", features.shape()[0], labels.len()),
            ));
        }
        Ok(FeatureBank {
            features,
            labels,
            num_classes,
        })
    }

    /// Extract eval-mode pooled features for a whole dataset.
    pub fn from_dataset(
        encoder: &mut Encoder<f32>,
        params: &mut ParamStore<f32>,
        dataset: &Dataset,
        batch: usize,
    ) -> Result<Self> {
        let bank = refresh_bank(encoder, params, dataset, batch, 0)?;
        FeatureBank::new(
            bank.rows().clone(),
            dataset.labels().to_vec(),
            dataset.num_classes(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor<f32> {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.features.data()[i * d..(i + 1) * d]
    }
}

/// Similarity-weighted kNN vote: exact top-N cosine neighbors, class score
/// `sum exp(sim/tau)` per label, argmax with smallest-label tie-break.
pub fn knn_classify(
    bank: &FeatureBank,
    query: &[f32],
    n_neighbors: usize,
    tau_knn: f64,
) -> Result<u32> {
    if bank.is_empty() {
        return Err(Error::InvalidArgument("feature bank is empty".into()));
    }
    if n_neighbors == 0 || n_neighbors > bank.len() {
        return Err(Error::InvalidArgument(format!(
            "n_neighbors {} must lie in 1..={}",
            n_neighbors,
            bank.len()
        )));
    }
    let mut scored: Vec<(f32, u32)> = (0..bank.len())
        .map(|i| (dot(bank.row(i), query), i as u32))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    scored.truncate(n_neighbors);

    let mut votes = vec![0.0f64; bank.num_classes];
    for &(sim, id) in &scored {
        votes[bank.labels[id as usize] as usize] += (sim as f64 / tau_knn).exp();
    }
    let mut best = 0usize;
    for (c, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = c;
        }
    }
    Ok(best as u32)
}

/// Top-1 accuracy of the weighted kNN classifier over a query bank.
pub fn knn_accuracy(
    train: &FeatureBank,
    queries: &FeatureBank,
    n_neighbors: usize,
    tau_knn: f64,
) -> Result<f64> {
    let mut correct = 0usize;
    for i in 0..queries.len() {
        if knn_classify(train, queries.row(i), n_neighbors, tau_knn)? == queries.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / queries.len() as f64)
}

fn params_digest(params: &ParamStore<f32>) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for (name, slot) in params.iter() {
        hasher.update(name.as_bytes());
        for &v in slot.tensor.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.finalize().into()
}

/// Train a single affine layer with softmax cross-entropy on frozen
/// features by cosine-scheduled SGD; returns top-1 accuracy on the
/// validation features. The encoder is untouched by construction; the
/// before/after digest check turns any violation into a hard error.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe(
    encoder_params: &ParamStore<f32>,
    train: &FeatureBank,
    val: &FeatureBank,
    epochs: u64,
    base_lr: f64,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    let digest_before = params_digest(encoder_params);
    let classes = train.num_classes;
    let d = train.dim();

    let mut probe: ParamStore<f32> = ParamStore::new();
    let mut rng = stream_rng(seed, StreamTag::Head, 0, 0);
    let bound = (1.0 / d as f64).sqrt();
    probe.insert_param(
        "probe.w",
        Tensor::new(
            vec![classes, d],
            (0..classes * d)
                .map(|_| rand::Rng::gen_range(&mut rng, -bound..bound) as f32)
                .collect(),
        )?,
    );
    probe.insert_param("probe.b", Tensor::zeros(&[classes]));

    let mut g: Graph<f32> = Graph::new(Mode::Eval);
    let f = g.input("f");
    let w = g.param("probe.w");
    let b = g.param("probe.b");
    let logits = g.linear(f, w, Some(b));
    let t = g.input("t");
    let loss = g.softmax_cross_entropy(logits, t);

    let mut opt = OptimState::new();
    let steps_per_epoch = train.len().div_ceil(batch) as u64;
    let total_steps = (epochs * steps_per_epoch).max(1);
    let mut step = 0u64;
    for epoch in 0..epochs {
        for ids in crate::dataio::batch_indices(train.len(), batch, seed, epoch) {
            let mut fdata = Vec::with_capacity(ids.len() * d);
            let mut tdata = Vec::with_capacity(ids.len());
            for &i in &ids {
                fdata.extend_from_slice(train.row(i as usize));
                tdata.push(train.labels[i as usize] as f32);
            }
            let mut bind = Bindings::new();
            bind.set("f", Tensor::new(vec![ids.len(), d], fdata)?);
            bind.set("t", Tensor::from_vec(tdata));
            g.forward(&mut probe, &bind)?;
            let grads = g.backward(loss)?;
            let lr = cosine_lr(step, total_steps, base_lr)?;
            sgd_update_grouped(&mut probe, &grads, &mut opt, |_| lr, 0.9, 0.0)?;
            step += 1;
        }
    }

    if params_digest(encoder_params) != digest_before {
        return Err(Error::InvalidArgument(
            "linear probe mutated encoder parameters".into(),
        ));
    }

    // validation accuracy from the trained affine layer
    let wt = probe.get("probe.w")?;
    let bt = probe.get("probe.b")?;
    let mut correct = 0usize;
    for i in 0..val.len() {
        let row = val.row(i);
        let mut best = (f32::NEG_INFINITY, 0u32);
        for c in 0..classes {
            let score = dot(&wt.data()[c * d..(c + 1) * d], row) + bt.data()[c];
            if score > best.0 {
                best = (score, c as u32);
            }
        }
        if best.1 == val.labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / val.len() as f64)
}

/// Names of parameters that belong to the randomly initialized
/// classification head rather than the pretrained backbone.
fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

fn init_class_head(params: &mut ParamStore<f32>, pooled_dim: usize, classes: usize, seed: u64) {
    let mut rng = stream_rng(seed, StreamTag::Head, 1, 0);
    let bound = (1.0 / pooled_dim as f64).sqrt();
    params.insert_param(
        "head.fc.w",
        Tensor::new(
            vec![classes, pooled_dim],
            (0..classes * pooled_dim)
                .map(|_| rand::Rng::gen_range(&mut rng, -bound..bound) as f32)
                .collect(),
        )
        .expect("head shape"),
    );
    params.insert_param("head.fc.b", Tensor::zeros(&[classes]));
}

/// Supervised fine-tuning graph: encoder backbone -> pooled -> affine head
/// -> cross-entropy.
struct FinetuneGraph {
    graph: Graph<f32>,
    loss: crate::numeric::NodeId,
    logits: crate::numeric::NodeId,
}

fn build_finetune_graph(cfg: &EncoderConfig, mode: Mode) -> FinetuneGraph {
    let mut graph = Graph::new(mode);
    let nodes = build_encoder(&mut graph, cfg, "images", &[]);
    let w = graph.param("head.fc.w");
    let b = graph.param("head.fc.b");
    let logits = graph.linear(nodes.pooled, w, Some(b));
    let t = graph.input("t");
    let loss = graph.softmax_cross_entropy(logits, t);
    FinetuneGraph { graph, loss, logits }
}

/// Result of a fine-tuning run: the tuned parameters (with the `head.*`
/// classifier) and validation top-1 accuracy.
pub struct FinetuneOutcome {
    pub params: ParamStore<f32>,
    pub accuracy: f64,
}

/// Options for [`finetune_semi`] and the pseudo-label retraining pass.
#[derive(Clone, Debug)]
pub struct FinetuneOptions {
    pub epochs: u64,
    pub backbone_lr: f64,
    pub head_lr: f64,
    pub batch: usize,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// Multiply both rates by `decay_factor` every `decay_every` epochs
    /// (0 disables stepwise decay and uses the cosine schedule instead).
    pub decay_every: u64,
    pub decay_factor: f64,
    pub seed: u64,
}

/// Fine-tune all layers on a labeled subset with two learning-rate groups
/// (pretrained backbone vs. fresh classification head). Only random crops
/// and horizontal flips are applied. Labels default to the dataset's ground
/// truth; `label_override` substitutes pseudo-labels where present.
pub fn finetune_semi(
    cfg: &EncoderConfig,
    pretrained: &ParamStore<f32>,
    dataset: &Dataset,
    train_ids: &[u32],
    label_override: Option<&std::collections::BTreeMap<u32, u32>>,
    val: &Dataset,
    opts: &FinetuneOptions,
) -> Result<FinetuneOutcome> {
    if train_ids.is_empty() {
        return Err(Error::InvalidArgument(
            "fine-tuning requires a non-empty labeled set".into(),
        ));
    }
    let mut params = pretrained.clone();
    if !params.contains("head.fc.w") {
        init_class_head(&mut params, cfg.pooled_dim(), dataset.num_classes(), opts.seed);
    }
    if opts.epochs == 0 {
        let accuracy = classify_accuracy(cfg, &mut params, val, opts.batch)?;
        return Ok(FinetuneOutcome { params, accuracy });
    }

    let mut ft = build_finetune_graph(cfg, Mode::Train);
    let view = ViewParams::crop_flip_only();
    let (c, h, w) = dataset.image_shape();

    let mut opt = OptimState::new();
    let steps_per_epoch = train_ids.len().div_ceil(opts.batch) as u64;
    let total_steps = (opts.epochs * steps_per_epoch).max(1);
    let mut step = 0u64;

    for epoch in 0..opts.epochs {
        let order = crate::dataio::batch_indices(train_ids.len(), opts.batch, opts.seed, epoch);
        for batch in order {
            let ids: Vec<u32> = batch.iter().map(|&i| train_ids[i as usize]).collect();
            let mut images = Vec::with_capacity(ids.len() * c * h * w);
            let mut targets = Vec::with_capacity(ids.len());
            for (j, &id) in ids.iter().enumerate() {
                let img = Tensor::new(vec![c, h, w], dataset.image(id as usize).to_vec())?;
                let aug_seed = mix_seed(&[opts.seed, 0xf17e, epoch, step, j as u64]);
                images.extend_from_slice(augment_view(&img, &view, aug_seed).data());
                let label = label_override
                    .and_then(|m| m.get(&id).copied())
                    .unwrap_or_else(|| dataset.label(id as usize));
                targets.push(label as f32);
            }
            let mut bind = Bindings::new();
            bind.set("images", Tensor::new(vec![ids.len(), c, h, w], images)?);
            bind.set("t", Tensor::from_vec(targets));
            ft.graph.forward(&mut params, &bind)?;
            let grads = ft.graph.backward(ft.loss)?;

            let scale = if opts.decay_every > 0 {
                opts.decay_factor.powi((epoch / opts.decay_every) as i32)
            } else {
                cosine_lr(step, total_steps, 1.0)?
            };
            sgd_update_grouped(
                &mut params,
                &grads,
                &mut opt,
                |name| {
                    if is_head_param(name) {
                        opts.head_lr * scale
                    } else {
                        opts.backbone_lr * scale
                    }
                },
                opts.sgd_momentum,
                opts.weight_decay,
            )?;
            step += 1;
        }
    }

    let accuracy = classify_accuracy(cfg, &mut params, val, opts.batch)?;
    Ok(FinetuneOutcome { params, accuracy })
}

/// Eval-mode class distributions (softmax over the head logits) for the
/// given samples.
pub fn predict_distribution(
    cfg: &EncoderConfig,
    params: &mut ParamStore<f32>,
    dataset: &Dataset,
    ids: &[u32],
    batch: usize,
) -> Result<Tensor<f32>> {
    let mut ft = build_finetune_graph(cfg, Mode::Eval);
    let classes = dataset.num_classes();
    let mut out = Vec::with_capacity(ids.len() * classes);
    for chunk in ids.chunks(batch.max(1)) {
        let images = dataset.gather(chunk);
        let mut bind = Bindings::new();
        bind.set("images", images);
        bind.set("t", Tensor::zeros(&[chunk.len()]));
        ft.graph.forward(&mut params.clone(), &bind)?;
        let logits = ft.graph.value(ft.logits)?;
        for row in logits.data().chunks(classes) {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f32> = row.iter().map(|&v| (v - m).exp()).collect();
            let sum: f32 = exps.iter().sum();
            out.extend(exps.iter().map(|&e| e / sum));
        }
    }
    Tensor::new(vec![ids.len(), classes], out)
}

fn classify_accuracy(
    cfg: &EncoderConfig,
    params: &mut ParamStore<f32>,
    val: &Dataset,
    batch: usize,
) -> Result<f64> {
    let ids: Vec<u32> = (0..val.len() as u32).collect();
    let probs = predict_distribution(cfg, params, val, &ids, batch)?;
    let classes = val.num_classes();
    let mut correct = 0usize;
    for (i, row) in probs.data().chunks(classes).enumerate() {
        let mut best = 0usize;
        for (cl, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = cl;
            }
        }
        if best as u32 == val.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / val.len() as f64)
}

/// Entropy base for the confidence filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyBase {
    Nat,
    Bits,
}

/// Confident pseudo-labeled samples: ids kept by the entropy filter with
/// their argmax labels.
#[derive(Clone, Debug)]
pub struct PseudoLabelSet {
    pub ids: Vec<u32>,
    pub labels: Vec<u32>,
    pub entropies: Vec<f64>,
    pub threshold: f64,
}

impl PseudoLabelSet {
    pub fn as_override(&self) -> std::collections::BTreeMap<u32, u32> {
        self.ids.iter().copied().zip(self.labels.iter().copied()).collect()
    }
}

/// Filter class distributions by information entropy: keep samples with
/// `H <= threshold` and convert them to one-hot argmax labels.
pub fn mine_pseudo_labels(
    probs: &Tensor<f32>,
    ids: &[u32],
    threshold: f64,
    base: EntropyBase,
) -> Result<PseudoLabelSet> {
    let classes = probs.shape()[1];
    if probs.shape()[0] != ids.len() {
        return Err(Error::shape(
            "mine_pseudo_labels",
            format!("{} rows for {} ids", probs.shape()[0], ids.len()),
        ));
    }
    let mut kept = PseudoLabelSet {
        ids: Vec::new(),
        labels: Vec::new(),
        entropies: Vec::new(),
        threshold,
    };
    for (row, &id) in probs.data().chunks(classes).zip(ids) {
        let sum: f64 = row.iter().map(|&p| p as f64).sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::InvalidArgument(format!(
                "distribution for sample {id} sums to {sum}, not 1"
            )));
        }
        let mut entropy = 0.0f64;
        let mut argmax = 0usize;
        for (c, &p) in row.iter().enumerate() {
            let p = p as f64;
            if p > 0.0 {
                entropy -= p * p.ln();
            }
            if p > row[argmax] as f64 {
                argmax = c;
            }
        }
        if base == EntropyBase::Bits {
            entropy /= std::f64::consts::LN_2;
        }
        if entropy <= threshold {
            kept.ids.push(id);
            kept.labels.push(argmax as u32);
            kept.entropies.push(entropy);
        }
    }
    Ok(kept)
}

/// Per-class accuracy table; classes absent from the labels report `None`
/// and are excluded from the macro average.
#[derive(Clone, Debug, PartialEq)]
pub struct PerClassReport {
    pub per_class: Vec<Option<f64>>,
    pub macro_average: f64,
}

pub fn report_per_class(
    predictions: &[u32],
    labels: &[u32],
    num_classes: usize,
) -> Result<PerClassReport> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            "report_per_class",
            format!("{} predictions for {} labels", predictions.len(), labels.len()),
        ));
    }
    let mut total = vec![0usize; num_classes];
    let mut correct = vec![0usize; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        total[l as usize] += 1;
        if p == l {
            correct[l as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = total
        .iter()
        .zip(&correct)
        .map(|(&t, &c)| if t == 0 { None } else { Some(c as f64 / t as f64) })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_average = present.iter().sum::<f64>() / present.len().max(1) as f64;
    Ok(PerClassReport {
        per_class,
        macro_average,
    })
}

/// Write one record per sample (`id label v0 .. v{D-1}`) under a
/// `dim=<D> count=<N>` header. Rows reproduce the embedding bank exactly.
pub fn export_embeddings(
    encoder: &mut Encoder<f32>,
    params: &mut ParamStore<f32>,
    dataset: &Dataset,
    batch: usize,
    path: &Path,
) -> Result<()> {
    let bank = refresh_bank(encoder, params, dataset, batch, 0)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = std::io::BufWriter::new(file);
    let write = |out: &mut std::io::BufWriter<std::fs::File>, s: String| {
        out.write_all(s.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    };
    write(&mut out, format!("dim={} count={}\n", bank.dim(), bank.len()))?;
    for i in 0..bank.len() {
        let mut line = format!("{} {}", i, dataset.label(i));
        for v in bank.row(i) {
            line.push(' ');
            line.push_str(&format!("{v:e}"));
        }
        line.push('\n');
        write(&mut out, line)?;
    }
    out.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, Split, SyntheticSpec};
    use crate::encoder::init_params;
    use crate::numeric::l2_normalize_slice;

    fn unit_bank(rows: Vec<(Vec<f32>, u32)>, classes: usize) -> FeatureBank {
        let d = rows[0].0.len();
        let labels: Vec<u32> = rows.iter().map(|r| r.1).collect();
        let mut data: Vec<f32> = rows.into_iter().flat_map(|r| r.0).collect();
        for row in data.chunks_mut(d) {
            l2_normalize_slice(row, 1e-12);
        }
        let n = labels.len();
        FeatureBank::new(Tensor::new(vec![n, d], data).unwrap(), labels, classes).unwrap()
    }

    #[test]
    fn single_sample_bank_forces_its_label() {
        let bank = unit_bank(vec![(vec![0.0, 1.0], 3)], 5);
        assert_eq!(knn_classify(&bank, &[1.0, 0.0], 1, 0.07).unwrap(), 3);
    }

    #[test]
    fn weighted_vote_prefers_near_neighbor() {
        // sims 0.9 (class 0) and 0.1 (class 1): e^{12.86} dwarfs e^{1.43}
        let bank = unit_bank(vec![(vec![0.9, (1.0f32 - 0.81).sqrt()], 0), (vec![0.1, (1.0f32 - 0.01).sqrt()], 1)], 2);
        let got = knn_classify(&bank, &[1.0, 0.0], 2, 0.07).unwrap();
        assert_eq!(got, 0);
    }

    #[test]
    fn huge_tau_with_full_bank_degenerates_to_majority() {
        let bank = unit_bank(
            vec![
                (vec![1.0, 0.0], 1),
                (vec![0.9, 0.1], 1),
                (vec![0.8, 0.2], 1),
                (vec![0.0, 1.0], 0),
                (vec![0.1, 0.9], 0),
            ],
            2,
        );
        // query aligned with class-0 rows, but majority of the FULL bank is 1
        let got = knn_classify(&bank, &[0.0, 1.0], 5, 1e9).unwrap();
        assert_eq!(got, 1);
    }

    #[test]
    fn knn_rejects_empty_or_oversized() {
        let bank = unit_bank(vec![(vec![1.0, 0.0], 0)], 2);
        assert!(knn_classify(&bank, &[1.0, 0.0], 2, 0.07).is_err());
        assert!(knn_classify(&bank, &[1.0, 0.0], 0, 0.07).is_err());
    }

    fn separable_features(n_per_class: usize, classes: usize) -> FeatureBank {
        // one-hot features perfectly encode the class
        let mut rows = Vec::new();
        for c in 0..classes {
            for _ in 0..n_per_class {
                let mut v = vec![0.0f32; classes];
                v[c] = 1.0;
                rows.push((v, c as u32));
            }
        }
        unit_bank(rows, classes)
    }

    #[test]
    fn probe_on_separable_features_is_perfect() {
        let train = separable_features(20, 4);
        let val = separable_features(5, 4);
        let enc: ParamStore<f32> = ParamStore::new();
        let acc = linear_probe(&enc, &train, &val, 20, 0.5, 16, 1).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn zero_epoch_probe_sits_at_chance() {
        let train = separable_features(20, 4);
        let val = separable_features(50, 4);
        let enc: ParamStore<f32> = ParamStore::new();
        let acc = linear_probe(&enc, &train, &val, 0, 0.5, 16, 1).unwrap();
        assert!((acc - 0.25).abs() < 0.2, "untrained probe accuracy {acc}");
    }

    #[test]
    fn entropy_filter_keeps_confident_drops_uniform() {
        // uniform over 10 classes: H = ln 10 > 1 -> dropped
        // one-hot: H = 0 -> kept; (0.9, 0.1): H ~ 0.325 -> kept with label 0
        let probs = Tensor::new(
            vec![3, 10],
            [
                vec![0.1f32; 10],
                {
                    let mut v = vec![0.0f32; 10];
                    v[7] = 1.0;
                    v
                },
                {
                    let mut v = vec![0.0f32; 10];
                    v[0] = 0.9;
                    v[1] = 0.1;
                    v
                },
            ]
            .concat(),
        )
        .unwrap();
        let kept = mine_pseudo_labels(&probs, &[10, 11, 12], 1.0, EntropyBase::Nat).unwrap();
        assert_eq!(kept.ids, vec![11, 12]);
        assert_eq!(kept.labels, vec![7, 0]);
        assert!((kept.entropies[1] - 0.325).abs() < 1e-3);
        assert!(kept.entropies.iter().all(|&h| h <= 1.0));
    }

    #[test]
    fn non_normalized_distribution_is_rejected() {
        let probs = Tensor::new(vec![1, 4], vec![0.5f32, 0.5, 0.5, 0.5]).unwrap();
        assert!(mine_pseudo_labels(&probs, &[0], 1.0, EntropyBase::Nat).is_err());
    }

    #[test]
    fn per_class_report_hand_count() {
        // class 0: 3 of 4 correct, class 1: 1 of 2 -> macro 0.625
        let labels = vec![0, 0, 0, 0, 1, 1];
        let preds = vec![0, 0, 0, 1, 1, 0];
        let r = report_per_class(&preds, &labels, 3).unwrap();
        assert_eq!(r.per_class[0], Some(0.75));
        assert_eq!(r.per_class[1], Some(0.5));
        assert_eq!(r.per_class[2], None);
        assert!((r.macro_average - 0.625).abs() < 1e-12);

        let perfect = report_per_class(&labels, &labels, 2).unwrap();
        assert_eq!(perfect.per_class, vec![Some(1.0), Some(1.0)]);

        assert!(report_per_class(&preds[..3], &labels, 2).is_err());
    }

    fn tiny_setup() -> (EncoderConfig, Dataset, Dataset) {
        let cfg = EncoderConfig {
            stem_channels: 4,
            stage_channels: vec![4, 8],
            stage_strides: vec![true, true],
            embed_dim: 8,
            companion_stages: vec![],
            companion_dim: 8,
            ..EncoderConfig::default()
        };
        let spec = SyntheticSpec {
            num_classes: 3,
            samples_per_class: 8,
            image_size: (16, 16),
            ..SyntheticSpec::default()
        };
        let train = generate_synthetic(&spec, 50).unwrap();
        let mut val = generate_synthetic(&spec, 51).unwrap();
        val.split = Split::Val;
        (cfg, train, val)
    }

    #[test]
    fn finetune_runs_and_zero_epochs_is_noop_on_backbone() {
        let (cfg, train, val) = tiny_setup();
        let pretrained: ParamStore<f32> = init_params(&cfg, 2);
        let ids: Vec<u32> = (0..train.len() as u32).collect();
        let opts = FinetuneOptions {
            epochs: 0,
            backbone_lr: 1e-4,
            head_lr: 10.0,
            batch: 8,
            sgd_momentum: 0.9,
            weight_decay: 0.0,
            decay_every: 0,
            decay_factor: 0.1,
            seed: 3,
        };
        let out = finetune_semi(&cfg, &pretrained, &train, &ids, None, &val, &opts).unwrap();
        for (name, slot) in pretrained.iter() {
            assert_eq!(slot.tensor.data(), out.params.get(name).unwrap().data());
        }

        let trained = finetune_semi(
            &cfg,
            &pretrained,
            &train,
            &ids,
            None,
            &val,
            &FinetuneOptions { epochs: 2, ..opts },
        )
        .unwrap();
        // backbone must have moved
        let moved = pretrained
            .iter()
            .filter(|(_, s)| s.trainable)
            .any(|(n, s)| s.tensor.data() != trained.params.get(n).unwrap().data());
        assert!(moved);

        assert!(finetune_semi(&cfg, &pretrained, &train, &[], None, &val, &opts).is_err());
    }

    #[test]
    fn distributions_are_normalized_and_mining_composes() {
        let (cfg, train, _val) = tiny_setup();
        let mut params: ParamStore<f32> = init_params(&cfg, 4);
        init_class_head(&mut params, cfg.pooled_dim(), train.num_classes(), 9);
        let ids: Vec<u32> = (0..8).collect();
        let probs = predict_distribution(&cfg, &mut params, &train, &ids, 4).unwrap();
        for row in probs.data().chunks(train.num_classes()) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-4);
        }
        let mined = mine_pseudo_labels(&probs, &ids, 1.0, EntropyBase::Nat).unwrap();
        assert!(mined.entropies.iter().all(|&h| h <= 1.0));
    }

    #[test]
    fn export_matches_bank_and_is_reproducible() {
        let (cfg, train, _) = tiny_setup();
        let mut params: ParamStore<f32> = init_params(&cfg, 5);
        let mut enc = Encoder::new(&cfg, Mode::Eval, &[]);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.txt");
        let p2 = dir.path().join("b.txt");
        export_embeddings(&mut enc, &mut params, &train, 7, &p1).unwrap();
        export_embeddings(&mut enc, &mut params, &train, 7, &p2).unwrap();
        let a = std::fs::read(&p1).unwrap();
        assert_eq!(a, std::fs::read(&p2).unwrap());

        let text = String::from_utf8(a).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), format!("dim={} count={}", 8, train.len()));
        let bank = refresh_bank(&mut enc, &mut params, &train, 7, 0).unwrap();
        let first: Vec<&str> = lines.next().unwrap().split(' ').collect();
        assert_eq!(first.len(), 2 + 8);
        assert_eq!(first[0], "0");
        assert_eq!(first[1], train.label(0).to_string());
        for (tok, &v) in first[2..].iter().zip(bank.row(0)) {
            assert_eq!(tok.parse::<f32>().unwrap(), v);
        }
    }
}
