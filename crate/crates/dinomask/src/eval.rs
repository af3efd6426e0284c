//! Frozen-feature evaluation: weighted k-NN and a linear probe, both
//! reporting top-1 accuracy. Features are teacher CLS embeddings of a
//! deterministic center-crop view, L2-normalized.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::optim::cosine_interp;
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::{kernels, stack, Tensor};
use crate::tensor::tape::Tape;
use crate::views::{eval_view, normalize_image};
use crate::vit::{backbone_forward, stage_model, DinoParams, ViTConfig};

/// Unit-norm feature rows with aligned labels.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    /// `[N, D]`, every row unit L2 norm.
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
    pub split: String,
}

impl FeatureBank {
    pub fn new(features: Tensor<f32>, labels: Vec<usize>, split: impl Into<String>) -> Result<Self> {
        if features.shape().len() != 2 || features.shape()[0] != labels.len() {
            return Err(Error::shape(
                "FeatureBank",
                format!("[{}, D] features", labels.len()),
                format!("{:?}", features.shape()),
            ));
        }
        Ok(Self {
            features,
            labels,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.last_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

const EXTRACT_BATCH: usize = 32;

/// CLS embeddings of the backbone over center-crop eval views,
/// L2-normalized row-wise. No masking, no augmentation.
pub fn extract_features(
    params: &DinoParams<f32>,
    cfg: &ViTConfig,
    images: &[Tensor<f32>],
    labels: &[usize],
    split: &str,
) -> Result<FeatureBank> {
    if images.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "extract_features: {} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::InvalidArgument("extract_features: empty split".into()));
    }
    let d = cfg.embed_dim;
    let mut rows = Vec::with_capacity(images.len() * d);
    for chunk in images.chunks(EXTRACT_BATCH) {
        let views: Vec<Tensor<f32>> = chunk
            .iter()
            .map(|img| {
                let mut v = eval_view(img, cfg.img_size_global)?;
                normalize_image(&mut v);
                Ok(v)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor<f32>> = views.iter().collect();
        let batch = stack(&refs)?;
        let mut tape = Tape::<f32>::new();
        let staged = stage_model(&mut tape, params);
        let out = backbone_forward(&mut tape, &staged, cfg, &batch)?;
        rows.extend_from_slice(tape.value(out.cls));
    }
    let n = images.len();
    let mut unit = vec![0.0f32; n * d];
    let mut inv = vec![0.0f32; n];
    kernels::l2_normalize_rows(&rows, n, d, &mut unit, &mut inv);
    FeatureBank::new(Tensor::from_vec(unit, vec![n, d])?, labels.to_vec(), split)
}

fn argmax_smallest_tie(votes: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in votes.iter().enumerate().skip(1) {
        if v > votes[best] {
            best = c;
        }
    }
    best
}

/// Weighted k-NN over cosine similarity. Votes are `exp(sim/temp)`;
/// `temp = inf` means uniform votes. Ties prefer the smallest class id.
pub fn knn_classify(
    train: &FeatureBank,
    test: &FeatureBank,
    k: usize,
    temp: f64,
) -> Result<Vec<usize>> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("knn_classify: empty train bank".into()));
    }
    if k < 1 || k > train.len() {
        return Err(Error::InvalidArgument(format!(
            "knn_classify: k={k} outside [1, {}]",
            train.len()
        )));
    }
    if train.dim() != test.dim() {
        return Err(Error::shape(
            "knn_classify",
            format!("dim {}", train.dim()),
            format!("dim {}", test.dim()),
        ));
    }
    if !(temp > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "knn_classify: temperature {temp} must be positive (inf = uniform votes)"
        )));
    }
    let (nt, ntr, d) = (test.len(), train.len(), train.dim());
    let classes = train.num_classes();
    // Plain sequential dot products keep the similarity values identical
    // to any straightforward reference implementation, so near-tie
    // orderings are reproducible bit-for-bit.
    let mut sims = vec![0.0f32; nt * ntr];
    for q in 0..nt {
        let qf = &test.features.data()[q * d..(q + 1) * d];
        for i in 0..ntr {
            let tf = &train.features.data()[i * d..(i + 1) * d];
            sims[q * ntr + i] = qf.iter().zip(tf).map(|(a, b)| a * b).sum::<f32>();
        }
    }
    let mut preds = Vec::with_capacity(nt);
    let mut order: Vec<usize> = Vec::with_capacity(ntr);
    for row in sims.chunks(ntr) {
        order.clear();
        order.extend(0..ntr);
        // Total order: similarity descending, then index ascending, so
        // equal similarities resolve deterministically.
        order.sort_unstable_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).expect("finite similarity").then(a.cmp(&b))
        });
        let mut votes = vec![0.0f64; classes];
        for &i in &order[..k] {
            let w = if temp.is_finite() {
                (row[i] as f64 / temp).exp()
            } else {
                1.0
            };
            votes[train.labels[i]] += w;
        }
        preds.push(argmax_smallest_tie(&votes));
    }
    Ok(preds)
}

/// Probe hyperparameters; see the `probe_*` config keys.
#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub epochs: u64,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 0.5,
            momentum: 0.9,
            batch: 64,
            seed: 0,
        }
    }
}

/// Trained affine classifier `logits = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Probe {
    /// `[C, D]`.
    pub w: Tensor<f32>,
    pub b: Vec<f32>,
}

impl Probe {
    pub fn predict(&self, features: &Tensor<f32>) -> Vec<usize> {
        let (n, d) = (features.shape()[0], features.last_dim());
        let c = self.b.len();
        let mut logits = vec![0.0f32; n * c];
        kernels::gemm(
            false,
            true,
            n,
            d,
            c,
            1.0f32,
            features.data(),
            self.w.data(),
            0.0,
            &mut logits,
        );
        logits
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for i in 1..c {
                    if row[i] + self.b[i] > row[best] + self.b[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// Softmax-CE linear probe on frozen features: minibatch momentum SGD
/// with cosine learning-rate decay. Returns the probe and test top-1.
pub fn linear_probe(
    train: &FeatureBank,
    test: &FeatureBank,
    cfg: &ProbeConfig,
) -> Result<(Probe, f64)> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("linear_probe: empty train bank".into()));
    }
    if train.dim() != test.dim() {
        return Err(Error::shape(
            "linear_probe",
            format!("dim {}", train.dim()),
            format!("dim {}", test.dim()),
        ));
    }
    let (n, d) = (train.len(), train.dim());
    let c = train.num_classes().max(1);
    let batch = cfg.batch.clamp(1, n);

    let mut w = Tensor::<f32>::randn(
        vec![c, d],
        0.01,
        &mut rng_from_seed(derive_seed(cfg.seed, "probe_init", 0)),
    );
    let mut b = vec![0.0f32; c];
    let mut vw = vec![0.0f32; c * d];
    let mut vb = vec![0.0f32; c];

    let iters_per_epoch = n.div_ceil(batch) as u64;
    let total_iters = (cfg.epochs * iters_per_epoch).max(1);
    let mut iter: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, "probe_shuffle", epoch)));
        for chunk in order.chunks(batch) {
            let bsz = chunk.len();
            let mut x = vec![0.0f32; bsz * d];
            for (r, &i) in chunk.iter().enumerate() {
                x[r * d..(r + 1) * d]
                    .copy_from_slice(&train.features.data()[i * d..(i + 1) * d]);
            }
            let mut logits = vec![0.0f32; bsz * c];
            kernels::gemm(false, true, bsz, d, c, 1.0f32, &x, w.data(), 0.0, &mut logits);
            for row in logits.chunks_mut(c) {
                for (l, bias) in row.iter_mut().zip(&b) {
                    *l += bias;
                }
            }
            let mut probs = vec![0.0f32; bsz * c];
            kernels::softmax_scaled_rows(&logits, bsz, c, 1.0f32, &mut probs);
            let mut loss = 0.0f64;
            for (r, &i) in chunk.iter().enumerate() {
                loss -= (probs[r * c + train.labels[i]].max(1e-30) as f64).ln();
            }
            loss /= bsz as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "linear probe diverged at epoch {epoch} (lr {})",
                    cosine_interp(cfg.lr, 0.0, iter, total_iters)
                )));
            }
            // dlogits = (softmax - onehot)/B; closed-form affine gradients.
            let mut dlogits = probs;
            for (r, &i) in chunk.iter().enumerate() {
                dlogits[r * c + train.labels[i]] -= 1.0;
            }
            let scale = 1.0 / bsz as f32;
            dlogits.iter_mut().for_each(|v| *v *= scale);
            let mut gw = vec![0.0f32; c * d];
            kernels::gemm(true, false, c, bsz, d, 1.0f32, &dlogits, &x, 0.0, &mut gw);
            let mut gb = vec![0.0f32; c];
            for row in dlogits.chunks(c) {
                for (g, v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
            let lr = cosine_interp(cfg.lr, 0.0, iter, total_iters) as f32;
            let mom = cfg.momentum as f32;
            for ((p, v), g) in w.data_mut().iter_mut().zip(vw.iter_mut()).zip(&gw) {
                *v = mom * *v + g;
                *p -= lr * *v;
            }
            for ((p, v), g) in b.iter_mut().zip(vb.iter_mut()).zip(&gb) {
                *v = mom * *v + g;
                *p -= lr * *v;
            }
            iter += 1;
        }
    }
    let probe = Probe { w, b };
    let preds = probe.predict(&test.features);
    let acc = top1_accuracy(&preds, &test.labels)?;
    Ok((probe, acc))
}

/// Exact-match fraction.
pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "top1_accuracy: {} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("top1_accuracy: empty input".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit_bank(rows: Vec<Vec<f32>>, labels: Vec<usize>) -> FeatureBank {
        let d = rows[0].len();
        let n = rows.len();
        let flat: Vec<f32> = rows.into_iter().flatten().collect();
        let mut unit = vec![0.0f32; n * d];
        let mut inv = vec![0.0f32; n];
        kernels::l2_normalize_rows(&flat, n, d, &mut unit, &mut inv);
        FeatureBank::new(Tensor::from_vec(unit, vec![n, d]).unwrap(), labels, "test").unwrap()
    }

    fn random_bank(n: usize, d: usize, classes: usize, seed: u64) -> FeatureBank {
        let mut rng = rng_from_seed(seed);
        let rows = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        unit_bank(rows, labels)
    }

    #[test]
    fn top1_examples() {
        assert_eq!(top1_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&[0, 0, 0], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(top1_accuracy(&[1, 2, 3, 0], &[1, 2, 3, 9]).unwrap(), 0.75);
        assert!(top1_accuracy(&[1], &[1, 2]).is_err());
        assert!(top1_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn knn_self_match_and_single_class() {
        let train = unit_bank(
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]],
            vec![0, 1, 2],
        );
        let preds = knn_classify(&train, &train, 1, 0.07).unwrap();
        assert_eq!(preds, vec![0, 1, 2], "k=1 self-query returns own label");

        let same = unit_bank(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![7 - 7 + 1, 1]);
        let q = unit_bank(vec![vec![-0.5, -0.5]], vec![0]);
        assert_eq!(knn_classify(&same, &q, 2, 0.07).unwrap(), vec![1]);
    }

    #[test]
    fn knn_three_point_weighted_vote() {
        // Query [1,0]; neighbors at 0, 60, 80 degrees with classes 0,1,1.
        // temp=5 flattens the weights enough that the two class-1 votes win;
        // temp=0.07 makes the exact match dominate.
        let (a60, a80) = (60f32.to_radians(), 80f32.to_radians());
        let train = unit_bank(
            vec![
                vec![1.0, 0.0],
                vec![a60.cos(), a60.sin()],
                vec![a80.cos(), a80.sin()],
            ],
            vec![0, 1, 1],
        );
        let q = unit_bank(vec![vec![1.0, 0.0]], vec![0]);
        // Hand check at temp=5: e^{0.2}=1.2214 < e^{0.1}+e^{0.0347}=2.1407.
        assert_eq!(knn_classify(&train, &q, 3, 5.0).unwrap(), vec![1]);
        assert_eq!(knn_classify(&train, &q, 3, 0.07).unwrap(), vec![0]);
    }

    #[test]
    fn knn_uniform_votes_give_majority_and_smallest_tie() {
        let train = unit_bank(
            vec![
                vec![1.0, 0.0],
                vec![0.9, 0.1],
                vec![0.0, 1.0],
                vec![-1.0, 0.2],
            ],
            vec![1, 1, 0, 2],
        );
        let q = random_bank(5, 2, 3, 1);
        // k = N with uniform weights: majority class everywhere.
        let preds = knn_classify(&train, &q, 4, f64::INFINITY).unwrap();
        assert!(preds.iter().all(|&p| p == 1));

        // Perfect two-way tie under uniform votes: smallest class id wins.
        let tied = unit_bank(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![2, 0]);
        let q1 = unit_bank(vec![vec![0.5, 0.5]], vec![0]);
        assert_eq!(knn_classify(&tied, &q1, 2, f64::INFINITY).unwrap(), vec![0]);
    }

    #[test]
    fn knn_argument_errors() {
        let train = random_bank(4, 3, 2, 2);
        let empty = FeatureBank::new(Tensor::zeros(vec![0, 3]), vec![], "t").unwrap();
        assert!(knn_classify(&empty, &train, 1, 0.07).is_err());
        assert!(knn_classify(&train, &train, 0, 0.07).is_err());
        assert!(knn_classify(&train, &train, 5, 0.07).is_err());
        assert!(knn_classify(&train, &train, 2, 0.0).is_err());
        let other = random_bank(4, 5, 2, 3);
        assert!(knn_classify(&train, &other, 2, 0.07).is_err());
    }

    #[test]
    fn knn_matches_brute_force_oracle() {
        // Independent implementation: explicit dot products, full stable
        // sort, same weighting; exercised over many random banks.
        for seed in 0..15u64 {
            let classes = 3;
            let mut rng = rng_from_seed(100 + seed);
            let ntr = rng.gen_range(1..=50);
            let nte = rng.gen_range(1..=20);
            let d = rng.gen_range(2..=8);
            let train = random_bank(ntr, d, classes, 200 + seed);
            let test = random_bank(nte, d, classes, 300 + seed);
            let k = rng.gen_range(1..=ntr);
            let temp = [0.07, 1.0, f64::INFINITY][seed as usize % 3];

            let naive: Vec<usize> = (0..nte)
                .map(|q| {
                    let qf = &test.features.data()[q * d..(q + 1) * d];
                    let mut scored: Vec<(f32, usize)> = (0..ntr)
                        .map(|i| {
                            let tf = &train.features.data()[i * d..(i + 1) * d];
                            let s: f32 = qf.iter().zip(tf).map(|(a, b)| a * b).sum();
                            (s, i)
                        })
                        .collect();
                    scored.sort_by(|x, y| {
                        y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1))
                    });
                    let mut votes = vec![0.0f64; classes];
                    for &(s, i) in &scored[..k] {
                        let w = if temp.is_finite() { (s as f64 / temp).exp() } else { 1.0 };
                        votes[train.labels[i]] += w;
                    }
                    let mut best = 0;
                    for cidx in 1..classes {
                        if votes[cidx] > votes[best] {
                            best = cidx;
                        }
                    }
                    best
                })
                .collect();
            let got = knn_classify(&train, &test, k, temp).unwrap();
            assert_eq!(got, naive, "seed {seed} k {k} temp {temp}");
        }
    }

    #[test]
    fn knn_invariant_to_positive_feature_rescale() {
        let mut rng = rng_from_seed(9);
        let rows: Vec<Vec<f32>> = (0..20)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let scaled: Vec<Vec<f32>> = rows
            .iter()
            .map(|r| r.iter().map(|v| v * 37.5).collect())
            .collect();
        let a = unit_bank(rows, labels.clone());
        let b = unit_bank(scaled, labels);
        let q = random_bank(8, 6, 3, 10);
        assert_eq!(
            knn_classify(&a, &q, 5, 0.07).unwrap(),
            knn_classify(&b, &q, 5, 0.07).unwrap()
        );
    }

    fn separable_banks(n_per: usize, d: usize, seed: u64) -> (FeatureBank, FeatureBank) {
        // Two well-separated unit-sphere caps.
        let mut rng = rng_from_seed(seed);
        let mut make = |n: usize| {
            let mut rows = Vec::new();
            let mut labels = Vec::new();
            for class in 0..2usize {
                let sign = if class == 0 { 1.0f32 } else { -1.0 };
                for _ in 0..n {
                    let mut r: Vec<f32> =
                        (0..d).map(|_| rng.gen_range(-0.2f32..0.2)).collect();
                    r[0] = sign * rng.gen_range(0.8f32..1.0);
                    rows.push(r);
                    labels.push(class);
                }
            }
            unit_bank(rows, labels)
        };
        (make(n_per), make(n_per))
    }

    #[test]
    fn probe_fits_separable_data() {
        let (train, test) = separable_banks(30, 4, 11);
        let cfg = ProbeConfig::default();
        let (probe, acc) = linear_probe(&train, &test, &cfg).unwrap();
        assert_eq!(acc, 1.0, "separable banks must be fit exactly");
        assert_eq!(probe.w.shape(), &[2, 4]);
    }

    #[test]
    fn probe_on_shuffled_labels_is_near_chance() {
        let mut train = random_bank(300, 8, 4, 12);
        let test = random_bank(300, 8, 4, 13);
        // Random features with random labels: nothing to learn.
        let mut rng = rng_from_seed(14);
        train.labels.shuffle(&mut rng);
        let (_, acc) = linear_probe(&train, &test, &ProbeConfig::default()).unwrap();
        assert!(
            (acc - 0.25).abs() < 0.12,
            "expected chance-level accuracy, got {acc}"
        );
    }

    #[test]
    fn zero_epoch_probe_keeps_init() {
        let (train, test) = separable_banks(10, 4, 15);
        let cfg = ProbeConfig {
            epochs: 0,
            ..ProbeConfig::default()
        };
        let (probe, _) = linear_probe(&train, &test, &cfg).unwrap();
        let want = Tensor::<f32>::randn(
            vec![2, 4],
            0.01,
            &mut rng_from_seed(derive_seed(cfg.seed, "probe_init", 0)),
        );
        assert!(probe.w.bit_eq(&want), "zero epochs must not update weights");
        assert!(probe.b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extract_features_unit_rows_and_determinism() {
        let cfg = ViTConfig {
            img_size_global: 16,
            img_size_local: 8,
            patch_size: 8,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 1.0,
            head_hidden_dim: 8,
            head_bottleneck_dim: 4,
            head_out_dim: 6,
        };
        let mut params =
            DinoParams::<f32>::init(&cfg, &mut rng_from_seed(16)).unwrap();
        params.set_requires_grad(false);
        let mut rng = rng_from_seed(17);
        let images: Vec<Tensor<f32>> = (0..3)
            .map(|_| {
                let data = (0..3 * 20 * 20).map(|_| rng.gen_range(0.0f32..1.0)).collect();
                Tensor::from_vec(data, vec![3, 20, 20]).unwrap()
            })
            .collect();
        let labels = vec![0, 1, 0];
        let bank = extract_features(&params, &cfg, &images, &labels, "train").unwrap();
        assert_eq!(bank.features.shape(), &[3, 8]);
        for row in bank.features.data().chunks(8) {
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5);
        }
        // Same image listed twice yields identical rows.
        let twice = vec![images[0].clone(), images[0].clone()];
        let bank2 = extract_features(&params, &cfg, &twice, &[0, 0], "train").unwrap();
        let (a, b) = bank2.features.data().split_at(8);
        assert_eq!(a, b);
        // Backbone untouched by evaluation.
        let before: Vec<u64> = params
            .named()
            .iter()
            .map(|(_, t)| crate::rng::checksum_f32(t.data()))
            .collect();
        let _ = linear_probe(&bank, &bank, &ProbeConfig::default()).unwrap();
        let after: Vec<u64> = params
            .named()
            .iter()
            .map(|(_, t)| crate::rng::checksum_f32(t.data()))
            .collect();
        assert_eq!(before, after);
    }
}
