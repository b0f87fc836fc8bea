//! Classification. All FAUST variants classify with a single forward pass
//! per input: the per-layer embeddings are compared against one cached
//! reference per (layer, class) and the class with the smallest summed
//! distance wins. The forward-forward baseline instead runs one pass per
//! candidate class and picks the highest total goodness.

use crate::config::InferenceDistance;
use crate::dataset::{LabeledDataset, RepresentativeSet};
use crate::error::{Error, Result};
use crate::loss::sq_dist;
use crate::model::Model;
use crate::tensor::DenseMatrix;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceKind {
    /// Mean embedding of K sampled class members per layer.
    Centroid { k: usize },
    /// The embedding of the class representative image, stored verbatim.
    Representative,
}

/// One reference embedding per (layer, class), computed once after
/// training and reused for every prediction.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    /// per_layer[i] has one row per class.
    pub per_layer: Vec<DenseMatrix>,
    pub kind: ReferenceKind,
}

impl ReferenceSet {
    pub fn num_layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn num_classes(&self) -> usize {
        self.per_layer[0].rows()
    }
}

/// Average the per-layer embeddings of K seeded samples per class.
/// Sampling is without replacement unless the class is smaller than K.
pub fn build_centroids(model: &Model, ds: &LabeledDataset, k: usize, rng_seed: u64) -> Result<ReferenceSet> {
    if k == 0 {
        return Err(Error::Argument("centroid sample count must be positive".into()));
    }
    let mut rng = StdRng::seed_from_u64(rng_seed);
    let mut picked = Vec::with_capacity(ds.num_classes * k);
    for class in &ds.class_index {
        if class.is_empty() {
            return Err(Error::Dataset("empty class while building centroids".into()));
        }
        if class.len() >= k {
            let chosen = rand::seq::index::sample(&mut rng, class.len(), k);
            picked.extend(chosen.iter().map(|i| class[i]));
        } else {
            picked.extend((0..k).map(|_| class[rng.random_range(0..class.len())]));
        }
    }
    let inputs = ds.images.select_rows(&picked);
    let (embeddings, _) = model.embeddings_only(&inputs)?;
    let per_layer = embeddings
        .iter()
        .map(|emb| {
            let mut refs = DenseMatrix::zeros(ds.num_classes, emb.cols());
            for c in 0..ds.num_classes {
                for s in 0..k {
                    let row = emb.row(c * k + s);
                    for (o, &v) in refs.row_mut(c).iter_mut().zip(row) {
                        *o += v;
                    }
                }
                for o in refs.row_mut(c) {
                    *o /= k as f64;
                }
            }
            refs
        })
        .collect();
    Ok(ReferenceSet {
        per_layer,
        kind: ReferenceKind::Centroid { k },
    })
}

/// One forward pass of the C representatives; embeddings cached directly.
pub fn build_representative_refs(model: &Model, reps: &RepresentativeSet) -> Result<ReferenceSet> {
    let (per_layer, _) = model.embeddings_only(&reps.images)?;
    Ok(ReferenceSet {
        per_layer,
        kind: ReferenceKind::Representative,
    })
}

fn reference_distance(a: &[f64], b: &[f64], distance: InferenceDistance) -> Result<f64> {
    let d = sq_dist(a, b)?;
    Ok(match distance {
        InferenceDistance::L2 => d.sqrt(),
        InferenceDistance::Squared => d,
    })
}

/// Validate and normalize a 1-based layer subset.
fn check_subset(layer_subset: &[usize], num_layers: usize) -> Result<Vec<usize>> {
    if layer_subset.is_empty() {
        return Err(Error::Argument("layer subset must not be empty".into()));
    }
    let mut subset: Vec<usize> = layer_subset.to_vec();
    subset.sort_unstable();
    subset.dedup();
    for &l in &subset {
        if l == 0 || l > num_layers {
            return Err(Error::Argument(format!(
                "layer {l} outside 1..={num_layers}"
            )));
        }
    }
    Ok(subset)
}

/// Predicted labels plus the winning score per input.
pub fn classify_scored(
    model: &Model,
    refs: &ReferenceSet,
    x: &DenseMatrix,
    layer_subset: &[usize],
    distance: InferenceDistance,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let subset = check_subset(layer_subset, model.num_layers())?;
    if refs.num_layers() != model.num_layers() {
        return Err(Error::Argument(format!(
            "reference set covers {} layers, model has {}",
            refs.num_layers(),
            model.num_layers()
        )));
    }
    let classes = refs.num_classes();
    let (embeddings, _) = model.embeddings_only(x)?;
    let mut preds = Vec::with_capacity(x.rows());
    let mut scores = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let mut best_class = 0usize;
        let mut best_score = f64::INFINITY;
        for c in 0..classes {
            let mut score = 0.0;
            for &l in &subset {
                let emb = embeddings[l - 1].row(i);
                let reference = refs.per_layer[l - 1].row(c);
                score += reference_distance(emb, reference, distance)?;
            }
            // ties break toward the smallest class index
            if score < best_score {
                best_score = score;
                best_class = c;
            }
        }
        preds.push(best_class);
        scores.push(best_score);
    }
    Ok((preds, scores))
}

/// Single-pass nearest-reference classification over a layer subset.
pub fn classify(
    model: &Model,
    refs: &ReferenceSet,
    x: &DenseMatrix,
    layer_subset: &[usize],
    distance: InferenceDistance,
) -> Result<Vec<usize>> {
    Ok(classify_scored(model, refs, x, layer_subset, distance)?.0)
}

/// Forward-forward inference: try every one-hot encoding, forward, sum
/// goodness across all layers, take the argmax. C passes per input;
/// ties break toward the smallest class index.
pub fn classify_ff(model: &Model, x: &DenseMatrix, num_classes: usize) -> Result<Vec<usize>> {
    let all: Vec<usize> = (1..=model.num_layers()).collect();
    classify_ff_subset(model, x, num_classes, &all)
}

/// [`classify_ff`] with the goodness sum restricted to a 1-based layer
/// subset (layer-wise prediction curves).
pub fn classify_ff_subset(
    model: &Model,
    x: &DenseMatrix,
    num_classes: usize,
    layer_subset: &[usize],
) -> Result<Vec<usize>> {
    if x.cols() < num_classes {
        return Err(Error::Argument(format!(
            "input dim {} smaller than {num_classes} classes",
            x.cols()
        )));
    }
    let subset = check_subset(layer_subset, model.num_layers())?;
    let zero_based: Vec<usize> = subset.iter().map(|l| l - 1).collect();
    let mut best = vec![(f64::NEG_INFINITY, 0usize); x.rows()];
    let mut candidate = x.clone();
    for c in 0..num_classes {
        for i in 0..x.rows() {
            let row = candidate.row_mut(i);
            row[..num_classes].fill(0.0);
            row[c] = 1.0;
        }
        let (sums, _) = model.goodness_sums(&candidate, &zero_based)?;
        for (i, &g) in sums.iter().enumerate() {
            if g > best[i].0 {
                best[i] = (g, c);
            }
        }
    }
    Ok(best.into_iter().map(|(_, c)| c).collect())
}

/// Optional per-sample prediction dump: `index,true_label,predicted_label,score`.
pub fn dump_predictions(
    path: &Path,
    preds: &[usize],
    labels: &[usize],
    scores: &[f64],
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "index,true_label,predicted_label,score")?;
    for i in 0..preds.len() {
        writeln!(out, "{i},{},{},{}", labels[i], preds[i], scores[i])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{select_representatives, RepresentativeStrategy};
    use crate::model::ForwardSource;
    use crate::norm::NormMode;

    fn toy_model(seed: u64) -> Model {
        Model::new(&[6, 5, 5], 3, 3, 0.01, NormMode::Length, ForwardSource::Activation, seed)
            .unwrap()
    }

    fn toy_dataset(seed: u64) -> LabeledDataset {
        LabeledDataset::gaussian_blobs(3, 8, 6, 0.05, seed).unwrap()
    }

    #[test]
    fn centroid_of_single_sample_class_is_that_embedding() {
        let model = toy_model(1);
        let ds = LabeledDataset::gaussian_blobs(3, 1, 6, 0.02, 3).unwrap();
        let refs = build_centroids(&model, &ds, 1, 0).unwrap();
        let (embs, _) = model.embeddings_only(&ds.images).unwrap();
        for l in 0..model.num_layers() {
            for c in 0..3 {
                assert_eq!(refs.per_layer[l].row(c), embs[l].row(ds.class_index[c][0]));
            }
        }
    }

    #[test]
    fn centroid_of_duplicates_is_the_common_embedding() {
        let model = toy_model(2);
        // every class member identical
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3 {
            let proto: Vec<f64> = (0..6).map(|j| ((c * 7 + j) % 5) as f64 / 10.0).collect();
            for _ in 0..4 {
                rows.push(proto.clone());
                labels.push(c);
            }
        }
        let ds = LabeledDataset::new(DenseMatrix::from_rows(&rows).unwrap(), labels, 3).unwrap();
        let refs = build_centroids(&model, &ds, 4, 9).unwrap();
        let (embs, _) = model.embeddings_only(&ds.images).unwrap();
        for l in 0..model.num_layers() {
            for c in 0..3 {
                let reference = refs.per_layer[l].row(c);
                let member = embs[l].row(ds.class_index[c][0]);
                for (a, b) in reference.iter().zip(member) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn full_class_centroid_matches_brute_force_mean() {
        let model = toy_model(3);
        let ds = toy_dataset(4);
        let k = ds.class_index[0].len(); // balanced: 8 per class
        let refs = build_centroids(&model, &ds, k, 11).unwrap();
        let (embs, _) = model.embeddings_only(&ds.images).unwrap();
        for l in 0..model.num_layers() {
            for c in 0..3 {
                // brute-force mean over every class member
                let mut mean = vec![0.0; 3];
                for &i in &ds.class_index[c] {
                    for (m, &v) in mean.iter_mut().zip(embs[l].row(i)) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= k as f64;
                }
                for (a, b) in refs.per_layer[l].row(c).iter().zip(&mean) {
                    assert!((a - b).abs() < 1e-6, "layer {l} class {c}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn representative_refs_equal_stack_embeddings() {
        let model = toy_model(5);
        let ds = toy_dataset(6);
        let reps = select_representatives(&ds, RepresentativeStrategy::First, 0).unwrap();
        let refs = build_representative_refs(&model, &reps).unwrap();
        let stack = model.stack_forward(&reps.images).unwrap();
        for (l, t) in stack.traces.iter().enumerate() {
            assert_eq!(&refs.per_layer[l], t.embedding.as_ref().unwrap());
        }
        // rebuild from an unchanged model: bit-identical
        let again = build_representative_refs(&model, &reps).unwrap();
        for l in 0..refs.num_layers() {
            assert_eq!(refs.per_layer[l], again.per_layer[l]);
        }
    }

    #[test]
    fn reference_counts_match_layers_times_classes() {
        let model = Model::new(
            &[12, 8, 8, 8],
            4,
            10,
            0.01,
            NormMode::Length,
            ForwardSource::Activation,
            0,
        )
        .unwrap();
        let ds = LabeledDataset::gaussian_blobs(10, 2, 12, 0.02, 1).unwrap();
        let reps = select_representatives(&ds, RepresentativeStrategy::First, 0).unwrap();
        let refs = build_representative_refs(&model, &reps).unwrap();
        assert_eq!(refs.num_layers(), 3);
        assert_eq!(refs.num_classes(), 10);
        for layer_refs in &refs.per_layer {
            assert_eq!(layer_refs.shape(), (10, 4));
        }
    }

    #[test]
    fn exact_reference_match_scores_zero() {
        let model = toy_model(7);
        let ds = toy_dataset(8);
        let reps = select_representatives(&ds, RepresentativeStrategy::First, 0).unwrap();
        let refs = build_representative_refs(&model, &reps).unwrap();
        // classify the representative of class 2 itself
        let x = reps.images.select_rows(&[2]);
        let (preds, scores) =
            classify_scored(&model, &refs, &x, &[1, 2], InferenceDistance::L2).unwrap();
        assert_eq!(preds, vec![2]);
        assert!(scores[0] < 1e-9);
    }

    #[test]
    fn representatives_classify_to_their_own_class() {
        // each representative sits at distance zero from its own reference,
        // so classifying the representative set itself must be perfect
        let model = toy_model(19);
        let ds = toy_dataset(20);
        let reps = select_representatives(&ds, RepresentativeStrategy::First, 0).unwrap();
        let refs = build_representative_refs(&model, &reps).unwrap();
        let preds = classify(&model, &refs, &reps.images, &[1, 2], InferenceDistance::L2).unwrap();
        let labels: Vec<usize> = (0..3).collect();
        assert_eq!(crate::metrics::accuracy(&preds, &labels).unwrap(), 1.0);
    }

    #[test]
    fn classify_matches_exhaustive_distance_table_oracle() {
        let model = toy_model(9);
        let ds = LabeledDataset::gaussian_blobs(3, 7, 6, 0.08, 10).unwrap();
        let reps = select_representatives(&ds, RepresentativeStrategy::First, 0).unwrap();
        let refs = build_representative_refs(&model, &reps).unwrap();
        let x = ds.images.select_rows(&(0..20).collect::<Vec<_>>());
        let preds = classify(&model, &refs, &x, &[1, 2], InferenceDistance::L2).unwrap();

        // oracle: explicit distance table from independently recomputed
        // embeddings, scalar loops only
        let (embs, _) = model.embeddings_only(&x).unwrap();
        for i in 0..20 {
            let mut best = (f64::INFINITY, usize::MAX);
            for c in 0..3 {
                let mut total = 0.0;
                for l in 0..2 {
                    let mut ss = 0.0;
                    for (a, b) in embs[l].row(i).iter().zip(refs.per_layer[l].row(c)) {
                        ss += (a - b) * (a - b);
                    }
                    total += ss.sqrt();
                }
                if total < best.0 {
                    best = (total, c);
                }
            }
            assert_eq!(preds[i], best.1, "sample {i}");
        }
    }

    #[test]
    fn layer_subsets_are_validated() {
        let model = toy_model(11);
        let ds = toy_dataset(12);
        let reps = select_representatives(&ds, RepresentativeStrategy::First, 0).unwrap();
        let refs = build_representative_refs(&model, &reps).unwrap();
        let x = ds.images.select_rows(&[0]);
        assert!(classify(&model, &refs, &x, &[], InferenceDistance::L2).is_err());
        assert!(classify(&model, &refs, &x, &[3], InferenceDistance::L2).is_err());
        assert!(classify(&model, &refs, &x, &[0], InferenceDistance::L2).is_err());
        classify(&model, &refs, &x, &[1], InferenceDistance::L2).unwrap();
        classify(&model, &refs, &x, &[1, 2], InferenceDistance::L2).unwrap();
    }

    #[test]
    fn scaling_one_layer_preserves_its_single_subset_argmin() {
        // Scaling layer 1's W2 by lambda scales its embeddings and its
        // references by lambda, so subset {1} distances scale by lambda and
        // the argmin is unchanged.
        let mut model = toy_model(13);
        let ds = toy_dataset(14);
        let reps = select_representatives(&ds, RepresentativeStrategy::First, 0).unwrap();
        let refs = build_representative_refs(&model, &reps).unwrap();
        let x = ds.images.select_rows(&(0..10).collect::<Vec<_>>());
        let (preds, scores) =
            classify_scored(&model, &refs, &x, &[1], InferenceDistance::L2).unwrap();

        let lambda = 3.5;
        model.layers[0].w2.scale(lambda);
        let refs2 = build_representative_refs(&model, &reps).unwrap();
        let (preds2, scores2) =
            classify_scored(&model, &refs2, &x, &[1], InferenceDistance::L2).unwrap();
        assert_eq!(preds, preds2);
        for (s, s2) in scores.iter().zip(&scores2) {
            assert!((s2 - lambda * s).abs() < 1e-9 * (1.0 + s.abs()));
        }
    }

    #[test]
    fn ff_classify_prefers_the_wired_in_class() {
        // One layer whose single unit reads exactly input dim 7 (inside the
        // label slot): goodness is positive only when class 7 is embedded.
        let mut w1 = DenseMatrix::zeros(1, 12);
        w1.set(0, 7, 5.0);
        let layer = crate::model::LocalLayer {
            w1,
            b1: DenseMatrix::zeros(1, 1),
            w2: DenseMatrix::zeros(1, 1),
            adam_w1: crate::tensor::AdamState::new(1, 12, 0.0),
            adam_b1: crate::tensor::AdamState::new(1, 1, 0.0),
            adam_w2: crate::tensor::AdamState::new(1, 1, 0.0),
            norm_mode: NormMode::Length,
        };
        let model = Model {
            layers: vec![layer],
            head: None,
            forward_source: ForwardSource::Activation,
            arch: vec![12, 1],
            emb_dim: 1,
            num_classes: 10,
            init_seed: 0,
        };
        let x = DenseMatrix::from_rows(&[vec![0.2; 12], vec![0.9; 12]]).unwrap();
        let preds = classify_ff(&model, &x, 10).unwrap();
        assert_eq!(preds, vec![7, 7]);
    }

    #[test]
    fn ff_classify_all_zero_weights_ties_to_class_zero() {
        let model = Model {
            layers: vec![crate::model::LocalLayer {
                w1: DenseMatrix::zeros(2, 12),
                b1: DenseMatrix::zeros(1, 2),
                w2: DenseMatrix::zeros(1, 2),
                adam_w1: crate::tensor::AdamState::new(2, 12, 0.0),
                adam_b1: crate::tensor::AdamState::new(1, 2, 0.0),
                adam_w2: crate::tensor::AdamState::new(1, 2, 0.0),
                norm_mode: NormMode::Length,
            }],
            head: None,
            forward_source: ForwardSource::Activation,
            arch: vec![12, 2],
            emb_dim: 1,
            num_classes: 10,
            init_seed: 0,
        };
        let x = DenseMatrix::from_rows(&[vec![0.4; 12]]).unwrap();
        assert_eq!(classify_ff(&model, &x, 10).unwrap(), vec![0]);
    }

    #[test]
    fn ff_classify_is_order_independent() {
        // The tie rule is "smallest class index", not "first evaluated":
        // recomputing the winner from an explicit score table in any
        // evaluation order gives the same answer.
        let model = toy_model(15);
        let ds = LabeledDataset::gaussian_blobs(3, 4, 6, 0.05, 16).unwrap();
        let x = ds.images.select_rows(&(0..6).collect::<Vec<_>>());
        let preds = classify_ff(&model, &x, 3).unwrap();

        let mut table = vec![vec![0.0; 3]; 6];
        for c in [2usize, 0, 1] {
            let mut candidate = x.clone();
            for i in 0..x.rows() {
                let row = candidate.row_mut(i);
                row[..3].fill(0.0);
                row[c] = 1.0;
            }
            let (sums, _) = model.goodness_sums(&candidate, &[0, 1]).unwrap();
            for i in 0..6 {
                table[i][c] = sums[i];
            }
        }
        for i in 0..6 {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for c in 0..3 {
                if table[i][c] > best.0 {
                    best = (table[i][c], c);
                }
            }
            assert_eq!(preds[i], best.1);
        }
    }

    #[test]
    fn ff_subset_restricts_the_goodness_sum() {
        // layer 1 wired to prefer class 7, layer 2 wired to prefer class 3:
        // subset {1} predicts 7, subset {2} predicts 3
        let mut w1a = DenseMatrix::zeros(1, 12);
        w1a.set(0, 7, 5.0);
        let mut w1b = DenseMatrix::zeros(1, 1);
        w1b.set(0, 0, 1.0); // passes layer 1's activation through
        let mk = |w1: DenseMatrix, d_in: usize| crate::model::LocalLayer {
            w1,
            b1: DenseMatrix::zeros(1, 1),
            w2: DenseMatrix::zeros(1, 1),
            adam_w1: crate::tensor::AdamState::new(1, d_in, 0.0),
            adam_b1: crate::tensor::AdamState::new(1, 1, 0.0),
            adam_w2: crate::tensor::AdamState::new(1, 1, 0.0),
            norm_mode: NormMode::Length,
        };
        // second layer inverts: big activation when layer 1 was quiet
        let mut w1_inv = DenseMatrix::zeros(1, 1);
        w1_inv.set(0, 0, -1.0);
        let mut layer2 = mk(w1_inv, 1);
        layer2.b1.set(0, 0, 0.5);
        let model = Model {
            layers: vec![mk(w1a, 12), layer2],
            head: None,
            forward_source: ForwardSource::Activation,
            arch: vec![12, 1, 1],
            emb_dim: 1,
            num_classes: 10,
            init_seed: 0,
        };
        let x = DenseMatrix::from_rows(&[vec![0.0; 12]]).unwrap();
        assert_eq!(classify_ff_subset(&model, &x, 10, &[1]).unwrap(), vec![7]);
        // layer 2's goodness is maximal when layer 1 produced nothing,
        // i.e. for any wrong class; tie-break picks class 0
        assert_eq!(classify_ff_subset(&model, &x, 10, &[2]).unwrap(), vec![0]);
    }

    #[test]
    fn ff_pass_count_is_classes_times_single_pass() {
        let model = toy_model(17);
        let x = DenseMatrix::zeros(4, 6);
        let (_, single) = model.embeddings_only(&x).unwrap();
        // classify_ff forwards C candidates through the trunk
        let mut total = 0u64;
        for _ in 0..3 {
            let (_, e) = model.goodness_sums(&x, &[0, 1]).unwrap();
            total += e;
        }
        assert_eq!(total, 3 * single);
    }
}
