//! The five training procedures: three FAUST variants (vanilla triplet,
//! vanilla tuplet, representative tuplet), the forward-forward baseline,
//! and the end-to-end backprop baseline.
//!
//! All layers train simultaneously within each batch, each on its incoming
//! detached stream: a layer forwards its inputs, computes its local loss
//! on the embeddings (or activations), updates its own parameters, and
//! hands the already-computed outputs onward. Forward passes are counted
//! exactly, per layer per batch, for the complexity audit; evaluation
//! passes are not part of that count.

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Variant};
use crate::dataset::{
    build_ff_batch, sample_triplets, sample_tuplets, select_representatives, LabeledDataset,
    RepresentativeSet,
};
use crate::error::{Error, Result};
use crate::infer::{build_centroids, build_representative_refs, classify, ReferenceSet};
use crate::loss::{
    cross_entropy, ff_loss_batch, triplet_loss_batch, tuplet_loss_against_references,
    tuplet_loss_batch,
};
use crate::metrics::{accuracy, seeded_subset};
use crate::model::Model;
use crate::seeds::{batch_seed, stream_seed};
use crate::tensor::DenseMatrix;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

/// One epoch's log line.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss per trained layer (one entry for bp).
    pub layer_losses: Vec<f64>,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Cumulative training forward passes (sample x layer evaluations).
    pub forward_passes: u64,
    pub seconds: f64,
}

/// Exact forward-pass accounting for the complexity audit.
#[derive(Debug, Clone)]
pub struct PassAudit {
    /// Evaluations per layer during the first batch of the run.
    pub first_batch_per_layer: Vec<u64>,
    /// Rows in that batch.
    pub first_batch_size: usize,
    pub total: u64,
}

/// A trained model plus everything the caller needs to evaluate and save it.
#[derive(Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub logs: Vec<EpochLog>,
    pub representatives: Option<RepresentativeSet>,
    pub centroid_seed: u64,
    pub audit: PassAudit,
    /// Final accuracy on the train-eval subset.
    pub final_train_acc: f64,
    /// Final accuracy on the complete test set.
    pub final_test_acc: f64,
}

impl TrainOutput {
    pub fn to_checkpoint(&self, config: &RunConfig) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            variant: config.variant,
            representative_indices: self.representatives.as_ref().map(|r| r.indices.clone()),
            centroid_k: config.centroid_k,
            centroid_seed: self.centroid_seed,
        }
    }
}

/// Header for an epoch-log CSV with `loss_streams` loss columns.
pub fn epoch_log_csv_header(loss_streams: usize) -> String {
    let mut s = String::from("epoch");
    for i in 1..=loss_streams {
        s.push_str(&format!(",loss_{i}"));
    }
    s.push_str(",train_acc,test_acc,forward_passes,seconds");
    s
}

/// One CSV row, matching [`epoch_log_csv_header`].
pub fn epoch_log_csv_row(log: &EpochLog) -> String {
    let mut s = format!("{}", log.epoch);
    for v in &log.layer_losses {
        s.push_str(&format!(",{v}"));
    }
    s.push_str(&format!(
        ",{},{},{},{:.3}",
        log.train_acc, log.test_acc, log.forward_passes, log.seconds
    ));
    s
}

/// Write a complete epoch-log CSV:
/// `epoch,loss_1..loss_K,train_acc,test_acc,forward_passes,seconds`.
pub fn write_epoch_log_csv(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let k = logs.first().map(|l| l.layer_losses.len()).unwrap_or(1);
    writeln!(out, "{}", epoch_log_csv_header(k))?;
    for log in logs {
        writeln!(out, "{}", epoch_log_csv_row(log))?;
    }
    out.flush()?;
    Ok(())
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (i, &v) in row.iter().enumerate() {
        if v > best.0 {
            best = (v, i);
        }
    }
    best.1
}

/// Labels predicted by whatever inference procedure the variant uses.
pub fn predict(
    model: &Model,
    variant: Variant,
    refs: Option<&ReferenceSet>,
    x: &DenseMatrix,
    layer_subset: &[usize],
    distance: crate::config::InferenceDistance,
) -> Result<Vec<usize>> {
    match variant {
        Variant::FaustTriplet | Variant::FaustTuplet | Variant::FaustRepresentative => {
            let refs = refs.ok_or_else(|| {
                Error::Argument("similarity variants need a reference set".into())
            })?;
            classify(model, refs, x, layer_subset, distance)
        }
        Variant::Ff => {
            crate::infer::classify_ff_subset(model, x, model.num_classes, layer_subset)
        }
        Variant::Bp => {
            let logits = model.logits(x)?;
            Ok((0..logits.rows()).map(|i| argmax_row(logits.row(i))).collect())
        }
    }
}

/// Build the variant's reference set from a training set (None for ff/bp).
pub fn build_references(
    model: &Model,
    variant: Variant,
    train_ds: &LabeledDataset,
    representatives: Option<&RepresentativeSet>,
    centroid_k: usize,
    centroid_seed: u64,
) -> Result<Option<ReferenceSet>> {
    match variant {
        Variant::FaustTriplet | Variant::FaustTuplet => Ok(Some(build_centroids(
            model,
            train_ds,
            centroid_k,
            centroid_seed,
        )?)),
        Variant::FaustRepresentative => {
            let reps = representatives.ok_or_else(|| {
                Error::Argument("representative variant needs its representative set".into())
            })?;
            Ok(Some(build_representative_refs(model, reps)?))
        }
        Variant::Ff | Variant::Bp => Ok(None),
    }
}

struct EvalSets {
    train_x: DenseMatrix,
    train_labels: Vec<usize>,
    test_x: DenseMatrix,
    test_labels: Vec<usize>,
}

fn prepare_eval_sets(cfg: &RunConfig, train_ds: &LabeledDataset, test_ds: &LabeledDataset) -> EvalSets {
    let idx = seeded_subset(
        train_ds.len(),
        cfg.train_eval_samples,
        stream_seed(cfg.sampling_seed, "train-eval", 0),
    );
    let test_idx = seeded_subset(
        test_ds.len(),
        cfg.test_eval_samples,
        stream_seed(cfg.sampling_seed, "test-eval", 0),
    );
    EvalSets {
        train_x: train_ds.images.select_rows(&idx),
        train_labels: idx.iter().map(|&i| train_ds.labels[i]).collect(),
        test_x: test_ds.images.select_rows(&test_idx),
        test_labels: test_idx.iter().map(|&i| test_ds.labels[i]).collect(),
    }
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    train_ds: &'a LabeledDataset,
    representatives: Option<RepresentativeSet>,
    centroid_seed: u64,
    all_layers: Vec<usize>,
    passes: u64,
    first_batch_per_layer: Option<Vec<u64>>,
    first_batch_size: usize,
}

impl<'a> Trainer<'a> {
    fn eval(&self, model: &Model, x: &DenseMatrix, labels: &[usize]) -> Result<f64> {
        let refs = build_references(
            model,
            self.cfg.variant,
            self.train_ds,
            self.representatives.as_ref(),
            self.cfg.centroid_k,
            self.centroid_seed,
        )?;
        let preds = predict(
            model,
            self.cfg.variant,
            refs.as_ref(),
            x,
            &self.all_layers,
            self.cfg.inference_distance,
        )?;
        accuracy(&preds, labels)
    }

    fn record_batch(&mut self, per_layer: &[u64], batch_rows: usize) {
        self.passes += per_layer.iter().sum::<u64>();
        if self.first_batch_per_layer.is_none() {
            self.first_batch_per_layer = Some(per_layer.to_vec());
            self.first_batch_size = batch_rows;
        }
    }
}

/// Run the configured variant to completion.
pub fn train(cfg: &RunConfig) -> Result<TrainOutput> {
    train_with(cfg, |_| {})
}

/// [`train`], invoking `on_epoch` as each epoch's log line is finalized
/// (the CLI streams these into the run's CSV).
pub fn train_with(cfg: &RunConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutput> {
    cfg.validate()?;
    let (full_train, test_ds) = cfg.data.load()?;
    let train_ds = match cfg.train_subset {
        Some(n) if n < full_train.len() => {
            let idx = seeded_subset(full_train.len(), n, stream_seed(cfg.sampling_seed, "train-subset", 0));
            full_train.subset(&idx)?
        }
        _ => full_train,
    };
    if matches!(cfg.variant, Variant::Ff) && train_ds.input_dim() < train_ds.num_classes {
        return Err(Error::Dataset(format!(
            "forward-forward needs input_dim >= num_classes, got {} < {}",
            train_ds.input_dim(),
            train_ds.num_classes
        )));
    }
    if test_ds.input_dim() != train_ds.input_dim() {
        return Err(Error::Dataset("train/test input dims differ".into()));
    }

    let arch = cfg.arch(train_ds.input_dim());
    let mut model = match cfg.variant {
        Variant::Bp => Model::new_with_head(
            &arch,
            cfg.emb_dim,
            train_ds.num_classes,
            cfg.lr,
            cfg.norm_mode,
            cfg.forward_source,
            cfg.init_seed,
        )?,
        _ => Model::new(
            &arch,
            cfg.emb_dim,
            train_ds.num_classes,
            cfg.lr,
            cfg.norm_mode,
            cfg.forward_source,
            cfg.init_seed,
        )?,
    };

    let representatives = if cfg.variant == Variant::FaustRepresentative {
        Some(select_representatives(
            &train_ds,
            cfg.representative_strategy,
            cfg.representative_seed,
        )?)
    } else {
        None
    };

    let num_layers = model.num_layers();
    let loss_streams = if cfg.variant == Variant::Bp { 1 } else { num_layers };
    let eval_sets = prepare_eval_sets(cfg, &train_ds, &test_ds);
    let mut trainer = Trainer {
        cfg,
        train_ds: &train_ds,
        representatives,
        centroid_seed: stream_seed(cfg.sampling_seed, "centroids", 0),
        all_layers: (1..=num_layers).collect(),
        passes: 0,
        first_batch_per_layer: None,
        first_batch_size: 0,
    };

    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut loss_sums = vec![0.0; loss_streams];
        let mut batches = 0usize;

        match cfg.variant {
            Variant::FaustTriplet | Variant::FaustTuplet => {
                let nbatches = (train_ds.len() / cfg.batch_size).max(1);
                for b in 0..nbatches {
                    let seed = batch_seed(cfg.sampling_seed, epoch as u64, b as u64);
                    let (losses, per_layer, rows) = match cfg.variant {
                        Variant::FaustTriplet => {
                            let batch = sample_triplets(&train_ds, cfg.batch_size, seed)?;
                            triplet_step(&mut model, &batch, cfg.alpha())?
                        }
                        _ => {
                            let batch = sample_tuplets(&train_ds, cfg.batch_size, seed)?;
                            tuplet_step(&mut model, &batch)?
                        }
                    };
                    trainer.record_batch(&per_layer, rows);
                    for (s, l) in loss_sums.iter_mut().zip(&losses) {
                        *s += l;
                    }
                    batches += 1;
                }
            }
            Variant::FaustRepresentative | Variant::Ff | Variant::Bp => {
                let order = seeded_subset(
                    train_ds.len(),
                    train_ds.len(),
                    stream_seed(cfg.sampling_seed, "shuffle", epoch as u64),
                );
                for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                    let x = train_ds.images.select_rows(chunk);
                    let labels: Vec<usize> = chunk.iter().map(|&i| train_ds.labels[i]).collect();
                    let (losses, per_layer, rows) = match cfg.variant {
                        Variant::FaustRepresentative => {
                            let reps = trainer.representatives.as_ref().unwrap().images.clone();
                            representative_step(&mut model, &x, &labels, &reps)?
                        }
                        Variant::Ff => {
                            let seed = batch_seed(cfg.sampling_seed, epoch as u64, b as u64);
                            ff_step(&mut model, &x, &labels, cfg.theta(), seed)?
                        }
                        _ => bp_step(&mut model, &x, &labels)?,
                    };
                    trainer.record_batch(&per_layer, rows);
                    for (s, l) in loss_sums.iter_mut().zip(&losses) {
                        *s += l;
                    }
                    batches += 1;
                }
            }
        }

        let layer_losses: Vec<f64> = loss_sums.iter().map(|s| s / batches.max(1) as f64).collect();
        let train_acc = trainer.eval(&model, &eval_sets.train_x, &eval_sets.train_labels)?;
        let test_acc = trainer.eval(&model, &eval_sets.test_x, &eval_sets.test_labels)?;
        let seconds = if cfg.log_wallclock {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let log = EpochLog {
            epoch,
            layer_losses,
            train_acc,
            test_acc,
            forward_passes: trainer.passes,
            seconds,
        };
        on_epoch(&log);
        logs.push(log);
    }

    let final_train_acc = match logs.last() {
        Some(log) => log.train_acc,
        None => trainer.eval(&model, &eval_sets.train_x, &eval_sets.train_labels)?,
    };
    // the reported final accuracy always covers the whole test set, even
    // when per-epoch logging sampled a subset
    let final_test_acc = match logs.last() {
        Some(log) if cfg.test_eval_samples == 0 || cfg.test_eval_samples >= test_ds.len() => {
            log.test_acc
        }
        _ => trainer.eval(&model, &test_ds.images, &test_ds.labels)?,
    };

    Ok(TrainOutput {
        representatives: trainer.representatives.take(),
        centroid_seed: trainer.centroid_seed,
        audit: PassAudit {
            first_batch_per_layer: trainer.first_batch_per_layer.unwrap_or_default(),
            first_batch_size: trainer.first_batch_size,
            total: trainer.passes,
        },
        model,
        logs,
        final_train_acc,
        final_test_acc,
    })
}

type StepResult = (Vec<f64>, Vec<u64>, usize);

/// Vanilla triplet step: forward the three streams per layer, apply the
/// triplet margin loss on the embeddings, update, pass detached outputs on.
/// 3B evaluations per layer.
fn triplet_step(model: &mut Model, batch: &crate::dataset::TripletBatch, alpha: f64) -> Result<StepResult> {
    let b = batch.anchors.rows();
    let mut a_in = batch.anchors.clone();
    let mut p_in = batch.positives.clone();
    let mut n_in = batch.negatives.clone();
    let mut losses = Vec::with_capacity(model.layers.len());
    let mut per_layer = Vec::with_capacity(model.layers.len());
    let forward_source = model.forward_source;
    for layer in &mut model.layers {
        let ta = layer.forward(&a_in)?;
        let tp = layer.forward(&p_in)?;
        let tn = layer.forward(&n_in)?;
        let loss = triplet_loss_batch(
            ta.embedding.as_ref().unwrap(),
            tp.embedding.as_ref().unwrap(),
            tn.embedding.as_ref().unwrap(),
            alpha,
        )?;
        let mut grads = layer.backward_embedding(&ta, &loss.grads[0])?;
        grads.add(&layer.backward_embedding(&tp, &loss.grads[1])?)?;
        grads.add(&layer.backward_embedding(&tn, &loss.grads[2])?)?;
        layer.apply_grads(&grads)?;
        losses.push(loss.value);
        per_layer.push(3 * b as u64);
        a_in = pick_forward(&ta, forward_source);
        p_in = pick_forward(&tp, forward_source);
        n_in = pick_forward(&tn, forward_source);
    }
    Ok((losses, per_layer, b))
}

fn pick_forward(trace: &crate::model::LayerForwardTrace, source: crate::model::ForwardSource) -> DenseMatrix {
    match source {
        crate::model::ForwardSource::Activation => trace.normed.clone(),
        crate::model::ForwardSource::Embedding => trace.embedding.as_ref().unwrap().clone(),
    }
}

/// Vanilla tuplet step: anchors, positives, and one negative per other
/// class all flow per layer. (C+1) x B evaluations per layer.
fn tuplet_step(model: &mut Model, batch: &crate::dataset::TupletBatch) -> Result<StepResult> {
    let b = batch.anchors.rows();
    let mut a_in = batch.anchors.clone();
    let mut p_in = batch.positives.clone();
    let mut n_in = batch.negatives.clone();
    let mut losses = Vec::with_capacity(model.layers.len());
    let mut per_layer = Vec::with_capacity(model.layers.len());
    let forward_source = model.forward_source;
    for layer in &mut model.layers {
        let ta = layer.forward(&a_in)?;
        let tp = layer.forward(&p_in)?;
        let tn = layer.forward(&n_in)?;
        let loss = tuplet_loss_batch(
            ta.embedding.as_ref().unwrap(),
            tp.embedding.as_ref().unwrap(),
            tn.embedding.as_ref().unwrap(),
            batch.negatives_per_anchor,
        )?;
        let mut grads = layer.backward_embedding(&ta, &loss.grads[0])?;
        grads.add(&layer.backward_embedding(&tp, &loss.grads[1])?)?;
        grads.add(&layer.backward_embedding(&tn, &loss.grads[2])?)?;
        layer.apply_grads(&grads)?;
        losses.push(loss.value);
        per_layer.push((b + b + b * batch.negatives_per_anchor) as u64);
        a_in = pick_forward(&ta, forward_source);
        p_in = pick_forward(&tp, forward_source);
        n_in = pick_forward(&tn, forward_source);
    }
    Ok((losses, per_layer, b))
}

/// Representative tuplet step. Per layer: forward the C representatives
/// once and cache their embeddings, forward the batch, apply the tuplet
/// loss with the anchor's class representative as positive and the rest as
/// negatives, update, pass both streams on. B + C evaluations per layer.
fn representative_step(
    model: &mut Model,
    x: &DenseMatrix,
    labels: &[usize],
    reps: &DenseMatrix,
) -> Result<StepResult> {
    let b = x.rows();
    let c = reps.rows();
    let mut r_in = reps.clone();
    let mut x_in = x.clone();
    let mut losses = Vec::with_capacity(model.layers.len());
    let mut per_layer = Vec::with_capacity(model.layers.len());
    let forward_source = model.forward_source;
    for layer in &mut model.layers {
        let tr = layer.forward(&r_in)?; // embedding cache for this batch
        let tx = layer.forward(&x_in)?;
        let loss = tuplet_loss_against_references(
            tx.embedding.as_ref().unwrap(),
            tr.embedding.as_ref().unwrap(),
            labels,
        )?;
        let mut grads = layer.backward_embedding(&tx, &loss.grads[0])?;
        grads.add(&layer.backward_embedding(&tr, &loss.grads[1])?)?;
        layer.apply_grads(&grads)?;
        losses.push(loss.value);
        per_layer.push((b + c) as u64);
        x_in = pick_forward(&tx, forward_source);
        r_in = pick_forward(&tr, forward_source);
    }
    Ok((losses, per_layer, b))
}

/// Forward-forward step: the batch with correct one-hot labels and the
/// batch with random wrong ones, goodness loss on post-ReLU activations.
/// 2B evaluations per layer.
fn ff_step(
    model: &mut Model,
    x: &DenseMatrix,
    labels: &[usize],
    theta: f64,
    seed: u64,
) -> Result<StepResult> {
    let b = x.rows();
    let (pos, neg) = build_ff_batch(x, labels, model.num_classes, seed)?;
    let mut pos_in = pos;
    let mut neg_in = neg;
    let mut losses = Vec::with_capacity(model.layers.len());
    let mut per_layer = Vec::with_capacity(model.layers.len());
    for layer in &mut model.layers {
        let tp = layer.forward_trunk(&pos_in)?;
        let tn = layer.forward_trunk(&neg_in)?;
        let loss = ff_loss_batch(&tp.activ, &tn.activ, theta)?;
        let mut grads = layer.backward_activation(&tp, &loss.grads[0])?;
        grads.add(&layer.backward_activation(&tn, &loss.grads[1])?)?;
        layer.apply_grads(&grads)?;
        losses.push(loss.value);
        per_layer.push(2 * b as u64);
        pos_in = tp.normed;
        neg_in = tn.normed;
    }
    Ok((losses, per_layer, b))
}

/// End-to-end backprop step through the same trunk plus the linear head.
/// B evaluations per layer.
fn bp_step(model: &mut Model, x: &DenseMatrix, labels: &[usize]) -> Result<StepResult> {
    let b = x.rows();
    let stack = model.stack_forward_trunk(x)?;
    let last = &stack.traces.last().unwrap().normed;
    let head = model.head.as_ref().ok_or_else(|| {
        Error::Argument("backprop baseline needs a classification head".into())
    })?;
    let logits = head.forward(last)?;
    let ce = cross_entropy(&logits, labels)?;
    let (gw_head, gb_head, mut grad_out) = head.backward(last, &ce.grads[0])?;

    let mut layer_grads = Vec::with_capacity(model.layers.len());
    for (layer, trace) in model.layers.iter().zip(&stack.traces).rev() {
        let (grads, grad_input) = layer.backward_input(trace, &grad_out)?;
        layer_grads.push(grads);
        grad_out = grad_input;
    }
    layer_grads.reverse();
    for (layer, grads) in model.layers.iter_mut().zip(&layer_grads) {
        layer.apply_grads(grads)?;
    }
    let head = model.head.as_mut().unwrap();
    crate::tensor::adam_step(&mut head.w, &gw_head, &mut head.adam_w)?;
    crate::tensor::adam_step(&mut head.b, &gb_head, &mut head.adam_b)?;

    let per_layer = vec![b as u64; model.layers.len()];
    Ok((vec![ce.value], per_layer, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataSource;

    fn blob_config(variant: Variant, epochs: usize) -> RunConfig {
        RunConfig {
            variant,
            hidden: vec![8, 8],
            emb_dim: 4,
            epochs,
            batch_size: 10,
            lr: 0.01,
            alpha: None,
            theta: None,
            init_seed: 1,
            sampling_seed: 2,
            representative_seed: 3,
            data: DataSource::Blobs {
                classes: 3,
                per_class: 20,
                test_per_class: 10,
                dim: 12,
                noise: 0.04,
                seed: 7,
            },
            norm_mode: crate::norm::NormMode::Length,
            forward_source: crate::model::ForwardSource::Activation,
            representative_strategy: crate::dataset::RepresentativeStrategy::First,
            centroid_k: 5,
            inference_distance: crate::config::InferenceDistance::L2,
            train_eval_samples: 0,
            test_eval_samples: 0,
            train_subset: None,
            log_wallclock: true,
            out_dir: None,
        }
    }

    #[test]
    fn pass_audit_matches_the_complexity_claims() {
        // B = 10, C = 3, layers = 2
        let expected: [(Variant, u64); 5] = [
            (Variant::Ff, 2 * 10),
            (Variant::FaustTriplet, 3 * 10),
            (Variant::FaustTuplet, (3 + 1) * 10),
            (Variant::FaustRepresentative, 10 + 3),
            (Variant::Bp, 10),
        ];
        for (variant, per_layer) in expected {
            let cfg = blob_config(variant, 1);
            let out = train(&cfg).unwrap();
            assert_eq!(out.audit.first_batch_size, 10);
            assert_eq!(
                out.audit.first_batch_per_layer,
                vec![per_layer; 2],
                "{}",
                variant.as_str()
            );
        }
    }

    #[test]
    fn cumulative_pass_count_is_exact() {
        // 60 samples, batch 10 -> 6 batches/epoch, 2 epochs, 2 layers
        let cfg = blob_config(Variant::FaustRepresentative, 2);
        let out = train(&cfg).unwrap();
        let expected = 2 * 6 * 2 * (10 + 3) as u64;
        assert_eq!(out.audit.total, expected);
        assert_eq!(out.logs.last().unwrap().forward_passes, expected);
        assert_eq!(out.logs[0].forward_passes, expected / 2);
    }

    #[test]
    fn zero_learning_rate_leaves_the_model_at_init() {
        for variant in Variant::ALL {
            let mut cfg = blob_config(variant, 1);
            cfg.lr = 0.0;
            let out = train(&cfg).unwrap();
            let fresh = match variant {
                Variant::Bp => Model::new_with_head(
                    &cfg.arch(12),
                    cfg.emb_dim,
                    3,
                    0.0,
                    cfg.norm_mode,
                    cfg.forward_source,
                    cfg.init_seed,
                )
                .unwrap(),
                _ => Model::new(
                    &cfg.arch(12),
                    cfg.emb_dim,
                    3,
                    0.0,
                    cfg.norm_mode,
                    cfg.forward_source,
                    cfg.init_seed,
                )
                .unwrap(),
            };
            for (trained, init) in out.model.layers.iter().zip(&fresh.layers) {
                assert_eq!(trained.w1, init.w1, "{} mutated w1 at lr 0", variant.as_str());
                assert_eq!(trained.b1, init.b1);
                assert_eq!(trained.w2, init.w2);
            }
        }
    }

    #[test]
    fn identical_configs_give_identical_logs() {
        for variant in [Variant::FaustRepresentative, Variant::Ff, Variant::FaustTriplet] {
            let mut cfg = blob_config(variant, 2);
            cfg.log_wallclock = false;
            let a = train(&cfg).unwrap();
            let b = train(&cfg).unwrap();
            assert_eq!(a.logs, b.logs, "{}", variant.as_str());
        }
    }

    #[test]
    fn training_losses_decrease_on_separable_blobs() {
        let cfg = blob_config(Variant::FaustTuplet, 4);
        let out = train(&cfg).unwrap();
        let first: f64 = out.logs.first().unwrap().layer_losses.iter().sum();
        let last: f64 = out.logs.last().unwrap().layer_losses.iter().sum();
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn two_class_tuplet_degenerates_to_single_negative_softplus() {
        // With C = 2 the tuplet has one negative: loss = log(1 + e^{d+ - d-}).
        let ds = LabeledDataset::gaussian_blobs(2, 6, 5, 0.05, 3).unwrap();
        let batch = sample_tuplets(&ds, 4, 11).unwrap();
        assert_eq!(batch.negatives_per_anchor, 1);
        let model = Model::new(
            &[5, 4],
            3,
            2,
            0.01,
            crate::norm::NormMode::Length,
            crate::model::ForwardSource::Activation,
            5,
        )
        .unwrap();
        let (ea, _) = model.embeddings_only(&batch.anchors).unwrap();
        let (ep, _) = model.embeddings_only(&batch.positives).unwrap();
        let (en, _) = model.embeddings_only(&batch.negatives).unwrap();
        let loss = crate::loss::tuplet_loss_batch(&ea[0], &ep[0], &en[0], 1).unwrap();
        let mut direct = 0.0;
        for k in 0..4 {
            let dp = crate::loss::sq_dist(ea[0].row(k), ep[0].row(k)).unwrap();
            let dn = crate::loss::sq_dist(ea[0].row(k), en[0].row(k)).unwrap();
            direct += (1.0 + (dp - dn).exp()).ln();
        }
        assert!((loss.value - direct / 4.0).abs() < 1e-12);
    }

    #[test]
    fn representative_cache_is_coherent_within_a_batch() {
        // The cached representative embeddings must equal freshly computed
        // ones from the same pre-update weights.
        let ds = LabeledDataset::gaussian_blobs(3, 10, 6, 0.05, 9).unwrap();
        let reps = select_representatives(&ds, crate::dataset::RepresentativeStrategy::First, 0).unwrap();
        let model = Model::new(
            &[6, 5],
            3,
            3,
            0.01,
            crate::norm::NormMode::Length,
            crate::model::ForwardSource::Activation,
            2,
        )
        .unwrap();
        let cached = model.layers[0].forward(&reps.images).unwrap();
        let fresh = model.layers[0].forward(&reps.images).unwrap();
        assert_eq!(cached.embedding, fresh.embedding);
    }

    #[test]
    fn anchor_equal_to_representative_bounds_the_loss() {
        // d+ = 0 -> loss = log(1 + sum_i exp(-d_i)) <= log C
        let refs = DenseMatrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![-1.0, 0.0],
        ])
        .unwrap();
        let anchors = refs.select_rows(&[1]);
        let out = tuplet_loss_against_references(&anchors, &refs, &[1]).unwrap();
        assert!(out.value <= (3.0f64).ln() + 1e-12);
        assert!(out.value > 0.0);
    }

    #[test]
    fn per_step_locality_zeroing_one_layer_loss() {
        // Scaling layer 1's loss to zero (via zero embedding gradient) must
        // not change what happens to layer 0 in the same step. Probed by
        // comparing layer 0 parameters after a normal step vs a step where
        // layer 1's update is skipped.
        let ds = LabeledDataset::gaussian_blobs(3, 10, 6, 0.05, 13).unwrap();
        let batch = sample_triplets(&ds, 6, 1).unwrap();
        let make_model = || {
            Model::new(
                &[6, 5, 5],
                3,
                3,
                0.01,
                crate::norm::NormMode::Length,
                crate::model::ForwardSource::Activation,
                4,
            )
            .unwrap()
        };
        let mut full = make_model();
        triplet_step(&mut full, &batch, 0.2).unwrap();

        let mut partial = make_model();
        // replicate the step but skip layer 1's update entirely
        {
            let model = &mut partial;
            let mut a_in = batch.anchors.clone();
            let mut p_in = batch.positives.clone();
            let mut n_in = batch.negatives.clone();
            for (l, layer) in model.layers.iter_mut().enumerate() {
                let ta = layer.forward(&a_in).unwrap();
                let tp = layer.forward(&p_in).unwrap();
                let tn = layer.forward(&n_in).unwrap();
                if l == 0 {
                    let loss = triplet_loss_batch(
                        ta.embedding.as_ref().unwrap(),
                        tp.embedding.as_ref().unwrap(),
                        tn.embedding.as_ref().unwrap(),
                        0.2,
                    )
                    .unwrap();
                    let mut grads = layer.backward_embedding(&ta, &loss.grads[0]).unwrap();
                    grads.add(&layer.backward_embedding(&tp, &loss.grads[1]).unwrap()).unwrap();
                    grads.add(&layer.backward_embedding(&tn, &loss.grads[2]).unwrap()).unwrap();
                    layer.apply_grads(&grads).unwrap();
                }
                a_in = ta.normed.clone();
                p_in = tp.normed.clone();
                n_in = tn.normed.clone();
            }
        }
        assert_eq!(full.model_layer_w1(0), partial.model_layer_w1(0));
        assert_ne!(full.model_layer_w1(1), partial.model_layer_w1(1));
    }

    impl Model {
        fn model_layer_w1(&self, l: usize) -> &DenseMatrix {
            &self.layers[l].w1
        }
    }

    #[test]
    fn epoch_log_csv_has_the_documented_schema() {
        let cfg = blob_config(Variant::FaustRepresentative, 2);
        let out = train(&cfg).unwrap();
        let mut path = std::env::temp_dir();
        path.push(format!("faust-log-test-{}.csv", std::process::id()));
        write_epoch_log_csv(&path, &out.logs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,loss_1,loss_2,train_acc,test_acc,forward_passes,seconds"
        );
        assert_eq!(lines.count(), 2);
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn ff_initial_loss_sits_near_log_two_when_goodness_is_at_theta() {
        // Symmetric construction: identical positive and negative streams
        // give G_pos = G_neg, and theta equal to that goodness value puts
        // the loss exactly at log 2.
        let x = DenseMatrix::from_rows(&[vec![0.4, 0.3, 0.2, 0.6]]).unwrap();
        let model = Model::new(
            &[4, 3],
            2,
            2,
            0.01,
            crate::norm::NormMode::Length,
            crate::model::ForwardSource::Activation,
            8,
        )
        .unwrap();
        let t = model.layers[0].forward_trunk(&x).unwrap();
        let g = crate::loss::goodness(t.activ.row(0));
        let loss = ff_loss_batch(&t.activ, &t.activ, g).unwrap();
        assert!((loss.value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bp_end_to_end_gradients_match_finite_differences() {
        // 4 -> 5 -> 3 net with head: perturb every parameter of layer 0 and
        // the head, compare the analytic gradient of the cross-entropy loss
        // against central differences.
        let x = DenseMatrix::from_rows(&[
            vec![0.2, 0.8, 0.1, 0.5],
            vec![0.9, 0.3, 0.7, 0.4],
        ])
        .unwrap();
        let labels = vec![2usize, 0];
        let model = Model::new_with_head(
            &[4, 5],
            2,
            3,
            0.01,
            crate::norm::NormMode::Length,
            crate::model::ForwardSource::Activation,
            21,
        )
        .unwrap();

        let loss_of = |m: &Model| -> f64 {
            let stack = m.stack_forward_trunk(&x).unwrap();
            let logits = m
                .head
                .as_ref()
                .unwrap()
                .forward(&stack.traces.last().unwrap().normed)
                .unwrap();
            cross_entropy(&logits, &labels).unwrap().value
        };

        // analytic grads via the same path bp_step uses
        let stack = model.stack_forward_trunk(&x).unwrap();
        let last = &stack.traces.last().unwrap().normed;
        let logits = model.head.as_ref().unwrap().forward(last).unwrap();
        let ce = cross_entropy(&logits, &labels).unwrap();
        let (gw_head, _, grad_out) = model.head.as_ref().unwrap().backward(last, &ce.grads[0]).unwrap();
        let (grads0, _) = model.layers[0].backward_input(&stack.traces[0], &grad_out).unwrap();

        let h = 1e-5;
        let mut m = model.clone();
        for i in 0..grads0.w1.as_slice().len() {
            let orig = m.layers[0].w1.as_slice()[i];
            m.layers[0].w1.as_mut_slice()[i] = orig + h;
            let lp = loss_of(&m);
            m.layers[0].w1.as_mut_slice()[i] = orig - h;
            let lm = loss_of(&m);
            m.layers[0].w1.as_mut_slice()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let a = grads0.w1.as_slice()[i];
            let denom = fd.abs().max(a.abs()).max(1e-8);
            assert!((fd - a).abs() / denom < 1e-4, "w1[{i}]: fd {fd} vs {a}");
        }
        for i in 0..gw_head.as_slice().len() {
            let orig = m.head.as_ref().unwrap().w.as_slice()[i];
            m.head.as_mut().unwrap().w.as_mut_slice()[i] = orig + h;
            let lp = loss_of(&m);
            m.head.as_mut().unwrap().w.as_mut_slice()[i] = orig - h;
            let lm = loss_of(&m);
            m.head.as_mut().unwrap().w.as_mut_slice()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let a = gw_head.as_slice()[i];
            let denom = fd.abs().max(a.abs()).max(1e-8);
            assert!((fd - a).abs() / denom < 1e-4, "head w[{i}]: fd {fd} vs {a}");
        }
    }
}
