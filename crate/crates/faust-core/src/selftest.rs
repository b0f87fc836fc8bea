//! Dataset-free invariant suite behind the CLI `selftest` command.
//!
//! Every property is self-contained: gradient checks against central
//! finite differences, loss identities, exact pass-count audits, and
//! convergence on synthetic blobs. The whole suite runs in seconds.

use crate::config::{DataSource, InferenceDistance, RunConfig, Variant};
use crate::dataset::{sample_triplets, sample_tuplets, LabeledDataset, RepresentativeStrategy};
use crate::error::Result;
use crate::loss;
use crate::model::{ForwardSource, Model};
use crate::norm::NormMode;
use crate::tensor::{adam_step, l2_normalize, l2_normalize_backward, AdamState, DenseMatrix};
use crate::train::train;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn all_passed(results: &[PropertyResult]) -> bool {
    results.iter().all(|r| r.passed)
}

/// Relative-error central-difference check. Returns (ok, worst error).
pub fn check_gradient(
    f: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    grad: &[f64],
    tolerance: f64,
) -> (bool, f64) {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for j in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let fd = (f(&xp) - f(&xm)) / (2.0 * h);
        let denom = fd.abs().max(grad[j].abs()).max(1e-8);
        worst = worst.max((fd - grad[j]).abs() / denom);
    }
    (worst < tolerance, worst)
}

fn rand_vec(n: usize, rng: &mut StdRng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn prop(name: &'static str, outcome: Result<(bool, String)>) -> PropertyResult {
    match outcome {
        Ok((passed, detail)) => PropertyResult { name, passed, detail },
        Err(e) => PropertyResult {
            name,
            passed: false,
            detail: format!("errored: {e}"),
        },
    }
}

fn loss_gradient_checks() -> Result<(bool, String)> {
    let mut rng = StdRng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..25 {
        let a = rand_vec(4, &mut rng);
        let p = rand_vec(4, &mut rng);
        let n = rand_vec(4, &mut rng);

        let (v, g) = loss::triplet_loss(&a, &p, &n, 0.5)?;
        if v > 0.05 {
            let (_, e) = check_gradient(
                &|x| loss::triplet_loss(x, &p, &n, 0.5).unwrap().0,
                &a,
                &g.anchor,
                1e-4,
            );
            worst = worst.max(e);
        }

        let negs_owned: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(4, &mut rng)).collect();
        let negs: Vec<&[f64]> = negs_owned.iter().map(|v| v.as_slice()).collect();
        let (_, g) = loss::tuplet_loss(&a, &p, &negs)?;
        let (_, e) = check_gradient(
            &|x| {
                let refs: Vec<&[f64]> = negs_owned.iter().map(|v| v.as_slice()).collect();
                loss::tuplet_loss(x, &p, &refs).unwrap().0
            },
            &a,
            &g.anchor,
            1e-4,
        );
        worst = worst.max(e);

        let gp: f64 = rng.random_range(0.0..5.0);
        let gn: f64 = rng.random_range(0.0..5.0);
        let (_, d_pos, d_neg) = loss::ff_loss(gp, gn, 2.0);
        let (_, e) = check_gradient(
            &|x| loss::ff_loss(x[0], gn, 2.0).0,
            &[gp],
            &[d_pos],
            1e-4,
        );
        worst = worst.max(e);
        let (_, e) = check_gradient(
            &|x| loss::ff_loss(gp, x[0], 2.0).0,
            &[gn],
            &[d_neg],
            1e-4,
        );
        worst = worst.max(e);

        let logits_data = rand_vec(8, &mut rng);
        let logits = DenseMatrix::from_vec(2, 4, logits_data.clone())?;
        let labels = vec![rng.random_range(0..4), rng.random_range(0..4)];
        let ce = loss::cross_entropy(&logits, &labels)?;
        let (_, e) = check_gradient(
            &|flat| {
                let m = DenseMatrix::from_vec(2, 4, flat.to_vec()).unwrap();
                loss::cross_entropy(&m, &labels).unwrap().value
            },
            &logits_data,
            ce.grads[0].as_slice(),
            1e-4,
        );
        worst = worst.max(e);
    }
    Ok((worst < 1e-4, format!("worst relative error {worst:.2e}")))
}

fn loss_identities() -> Result<(bool, String)> {
    let mut ok = true;
    let ln2 = std::f64::consts::LN_2;
    ok &= (loss::ff_loss(2.0, 2.0, 2.0).0 - ln2).abs() < 1e-12;
    ok &= loss::goodness(&[3.0, 4.0]) == 25.0;
    ok &= loss::sq_dist(&[0.0, 0.0], &[3.0, 4.0])? == 25.0;
    let f = [0.1, 0.2];
    ok &= loss::triplet_loss(&f, &f, &f, 0.2)?.0 == 0.2;
    let p = [1.0, 0.0];
    let negs_owned = vec![vec![0.0, 1.0]; 9];
    let negs: Vec<&[f64]> = negs_owned.iter().map(|v| v.as_slice()).collect();
    ok &= (loss::tuplet_loss(&[0.0, 0.0], &p, &negs)?.0 - 10.0f64.ln()).abs() < 1e-12;
    let uniform = DenseMatrix::zeros(1, 10);
    ok &= (loss::cross_entropy(&uniform, &[4])?.value - 10.0f64.ln()).abs() < 1e-12;
    Ok((ok, "log 2 / log 10 / margin / 3-4-5 identities".into()))
}

fn normalization_jacobian() -> Result<(bool, String)> {
    let mut rng = StdRng::seed_from_u64(103);
    let mut worst = 0.0f64;
    for _ in 0..25 {
        let x = rand_vec(6, &mut rng);
        let g = rand_vec(6, &mut rng);
        let analytic = l2_normalize_backward(&g, &x, 1e-8);
        let (_, e) = check_gradient(
            &|xs| {
                let (y, _) = l2_normalize(xs, 1e-8);
                y.iter().zip(&g).map(|(a, b)| a * b).sum()
            },
            &x,
            &analytic,
            1e-4,
        );
        worst = worst.max(e);
    }
    Ok((worst < 1e-4, format!("worst relative error {worst:.2e}")))
}

fn layer_backward_check() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for (seed, mode) in [(7u64, NormMode::Length), (8, NormMode::LayerNorm)] {
        let model = Model::new(&[3, 4], 2, 2, 0.01, mode, ForwardSource::Activation, seed)?;
        let layer = &model.layers[0];
        let x = DenseMatrix::from_rows(&[vec![0.6, 0.2, 0.9], vec![0.1, 0.8, 0.4]])?;
        let g_emb = DenseMatrix::from_rows(&[vec![1.0, -0.5], vec![0.3, 0.8]])?;
        let trace = layer.forward(&x)?;
        let grads = layer.backward_embedding(&trace, &g_emb)?;

        let w1_flat: Vec<f64> = layer.w1.as_slice().to_vec();
        let (_, e) = check_gradient(
            &|flat| {
                let mut probe = layer.clone();
                probe.w1 = DenseMatrix::from_vec(4, 3, flat.to_vec()).unwrap();
                let t = probe.forward(&x).unwrap();
                t.embedding
                    .unwrap()
                    .as_slice()
                    .iter()
                    .zip(g_emb.as_slice())
                    .map(|(a, b)| a * b)
                    .sum()
            },
            &w1_flat,
            grads.w1.as_slice(),
            1e-4,
        );
        worst = worst.max(e);
    }
    Ok((worst < 1e-4, format!("worst relative error {worst:.2e}")))
}

fn adam_recurrence() -> Result<(bool, String)> {
    let mut p = DenseMatrix::from_vec(1, 1, vec![1.0])?;
    let mut st = AdamState::new(1, 1, 0.1);
    let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.1);
    let mut worst = 0.0f64;
    for t in 1..=100u32 {
        let g = DenseMatrix::from_vec(1, 1, vec![2.0 * p.get(0, 0)])?;
        adam_step(&mut p, &g, &mut st)?;
        let og = 2.0 * w;
        m = b1 * m + (1.0 - b1) * og;
        v = b2 * v + (1.0 - b2) * og * og;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        w -= lr * mh / (vh.sqrt() + eps);
        worst = worst.max((p.get(0, 0) - w).abs());
    }
    Ok((worst < 1e-10, format!("max trajectory divergence {worst:.2e}")))
}

fn sampler_invariants() -> Result<(bool, String)> {
    let ds = LabeledDataset::gaussian_blobs(4, 6, 8, 0.05, 5)?;
    for seed in 0..200 {
        let t = sample_triplets(&ds, 8, seed)?;
        for k in 0..8 {
            if t.anchor_labels[k] == t.negative_labels[k] {
                return Ok((false, format!("triplet label clash at seed {seed}")));
            }
        }
        let u = sample_tuplets(&ds, 4, seed)?;
        for k in 0..4 {
            let negs = &u.negative_labels[k * 3..(k + 1) * 3];
            let mut seen = [false; 4];
            for &n in negs {
                if n == u.anchor_labels[k] || seen[n] {
                    return Ok((false, format!("tuplet negatives invalid at seed {seed}")));
                }
                seen[n] = true;
            }
        }
    }
    Ok((true, "triplet/tuplet label constraints over 200 seeded batches".into()))
}

fn blob_config(variant: Variant) -> RunConfig {
    RunConfig {
        variant,
        hidden: vec![8, 8],
        emb_dim: 4,
        epochs: 50,
        batch_size: 10,
        lr: 0.02,
        alpha: None,
        theta: None,
        init_seed: 1,
        sampling_seed: 2,
        representative_seed: 3,
        data: DataSource::Blobs {
            classes: 2,
            per_class: 30,
            test_per_class: 10,
            dim: 10,
            noise: 0.05,
            seed: 6,
        },
        norm_mode: NormMode::Length,
        forward_source: ForwardSource::Activation,
        representative_strategy: RepresentativeStrategy::First,
        centroid_k: 10,
        inference_distance: InferenceDistance::L2,
        train_eval_samples: 0,
        test_eval_samples: 0,
        train_subset: None,
        log_wallclock: true,
        out_dir: None,
    }
}

fn pass_count_audit() -> Result<(bool, String)> {
    // B = 10, C = 2, two layers
    let expected: [(Variant, u64); 4] = [
        (Variant::Ff, 2 * 10),
        (Variant::FaustTriplet, 3 * 10),
        (Variant::FaustTuplet, (2 + 1) * 10),
        (Variant::FaustRepresentative, 10 + 2),
    ];
    for (variant, want) in expected {
        let mut cfg = blob_config(variant);
        cfg.epochs = 1;
        let out = train(&cfg)?;
        if out.audit.first_batch_per_layer != vec![want; 2] {
            return Ok((
                false,
                format!(
                    "{}: expected {want} per layer, measured {:?}",
                    variant.as_str(),
                    out.audit.first_batch_per_layer
                ),
            ));
        }
    }
    Ok((true, "2B / 3B / (C+1)B / B+C per layer per batch".into()))
}

fn blob_convergence() -> Result<(bool, String)> {
    let mut summaries = Vec::new();
    for variant in Variant::ALL {
        let out = train(&blob_config(variant))?;
        let best = out
            .logs
            .iter()
            .map(|l| l.train_acc)
            .fold(0.0f64, f64::max);
        summaries.push(format!("{} {:.1}%", variant.as_str(), best * 100.0));
        if best < 0.99 {
            return Ok((
                false,
                format!("{} peaked at {:.1}% train accuracy", variant.as_str(), best * 100.0),
            ));
        }
    }
    Ok((true, summaries.join(", ")))
}

fn determinism() -> Result<(bool, String)> {
    let mut cfg = blob_config(Variant::FaustRepresentative);
    cfg.epochs = 3;
    cfg.log_wallclock = false;
    let a = train(&cfg)?;
    let b = train(&cfg)?;
    Ok((a.logs == b.logs, "two seeded runs, identical epoch logs".into()))
}

/// Run every embedded property. Prints nothing; the CLI renders results.
pub fn run_all() -> Vec<PropertyResult> {
    vec![
        prop("loss-gradient-checks", loss_gradient_checks()),
        prop("loss-identities", loss_identities()),
        prop("normalization-jacobian", normalization_jacobian()),
        prop("layer-backward-gradient-check", layer_backward_check()),
        prop("adam-recurrence", adam_recurrence()),
        prop("sampler-invariants", sampler_invariants()),
        prop("pass-count-audit", pass_count_audit()),
        prop("blob-convergence", blob_convergence()),
        prop("determinism", determinism()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_build_passes_every_property() {
        let results = run_all();
        for r in &results {
            assert!(r.passed, "{} failed: {}", r.name, r.detail);
        }
        assert!(all_passed(&results));
    }

    #[test]
    fn sign_flipped_gradient_is_rejected() {
        // mutation sanity: the checker must catch a wrong-sign gradient
        let f = |x: &[f64]| x[0] * x[0] + 2.0 * x[1];
        let x = [0.7, -0.3];
        let good = [2.0 * x[0], 2.0];
        let bad = [-2.0 * x[0], 2.0];
        let (ok, _) = check_gradient(&f, &x, &good, 1e-4);
        assert!(ok);
        let (ok, err) = check_gradient(&f, &x, &bad, 1e-4);
        assert!(!ok, "sign flip slipped through (worst err {err})");
    }
}
