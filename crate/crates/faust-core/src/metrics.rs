//! Accuracy, per-layer Fisher discriminant scores, and embedding export
//! for external projection tools (t-SNE, PCA).

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::DenseMatrix;
use rand::rngs::StdRng;
use rand::SeedableRng;
use std::io::Write;
use std::path::Path;

/// Denominator guard in the trace-ratio Fisher score.
pub const FISHER_EPS: f64 = 1e-12;

/// Fraction of exact matches.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Argument(format!(
            "accuracy needs equal non-empty inputs, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Scalar multiclass Fisher score: tr(S_B) / (tr(S_W) + eps), where S_W is
/// the within-class scatter and S_B the between-class scatter. Computed
/// directly from the trace identities, no matrices materialized.
pub fn fisher_score(embeddings: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != embeddings.rows() {
        return Err(Error::Argument(format!(
            "{} embedding rows but {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    let classes = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    let present = {
        let mut seen = vec![false; classes];
        for &y in labels {
            seen[y] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if present < 2 {
        return Err(Error::Argument("fisher score needs at least 2 classes".into()));
    }
    let dim = embeddings.cols();
    let n = embeddings.rows();

    let mut class_sums = vec![vec![0.0f64; dim]; classes];
    let mut class_counts = vec![0usize; classes];
    let mut grand = vec![0.0f64; dim];
    for (i, &y) in labels.iter().enumerate() {
        class_counts[y] += 1;
        for (j, &v) in embeddings.row(i).iter().enumerate() {
            class_sums[y][j] += v;
            grand[j] += v;
        }
    }
    for g in &mut grand {
        *g /= n as f64;
    }
    let class_means: Vec<Vec<f64>> = class_sums
        .iter()
        .zip(&class_counts)
        .map(|(s, &c)| {
            if c == 0 {
                vec![0.0; dim]
            } else {
                s.iter().map(|v| v / c as f64).collect()
            }
        })
        .collect();

    // tr(S_W) = sum_c sum_{x in c} ||x - mu_c||^2
    let mut tr_sw = 0.0;
    for i in 0..n {
        let mu = &class_means[labels[i]];
        for (j, &v) in embeddings.row(i).iter().enumerate() {
            let d = v - mu[j];
            tr_sw += d * d;
        }
    }
    // tr(S_B) = sum_c n_c ||mu_c - mu||^2
    let mut tr_sb = 0.0;
    for c in 0..classes {
        if class_counts[c] == 0 {
            continue;
        }
        let mut ss = 0.0;
        for j in 0..dim {
            let d = class_means[c][j] - grand[j];
            ss += d * d;
        }
        tr_sb += class_counts[c] as f64 * ss;
    }
    Ok(tr_sb / (tr_sw + FISHER_EPS))
}

/// Fisher score of every layer's embeddings for one input batch.
#[derive(Debug, Clone)]
pub struct FisherReport {
    pub per_layer: Vec<f64>,
    pub sample_count: usize,
}

impl FisherReport {
    pub fn compute(model: &Model, ds: &LabeledDataset, sample_limit: usize, rng_seed: u64) -> Result<FisherReport> {
        let idx = seeded_subset(ds.len(), sample_limit, rng_seed);
        let x = ds.images.select_rows(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        let (embeddings, _) = model.embeddings_only(&x)?;
        let per_layer = embeddings
            .iter()
            .map(|e| fisher_score(e, &labels))
            .collect::<Result<Vec<_>>>()?;
        Ok(FisherReport {
            per_layer,
            sample_count: idx.len(),
        })
    }
}

/// First `limit` indices of a seeded shuffle of 0..n (everything if
/// limit >= n or limit == 0).
pub fn seeded_subset(n: usize, limit: usize, rng_seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if limit == 0 || limit >= n {
        return idx;
    }
    use rand::seq::SliceRandom;
    let mut rng = StdRng::seed_from_u64(rng_seed);
    idx.shuffle(&mut rng);
    idx.truncate(limit);
    idx
}

/// Write per-layer embeddings of up to `sample_limit` seeded samples as
/// CSV rows `layer,label,e_0,...,e_{d-1}`, ready for external t-SNE/PCA.
pub fn export_embeddings(
    model: &Model,
    ds: &LabeledDataset,
    sample_limit: usize,
    rng_seed: u64,
    out_path: &Path,
) -> Result<()> {
    let idx = seeded_subset(ds.len(), sample_limit, rng_seed);
    let x = ds.images.select_rows(&idx);
    let (embeddings, _) = model.embeddings_only(&x)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(out_path)?);
    write!(out, "layer,label")?;
    for j in 0..model.emb_dim {
        write!(out, ",e_{j}")?;
    }
    writeln!(out)?;
    for (l, emb) in embeddings.iter().enumerate() {
        for (row, &i) in idx.iter().enumerate() {
            write!(out, "{},{}", l + 1, ds.labels[i])?;
            for &v in emb.row(row) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ForwardSource;
    use crate::norm::NormMode;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn accuracy_basics() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        let a = accuracy(&[1, 2, 3], &[1, 2, 4]).unwrap();
        assert!((a - 2.0 / 3.0).abs() < 1e-12);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn fisher_zero_within_scatter_blows_up() {
        // two classes of identical points at distinct locations
        let e = DenseMatrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![-1.0, 0.0],
        ])
        .unwrap();
        let f = fisher_score(&e, &[0, 0, 1, 1]).unwrap();
        // tr(S_B) = 4, tr(S_W) = 0 -> F = 4 / eps
        assert!((f - 4.0 / FISHER_EPS).abs() / (4.0 / FISHER_EPS) < 1e-9);
    }

    #[test]
    fn fisher_identical_points_scores_zero() {
        let e = DenseMatrix::from_rows(&vec![vec![0.5, 0.5]; 6]).unwrap();
        let f = fisher_score(&e, &[0, 1, 2, 0, 1, 2]).unwrap();
        assert_eq!(f, 0.0);
    }

    #[test]
    fn fisher_single_class_is_an_error() {
        let e = DenseMatrix::from_rows(&[vec![0.1], vec![0.2]]).unwrap();
        assert!(fisher_score(&e, &[0, 0]).is_err());
    }

    // Brute-force oracle: materialize the scatter matrices and take traces.
    fn fisher_oracle(e: &DenseMatrix, labels: &[usize]) -> f64 {
        let classes = labels.iter().max().unwrap() + 1;
        let d = e.cols();
        let n = e.rows();
        let mut mu = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mu[j] += e.get(i, j) / n as f64;
            }
        }
        let mut mus = vec![vec![0.0; d]; classes];
        let mut counts = vec![0usize; classes];
        for i in 0..n {
            counts[labels[i]] += 1;
            for j in 0..d {
                mus[labels[i]][j] += e.get(i, j);
            }
        }
        for c in 0..classes {
            for j in 0..d {
                mus[c][j] /= counts[c] as f64;
            }
        }
        let mut sw = vec![vec![0.0; d]; d];
        for i in 0..n {
            let m = &mus[labels[i]];
            for a in 0..d {
                for b in 0..d {
                    sw[a][b] += (e.get(i, a) - m[a]) * (e.get(i, b) - m[b]);
                }
            }
        }
        let mut sb = vec![vec![0.0; d]; d];
        for c in 0..classes {
            for a in 0..d {
                for b in 0..d {
                    sb[a][b] += counts[c] as f64 * (mus[c][a] - mu[a]) * (mus[c][b] - mu[b]);
                }
            }
        }
        let tr = |m: &Vec<Vec<f64>>| (0..d).map(|i| m[i][i]).sum::<f64>();
        tr(&sb) / (tr(&sw) + FISHER_EPS)
    }

    fn random_blobs(rng: &mut StdRng) -> (DenseMatrix, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            let cx: f64 = rng.random_range(-2.0..2.0);
            let cy: f64 = rng.random_range(-2.0..2.0);
            for _ in 0..15 {
                rows.push(vec![
                    cx + rng.random_range(-0.3..0.3),
                    cy + rng.random_range(-0.3..0.3),
                ]);
                labels.push(c);
            }
        }
        (DenseMatrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn fisher_matches_brute_force_scatter_oracle() {
        let mut rng = StdRng::seed_from_u64(21);
        for _ in 0..20 {
            let (e, labels) = random_blobs(&mut rng);
            let fast = fisher_score(&e, &labels).unwrap();
            let slow = fisher_oracle(&e, &labels);
            assert!((fast - slow).abs() / slow.abs().max(1e-9) < 1e-9, "{fast} vs {slow}");
        }
    }

    #[test]
    fn fisher_is_rotation_invariant() {
        let mut rng = StdRng::seed_from_u64(22);
        for _ in 0..10 {
            let (e, labels) = random_blobs(&mut rng);
            let f0 = fisher_score(&e, &labels).unwrap();
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = angle.sin_cos();
            let mut rotated = DenseMatrix::zeros(e.rows(), 2);
            for i in 0..e.rows() {
                let (x, y) = (e.get(i, 0), e.get(i, 1));
                rotated.set(i, 0, c * x - s * y);
                rotated.set(i, 1, s * x + c * y);
            }
            let f1 = fisher_score(&rotated, &labels).unwrap();
            assert!((f0 - f1).abs() / f0.abs().max(1e-9) < 1e-9);
        }
    }

    #[test]
    fn fisher_is_scale_invariant_away_from_eps() {
        let mut rng = StdRng::seed_from_u64(23);
        let (e, labels) = random_blobs(&mut rng);
        let f0 = fisher_score(&e, &labels).unwrap();
        let mut scaled = e.clone();
        scaled.scale(3.7);
        let f1 = fisher_score(&scaled, &labels).unwrap();
        assert!((f0 - f1).abs() / f0.max(1e-9) < 1e-6);
    }

    #[test]
    fn export_writes_expected_row_count_and_matches_stack() {
        let model = Model::new(
            &[6, 5, 5, 5],
            3,
            3,
            0.01,
            NormMode::Length,
            ForwardSource::Activation,
            31,
        )
        .unwrap();
        let ds = LabeledDataset::gaussian_blobs(3, 10, 6, 0.05, 32).unwrap();
        let mut path = std::env::temp_dir();
        path.push(format!("faust-export-test-{}.csv", std::process::id()));
        export_embeddings(&model, &ds, 10, 9, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 3 * 10, "header plus layers x samples");
        assert!(lines[0].starts_with("layer,label,e_0"));

        // byte-identical on re-export
        let mut path2 = std::env::temp_dir();
        path2.push(format!("faust-export-test2-{}.csv", std::process::id()));
        export_embeddings(&model, &ds, 10, 9, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        // exported values equal freshly computed embeddings
        let idx = seeded_subset(ds.len(), 10, 9);
        let (embs, _) = model.embeddings_only(&ds.images.select_rows(&idx)).unwrap();
        let first_data_line: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(first_data_line[0], "1");
        assert_eq!(first_data_line[1], ds.labels[idx[0]].to_string());
        for j in 0..3 {
            let want = embs[0].get(0, j);
            let got: f64 = first_data_line[2 + j].parse().unwrap();
            assert_eq!(got, want);
        }
        std::fs::remove_file(path).ok();
        std::fs::remove_file(path2).ok();
    }
}
