//! Oracle comparisons over many random instances. Each check returns the
//! number of instances compared, or a description of the first mismatch.

use super::*;
use satret::acss::{aggregate_pair_feature, compute_w1, compute_w2, PairFeature};
use satret::corpus::{ImageInput, SegmentInput};
use satret::eval::{rank, recall_at_k, recall_report};
use satret::geotag::pca_rows;
use satret::segment_filter::{segment_pipeline, FilterConfig};

pub type Check = Result<usize, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub fn segment_pipeline_vs_predicate(instances: usize) -> Check {
    let mut r = rng_for(11, "oracle/segments");
    for case in 0..instances {
        let dim = r.random_range(2..7);
        let n = r.random_range(0..10);
        let text = unit_vec(&mut r, dim);
        let config = FilterConfig {
            area_threshold: r.random_range(0.0..0.5),
            score_threshold: r.random_range(-0.5..0.5),
            max_segments: r.random_range(1..8),
        };
        // quantized areas and duplicated features exercise threshold and tie edges
        let segments: Vec<SegmentInput> = (0..n)
            .map(|_| SegmentInput {
                area: f64::from(r.random_range(0..10u8)) / 10.0,
                feature: ImageInput::Features(if r.random_bool(0.2) {
                    text.clone()
                } else {
                    unit_vec(&mut r, dim)
                }),
            })
            .collect();
        let embed = |s: &SegmentInput| match &s.feature {
            ImageInput::Features(f) => Ok(f.clone()),
            ImageInput::Pixels(_) => unreachable!(),
        };
        let got = segment_pipeline(&segments, &text, &config, embed).map_err(|e| e.to_string())?;

        let feats: Vec<Vec<f64>> = segments.iter().map(|s| embed(s).unwrap()).collect();
        let areas: Vec<f64> = segments.iter().map(|s| s.area).collect();
        let scores: Vec<f64> = feats.iter().map(|f| inner(f, &text)).collect();
        let kept = kept_segments(
            &areas,
            &scores,
            config.area_threshold,
            config.score_threshold,
            config.max_segments,
        );
        ensure!(got.kept == kept, "case {case}: kept {:?} vs {kept:?}", got.kept);
        if kept.is_empty() {
            ensure!(
                got.embedding.iter().all(|&x| x == 0.0),
                "case {case}: empty selection is not the zero vector"
            );
        } else {
            let want = weighted_mean(&feats, &scores, &kept);
            for (a, b) in got.embedding.iter().zip(&want) {
                ensure!((a - b).abs() < 1e-12, "case {case}: embedding {a} vs {b}");
            }
        }
    }
    Ok(instances)
}

fn gallery_with_ties(r: &mut satret::rng::Rng, g: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut gallery: Vec<Vec<f64>> = Vec::with_capacity(g);
    for _ in 0..g {
        if !gallery.is_empty() && r.random_bool(0.2) {
            let j = r.random_range(0..gallery.len());
            gallery.push(gallery[j].clone());
        } else {
            gallery.push(random_vec(r, dim));
        }
    }
    gallery
}

pub fn rank_vs_exhaustive_selection(instances: usize) -> Check {
    let mut r = rng_for(12, "oracle/rank");
    for case in 0..instances {
        let (m, g, dim) = (r.random_range(1..12), r.random_range(1..12), r.random_range(2..6));
        let queries: Vec<Vec<f64>> = (0..m).map(|_| random_vec(&mut r, dim)).collect();
        let gallery = gallery_with_ties(&mut r, g, dim);
        let got = rank(&queries, &gallery).map_err(|e| e.to_string())?;
        for (q, row) in queries.iter().zip(&got) {
            let want = rank_oracle(q, &gallery);
            ensure!(row == &want, "case {case}: ranking {row:?} vs {want:?}");
        }
    }
    Ok(instances)
}

pub fn recall_vs_set_membership(instances: usize) -> Check {
    let mut r = rng_for(13, "oracle/recall");
    for case in 0..instances {
        let (m, g, dim) = (r.random_range(1..50), r.random_range(1..50), r.random_range(2..6));
        let queries: Vec<Vec<f64>> = (0..m).map(|_| random_vec(&mut r, dim)).collect();
        let gallery = gallery_with_ties(&mut r, g, dim);
        let truth: Vec<usize> = (0..m).map(|_| r.random_range(0..g)).collect();
        let ranks = rank(&queries, &gallery).map_err(|e| e.to_string())?;
        for k in [1, 2, 5, 10, 60] {
            let got = recall_at_k(&ranks, &truth, k);
            let want = recall_oracle(&queries, &gallery, &truth, k);
            ensure!((got - want).abs() < 1e-12, "case {case}, k={k}: {got} vs {want}");
        }
    }
    Ok(instances)
}

pub fn recall_report_both_directions(instances: usize) -> Check {
    let mut r = rng_for(14, "oracle/report");
    for case in 0..instances {
        let (n, dim) = (r.random_range(1..30), r.random_range(2..6));
        let images: Vec<Vec<f64>> = (0..n).map(|_| unit_vec(&mut r, dim)).collect();
        let texts: Vec<Vec<f64>> = images
            .iter()
            .map(|v| v.iter().map(|x| x + r.random_range(-0.8..0.8)).collect())
            .collect();
        let report = recall_report(&images, &texts).map_err(|e| e.to_string())?;
        let truth: Vec<usize> = (0..n).collect();
        let i2t = [1, 5, 10].map(|k| recall_oracle(&images, &texts, &truth, k));
        let t2i = [1, 5, 10].map(|k| recall_oracle(&texts, &images, &truth, k));
        for (a, b) in report.recalls().iter().zip(i2t.iter().chain(&t2i)) {
            ensure!((a - b).abs() < 1e-12, "case {case}: recall {a} vs {b}");
        }
        let mean = (i2t.iter().sum::<f64>() + t2i.iter().sum::<f64>()) / 6.0;
        ensure!(
            (report.mean_recall - mean).abs() < 1e-9,
            "case {case}: MeanR {} vs {mean}",
            report.mean_recall
        );
    }
    Ok(instances)
}

pub fn w1_w2_vs_cosine(instances: usize) -> Check {
    let mut r = rng_for(15, "oracle/w");
    for case in 0..instances {
        let (nt, ns, dim) = (r.random_range(1..8), r.random_range(1..20), r.random_range(2..8));
        let feature = |r: &mut satret::rng::Rng| -> (PairFeature, Vec<f64>) {
            let (img, txt) = (unit_vec(r, dim), unit_vec(r, dim));
            let mean: Vec<f64> = img.iter().zip(&txt).map(|(a, b)| (a + b) / 2.0).collect();
            (aggregate_pair_feature(&img, &txt).unwrap(), mean)
        };
        let targets: Vec<(PairFeature, Vec<f64>)> = (0..nt).map(|_| feature(&mut r)).collect();
        let sources: Vec<(PairFeature, Vec<f64>)> = (0..ns).map(|_| feature(&mut r)).collect();
        let tf: Vec<PairFeature> = targets.iter().map(|t| t.0.clone()).collect();
        let sf: Vec<PairFeature> = sources.iter().map(|s| s.0.clone()).collect();

        let w1 = compute_w1(&tf, &sf).map_err(|e| e.to_string())?;
        ensure!(w1.shape() == (nt, ns), "case {case}: W1 shape {:?}", w1.shape());
        for j in 0..nt {
            for i in 0..ns {
                let want = cosine(&targets[j].1, &sources[i].1);
                ensure!(
                    (w1.rows[j][i] - want).abs() < 1e-12,
                    "case {case}: W1[{j}][{i}] {} vs {want}",
                    w1.rows[j][i]
                );
            }
        }
        let sel = &sf[..nt.min(ns)];
        let w2 = compute_w2(sel, &tf[..sel.len()]).map_err(|e| e.to_string())?;
        for i in 0..sel.len() {
            for j in 0..sel.len() {
                let want = cosine(&sources[i].1, &targets[j].1);
                ensure!(
                    (w2.rows[i][j] - want).abs() < 1e-12,
                    "case {case}: W2[{i}][{j}] {} vs {want}",
                    w2.rows[i][j]
                );
            }
        }
    }
    Ok(instances)
}

pub fn pca_vs_covariance_eigensolve(instances: usize) -> Check {
    let mut r = rng_for(16, "oracle/pca");
    let mut checked = 0;
    while checked < instances {
        let (n, m) = (r.random_range(3..9), r.random_range(2..11));
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| f64::from(r.random_range(0..4u8))).collect())
            .collect();
        let (want, values) = pca_oracle(&rows);
        // a near-degenerate second gap leaves the axis undefined; skip those draws
        let gap = |a: f64, b: f64| (a - b).abs() / values[0].max(1e-12);
        if values[0] <= 1e-9 || gap(values[0], values[1]) < 1e-6 || gap(values[1], values.get(2).copied().unwrap_or(0.0)) < 1e-6 {
            continue;
        }
        let got = pca_rows(&rows).map_err(|e| e.to_string())?;
        for c in 0..2 {
            let sign = if got.projections.iter().zip(&want).map(|(g, w)| g[c] * w[c]).sum::<f64>() < 0.0 {
                -1.0
            } else {
                1.0
            };
            for (g, w) in got.projections.iter().zip(&want) {
                ensure!(
                    (g[c] - sign * w[c]).abs() < 1e-8,
                    "rows {rows:?}: component {c} {} vs {}",
                    g[c],
                    w[c]
                );
            }
        }
        let total: f64 = values.iter().filter(|v| **v > 0.0).sum();
        ensure!(
            (got.explained_variance[0] - values[0] / total).abs() < 1e-8,
            "rows {rows:?}: explained variance 0"
        );
        ensure!(
            (got.explained_variance[1] - values[1].max(0.0) / total).abs() < 1e-8,
            "rows {rows:?}: explained variance 1"
        );
        checked += 1;
    }
    Ok(instances)
}
