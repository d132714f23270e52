//! Acceptance suite. Runs criteria 1-8 and prints one PASS/FAIL line per
//! criterion. Criterion 2 is diagnostic: it is reported but does not affect
//! the exit status. Every other criterion gates it.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::checks;
use rand::Rng as _;
use satret::acss::{
    compute_weight_vector, curriculum_window, select_source_subset, CurriculumMode, CurriculumState, SimilarityMatrix, Window,
};
use satret::adversary::{
    adversarial_losses, adversarial_on_tape, discriminator_on_tape, mine_negatives, triplet_hinges, triplet_on_tape, AdaptConfig,
    Discriminator, EmbeddedPair, Mining, Toggles,
};
use satret::config::{canonical_defaults, RunConfig};
use satret::corpus::{generate_synthetic_corpus, PairRecord, SyntheticCorpusConfig};
use satret::encoders::{BoundParams, DualEncoder, EncoderConfig, GraphEncoder, ImageMode, ParamStore, TokenSequence};
use satret::eval::evaluate;
use satret::pipeline::{self, ablation_toggles, adapt_target, pretrain_source, synthetic_domains};
use satret::pretrain::{batch_graph, contrastive_loss, contrastive_on_tape};
use satret::segment_filter::FilterConfig;
use satret::tape::{Mat, Tape};

const DESK_SCALE: &str = include_str!("../../../configs/desk_scale.json");
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    id: u8,
    name: &'static str,
    pass: bool,
    gating: bool,
    detail: String,
}

impl Outcome {
    fn new(id: u8, name: &'static str, result: Result<String, String>) -> Self {
        let (pass, detail) = match result {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        Self {
            id,
            name,
            pass,
            gating: true,
            detail,
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------- 1 and 2

fn transfer_and_ablation() -> (Outcome, Outcome) {
    match run_transfer() {
        Ok(pair) => pair,
        Err(e) => {
            let msg = format!("experiment failed: {e}");
            (
                Outcome::new(1, "domain-shift transfer", Err(msg.clone())),
                Outcome::new(2, "ablation ordering", Err(msg)),
            )
        }
    }
}

fn run_transfer() -> satret::Result<(Outcome, Outcome)> {
    let base = RunConfig::from_json(DESK_SCALE)?;
    let labels: Vec<&str> = ablation_toggles().iter().map(Toggles::label).collect();
    let mut pipeline_time = Duration::ZERO;
    let mut direct = Vec::new();
    let mut rows: Vec<[f64; 4]> = Vec::new();
    for seed in SEEDS {
        let cfg = RunConfig { seed, ..base.clone() };
        let start = Instant::now();
        let domains = synthetic_domains(&cfg)?;
        let pretrained = pretrain_source(&cfg, &domains.source, None)?.model;
        let (_, full) = adapt_target(&cfg, &pretrained, &domains, Toggles::default(), None)?;
        pipeline_time += start.elapsed();

        let mut row = [full.adapted.mean_recall, 0.0, 0.0, 0.0];
        for (k, toggles) in ablation_toggles().into_iter().enumerate().skip(1) {
            row[k] = adapt_target(&cfg, &pretrained, &domains, toggles, None)?
                .1
                .adapted
                .mean_recall;
        }
        direct.push(evaluate(&pretrained, &domains.target.test)?.mean_recall);
        println!(
            "  seed {seed}: direct {:.2} | {}",
            direct.last().unwrap(),
            labels
                .iter()
                .zip(&row)
                .map(|(l, v)| format!("{l} {v:.2}"))
                .collect::<Vec<_>>()
                .join(", ")
        );
        rows.push(row);
    }

    let adapted: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let deltas: Vec<f64> = adapted.iter().zip(&direct).map(|(a, d)| a - d).collect();
    let (mean_direct, mean_delta) = (mean(&direct), mean(&deltas));
    let minutes = pipeline_time.as_secs_f64() / 60.0;
    let detail = format!(
        "{} pairs per domain, mean direct MeanR {mean_direct:.2}, mean adapted {:.2}, mean delta {mean_delta:+.2}, pipeline {:.1}s for {} seeds",
        base.data.n_pairs,
        mean(&adapted),
        pipeline_time.as_secs_f64(),
        SEEDS.len()
    );
    let ok = base.data.n_pairs >= 512 && (40.0..=70.0).contains(&mean_direct) && mean_delta >= 5.0 && minutes < 10.0;
    let first = Outcome::new(1, "domain-shift transfer", if ok { Ok(detail) } else { Err(detail) });

    let wins = rows.iter().filter(|r| r[1..].iter().all(|&v| r[0] >= v)).count();
    let means: Vec<f64> = (0..4).map(|k| mean(&rows.iter().map(|r| r[k]).collect::<Vec<_>>())).collect();
    // the drop from removing a component measures its contribution
    let mut drops: Vec<(&str, f64)> = ["ss", "cl", "at"]
        .into_iter()
        .zip(means[1..].iter().map(|m| means[0] - m))
        .collect();
    drops.sort_by(|a, b| b.1.total_cmp(&a.1));
    let detail = format!(
        "full is max on {wins}/{} seeds; mean MeanR {}; contribution order {}",
        SEEDS.len(),
        labels
            .iter()
            .zip(&means)
            .map(|(l, v)| format!("{l} {v:.2}"))
            .collect::<Vec<_>>()
            .join(", "),
        drops
            .iter()
            .map(|(n, d)| format!("{n} ({d:+.2})"))
            .collect::<Vec<_>>()
            .join(" > ")
    );
    let mut second = Outcome::new(2, "ablation ordering", if wins >= 4 { Ok(detail) } else { Err(detail) });
    second.gating = false;
    Ok((first, second))
}

// ---------------------------------------------------------------- 3

const H: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;

fn numeric_grad(base: &Mat, f: impl Fn(&Mat) -> f64) -> Mat {
    let mut g = Mat::zeros(base.dim());
    for idx in ndarray::indices(base.dim()) {
        let mut up = base.clone();
        up[idx] += H;
        let mut down = base.clone();
        down[idx] -= H;
        g[idx] = (f(&up) - f(&down)) / (2.0 * H);
    }
    g
}

/// Norm-wise relative error; a vanishing numeric gradient must be matched
/// absolutely.
fn grad_error(what: &str, analytic: &Mat, numeric: &Mat) -> Result<f64, String> {
    let err = (analytic - numeric).mapv(|x| x * x).sum().sqrt();
    let scale = numeric.mapv(|x| x * x).sum().sqrt();
    if scale < 1e-9 {
        return if err < 1e-8 {
            Ok(0.0)
        } else {
            Err(format!("{what}: gradient should vanish, error {err:e}"))
        };
    }
    let rel = err / scale;
    if rel < GRAD_TOL {
        Ok(rel)
    } else {
        Err(format!("{what}: relative error {rel:e}"))
    }
}

fn param_errors(
    what: &str,
    params: &ParamStore,
    analytic: &ParamStore,
    loss: impl Fn(&ParamStore) -> f64,
) -> Result<(f64, usize), String> {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (name, grad) in analytic.iter() {
        let numeric = numeric_grad(params.get(name), |m| {
            let mut probe = params.clone();
            *probe.get_mut(name) = m.clone();
            loss(&probe)
        });
        worst = worst.max(grad_error(&format!("{what} {name}"), grad, &numeric)?);
        count += grad.len();
    }
    Ok((worst, count))
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn unit_rows(r: &mut satret::rng::Rng, n: usize, d: usize) -> Mat {
    let v: Vec<Vec<f64>> = (0..n).map(|_| common::unit_vec(r, d)).collect();
    Mat::from_shape_fn((n, d), |(i, j)| v[i][j])
}

fn toy(n: usize, embed_dim: usize, seed: u64) -> (Vec<PairRecord>, Vec<PairRecord>, EncoderConfig) {
    let cfg = SyntheticCorpusConfig {
        n_pairs: n,
        seed,
        ..Default::default()
    };
    let corpus = generate_synthetic_corpus(&cfg).unwrap();
    let enc = EncoderConfig {
        image: ImageMode::Features { dim: cfg.feature_dim },
        embed_dim,
        vocab_size: cfg.vocab_size(),
        max_seq_len: cfg.caption_len() + 2,
        mlp: true,
        seed,
        ..Default::default()
    };
    (corpus.source.records, corpus.target.records, enc)
}

fn disc_with_biases(d: usize, seed: u64) -> Discriminator {
    let mut disc = Discriminator::new(d, seed);
    // nonzero biases keep the ReLUs off their kinks
    for (k, b) in ["disc.b1", "disc.b2", "disc.b3"].iter().enumerate() {
        disc.params
            .get_mut(b)
            .iter_mut()
            .enumerate()
            .for_each(|(j, x)| *x = 0.07 * (k + j + 1) as f64);
    }
    disc
}

fn gradient_checks() -> Result<String, String> {
    let start = Instant::now();
    let mut r = common::rng_for(3, "acceptance/gradients");
    let mut notes = Vec::new();
    let mut worst: f64 = 0.0;

    // contrastive loss w.r.t. both embedding sets
    let (n, d) = (5, 8);
    let (left, right) = (unit_rows(&mut r, n, d), unit_rows(&mut r, n, d));
    for tau in [0.07, 0.5] {
        let mut tape = Tape::new();
        let (l, rv) = (tape.leaf(left.clone()), tape.leaf(right.clone()));
        let loss = contrastive_on_tape(&mut tape, l, rv, tau);
        let g = tape.backward(loss);
        let num_l = numeric_grad(&left, |m| contrastive_loss(&rows(m), &rows(&right), tau).unwrap());
        let num_r = numeric_grad(&right, |m| contrastive_loss(&rows(&left), &rows(m), tau).unwrap());
        worst = worst.max(grad_error("contrastive left", &g.get_or_zeros(l, left.dim()), &num_l)?);
        worst = worst.max(grad_error("contrastive right", &g.get_or_zeros(rv, right.dim()), &num_r)?);
    }
    notes.push("contrastive");

    // weighted triplet with every hinge active
    let (text, image) = (unit_rows(&mut r, n, d), unit_rows(&mut r, n, d));
    let w: Vec<f64> = (0..n).map(|_| r.random_range(0.1..2.0)).collect();
    let sims = rows(&text.dot(&image.t()));
    let negs = mine_negatives(&sims, Mining::HardestInBatch, &mut common::rng_for(0, "mining"));
    let margin = 3.0;
    let triplet = |t: &Mat, v: &Mat| {
        let h = triplet_hinges(&rows(t), &rows(v), margin, &negs);
        h.iter().zip(&w).map(|((a, b), w)| w * (a + b)).sum::<f64>() / n as f64
    };
    let mut tape = Tape::new();
    let (tv, vv) = (tape.leaf(text.clone()), tape.leaf(image.clone()));
    let loss = triplet_on_tape(&mut tape, tv, vv, &w, margin, &negs);
    let g = tape.backward(loss);
    worst = worst.max(grad_error(
        "triplet text",
        &g.get_or_zeros(tv, text.dim()),
        &numeric_grad(&text, |m| triplet(m, &image)),
    )?);
    worst = worst.max(grad_error(
        "triplet image",
        &g.get_or_zeros(vv, image.dim()),
        &numeric_grad(&image, |m| triplet(&text, m)),
    )?);
    notes.push("weighted triplet");

    // discriminator loss w.r.t. discriminator parameters, encoder adversarial
    // loss w.r.t. the pair embeddings, both weighting variants
    let disc = disc_with_biases(d, 7);
    let pairs = |r: &mut satret::rng::Rng| -> Vec<EmbeddedPair> {
        (0..n).map(|_| (common::unit_vec(r, d), common::unit_vec(r, d))).collect()
    };
    let (src, tgt) = (pairs(&mut r), pairs(&mut r));
    let stack = |p: &[EmbeddedPair]| {
        let flat: Vec<Vec<f64>> = p.iter().map(|(a, b)| [a.as_slice(), b].concat()).collect();
        Mat::from_shape_fn((n, 2 * d), |(i, j)| flat[i][j])
    };
    let split = |m: &Mat| -> Vec<EmbeddedPair> {
        m.rows()
            .into_iter()
            .map(|row| (row.slice(ndarray::s![..d]).to_vec(), row.slice(ndarray::s![d..]).to_vec()))
            .collect()
    };
    let (src_in, tgt_in) = (stack(&src), stack(&tgt));
    for weight_target in [true, false] {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &disc.params);
        let (si, ti) = (tape.leaf(src_in.clone()), tape.leaf(tgt_in.clone()));
        let ps = discriminator_on_tape(&mut tape, &bound, si);
        let pt = discriminator_on_tape(&mut tape, &bound, ti);
        let (dl, el) = adversarial_on_tape(&mut tape, ps, pt, &w, weight_target);
        let grads = bound.gradients(&tape.backward(dl), &disc.params);
        let (e, _) = param_errors("discriminator", &disc.params, &grads, |p| {
            let probe = Discriminator { params: p.clone() };
            adversarial_losses(&src, &tgt, &w, &probe, weight_target).unwrap().0
        })?;
        worst = worst.max(e);
        let g = tape.backward(el);
        let num_s = numeric_grad(&src_in, |m| {
            adversarial_losses(&split(m), &tgt, &w, &disc, weight_target).unwrap().1
        });
        let num_t = numeric_grad(&tgt_in, |m| {
            adversarial_losses(&src, &split(m), &w, &disc, weight_target).unwrap().1
        });
        worst = worst.max(grad_error("adversarial source", &g.get_or_zeros(si, src_in.dim()), &num_s)?);
        worst = worst.max(grad_error("adversarial target", &g.get_or_zeros(ti, tgt_in.dim()), &num_t)?);
    }
    notes.push("discriminator");
    notes.push("encoder adversarial");

    // every encoder parameter through the pretraining loss
    let (source, target, enc_cfg) = toy(6, 8, 2);
    let model = DualEncoder::new(enc_cfg).map_err(|e| e.to_string())?;
    let filter = FilterConfig {
        score_threshold: -1.0,
        ..Default::default()
    };
    let batch: Vec<&PairRecord> = source.iter().collect();
    let with_params = |p: &ParamStore| DualEncoder::from_parts(model.config.clone(), p.clone()).unwrap();
    let pretrain_loss = |m: &DualEncoder| {
        let mut tape = Tape::new();
        let enc = GraphEncoder::bind(m, &mut tape);
        let g = batch_graph(&enc, &mut tape, &batch, &filter, 0.5).unwrap();
        tape.scalar(g.total)
    };
    let mut tape = Tape::new();
    let enc = GraphEncoder::bind(&model, &mut tape);
    let g = batch_graph(&enc, &mut tape, &batch, &filter, 0.5).map_err(|e| e.to_string())?;
    let grads = enc.gradients(&tape.backward(g.total));
    let (e, n_pretrain) = param_errors("pretrain", &model.params, &grads, |p| pretrain_loss(&with_params(p)))?;
    worst = worst.max(e);

    // every encoder parameter through triplet + beta * adversarial
    let beta = 0.7;
    let disc = disc_with_biases(8, 11);
    let w: Vec<f64> = (0..source.len()).map(|_| r.random_range(0.1..2.0)).collect();
    let embed = |m: &DualEncoder, recs: &[PairRecord]| -> Vec<EmbeddedPair> {
        recs.iter()
            .map(|p| {
                (
                    m.encode_caption(&p.caption_tokens).unwrap(),
                    m.encode_image(&p.image).unwrap(),
                )
            })
            .collect()
    };
    let base_src = embed(&model, &source);
    let sims: Vec<Vec<f64>> = base_src
        .iter()
        .map(|(t, _)| base_src.iter().map(|(_, v)| common::inner(t, v)).collect())
        .collect();
    let negs = mine_negatives(&sims, Mining::HardestInBatch, &mut common::rng_for(1, "mining"));
    let adapt_loss = |m: &DualEncoder| {
        let (s, t) = (embed(m, &source), embed(m, &target));
        let texts: Vec<Vec<f64>> = s.iter().map(|p| p.0.clone()).collect();
        let images: Vec<Vec<f64>> = s.iter().map(|p| p.1.clone()).collect();
        let h = triplet_hinges(&texts, &images, margin, &negs);
        let trip = h.iter().zip(&w).map(|((a, b), w)| w * (a + b)).sum::<f64>() / s.len() as f64;
        trip + beta * adversarial_losses(&s, &t, &w, &disc, true).unwrap().1
    };
    let mut tape = Tape::new();
    let enc = GraphEncoder::bind(&model, &mut tape);
    let on_tape = |tape: &mut Tape, recs: &[PairRecord]| {
        let seqs: Vec<TokenSequence> = recs
            .iter()
            .map(|p| TokenSequence::wrap(&p.caption_tokens, model.config.max_seq_len).unwrap())
            .collect();
        let images: Vec<_> = recs.iter().map(|p| &p.image).collect();
        (enc.texts(tape, &seqs).unwrap(), enc.images(tape, &images).unwrap())
    };
    let (s_txt, s_img) = on_tape(&mut tape, &source);
    let (t_txt, t_img) = on_tape(&mut tape, &target);
    let trip = triplet_on_tape(&mut tape, s_txt, s_img, &w, margin, &negs);
    let src_in = tape.concat_cols(vec![s_txt, s_img]);
    let tgt_in = tape.concat_cols(vec![t_txt, t_img]);
    let bound = BoundParams::bind(&mut tape, &disc.params);
    let ps = discriminator_on_tape(&mut tape, &bound, src_in);
    let pt = discriminator_on_tape(&mut tape, &bound, tgt_in);
    let (_, adv) = adversarial_on_tape(&mut tape, ps, pt, &w, true);
    let scaled = tape.scale(adv, beta);
    let total = tape.add(trip, scaled);
    let plain = adapt_loss(&model);
    if (tape.scalar(total) - plain).abs() > 1e-10 {
        return Err(format!("adaptation loss: tape {} vs plain {plain}", tape.scalar(total)));
    }
    let grads = enc.gradients(&tape.backward(total));
    let (e, _) = param_errors("adaptation", &model.params, &grads, |p| adapt_loss(&with_params(p)))?;
    worst = worst.max(e);
    notes.push("encoder parameters");

    let elapsed = start.elapsed().as_secs_f64();
    let detail = format!(
        "{} checked ({n_pretrain} encoder scalars through the pretraining and adaptation losses), worst relative error {worst:.1e}, {elapsed:.1}s",
        notes.join(", ")
    );
    if elapsed < 60.0 {
        Ok(detail)
    } else {
        Err(format!("too slow: {detail}"))
    }
}

// ---------------------------------------------------------------- 4

fn weight_vector_properties() -> Result<String, String> {
    let mut r = common::rng_for(4, "acceptance/wvec");
    let (mut unique_min, mut constant) = (0, 0);
    for case in 0..1000 {
        let n = r.random_range(1..=64);
        let mut m: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        match case % 5 {
            // identical rows: exactly equal sums
            0 => m = vec![m[0].clone(); n],
            // permuted rows: sums equal up to rounding
            1 => {
                for i in 1..n {
                    m[i] = m[0].clone();
                    m[i].rotate_left(i);
                }
            }
            _ => {}
        }
        let sums: Vec<f64> = m.iter().map(|row| row.iter().sum()).collect();
        let wv = compute_weight_vector(&SimilarityMatrix { rows: m });
        if wv.len() != n {
            return Err(format!("case {case}: {} weights for {n} rows", wv.len()));
        }
        let total: f64 = wv.iter().sum();
        if (total - n as f64).abs() > 1e-6 {
            return Err(format!("case {case}: sum {total} for n = {n}"));
        }
        if wv.iter().any(|&x| x < 0.0) {
            return Err(format!("case {case}: negative weight"));
        }
        if case % 5 < 2 || n == 1 {
            if wv.iter().any(|&x| x != 1.0) {
                return Err(format!("case {case}: constant sums gave {wv:?}"));
            }
            constant += 1;
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| sums[a].total_cmp(&sums[b]));
        if sums[order[1]] > sums[order[0]] {
            if wv[order[0]] != 0.0 || wv.iter().cloned().fold(f64::INFINITY, f64::min) != 0.0 {
                return Err(format!("case {case}: minimum weight {} at the unique minimum", wv[order[0]]));
            }
            unique_min += 1;
        }
    }
    Ok(format!(
        "1000 matrices: {unique_min} with a unique minimum, {constant} with constant row sums"
    ))
}

// ---------------------------------------------------------------- 5

fn curriculum_coverage() -> Result<String, String> {
    let (epochs, inc) = (5, 0.2);
    let windows: Vec<Window> = (1..=epochs)
        .map(|e| CurriculumState::new(e, epochs, inc, CurriculumMode::Window).map(|s| curriculum_window(&s)))
        .collect::<satret::Result<_>>()
        .map_err(|e| e.to_string())?;
    let adapt = AdaptConfig {
        epochs,
        curriculum_increment: inc,
        curriculum_mode: CurriculumMode::Window,
        ..Default::default()
    };
    for (e, w) in windows.iter().enumerate() {
        let from_config = adapt.window_for(e + 1, Toggles::default()).map_err(|e| e.to_string())?;
        if from_config != Some(*w) {
            return Err(format!("epoch {}: config window {from_config:?} vs {w:?}", e + 1));
        }
    }
    if windows[0].lo.abs() > 1e-12 || (windows[epochs - 1].hi - 1.0).abs() > 1e-12 {
        return Err(format!("windows do not span (0, 1]: {windows:?}"));
    }
    for pair in windows.windows(2) {
        if (pair[0].hi - pair[1].lo).abs() > 1e-12 || pair[0].hi <= pair[0].lo {
            return Err(format!("windows are not contiguous: {:?} then {:?}", pair[0], pair[1]));
        }
    }
    for n in 1..=200 {
        for rank in 0..n {
            let hits = windows.iter().filter(|w| w.contains_rank(rank, n)).count();
            if hits != 1 {
                return Err(format!("rank {rank} of {n} lies in {hits} windows"));
            }
        }
    }

    let mut r = common::rng_for(5, "acceptance/curriculum");
    for trial in 0..50 {
        let (nt, ns) = (r.random_range(1..=16), r.random_range(16..=80));
        let w1 = SimilarityMatrix {
            rows: (0..nt)
                .map(|_| (0..ns).map(|_| r.random_range(-1.0..1.0)).collect())
                .collect(),
        };
        for w in windows.iter().chain([&Window::FULL]) {
            let a = select_source_subset(&w1, *w, nt).map_err(|e| e.to_string())?;
            let b = select_source_subset(&w1, *w, nt).map_err(|e| e.to_string())?;
            let mut distinct = a.clone();
            distinct.sort_unstable();
            distinct.dedup();
            if a != b || a.len() != nt || distinct.len() != nt || a.iter().any(|&i| i >= ns) {
                return Err(format!("trial {trial}, window {w:?}: selection {a:?} / {b:?}"));
            }
        }
    }

    let hand = SimilarityMatrix {
        rows: vec![vec![0.1, 0.9, 0.3, 0.5, 0.2]],
    };
    let first = select_source_subset(&hand, windows[0], 1).map_err(|e| e.to_string())?;
    if first != vec![1] {
        return Err(format!("epoch-1 selection on the 1x5 matrix is {first:?}, expected [1]"));
    }
    let bounds: Vec<String> = windows.iter().map(|w| format!("({:.1}, {:.1}]", w.lo, w.hi)).collect();
    Ok(format!(
        "windows {}; 50 random W1 selections per window; 1x5 epoch-1 pick [1]",
        bounds.join(" ")
    ))
}

// ---------------------------------------------------------------- 6

fn oracle_equivalence() -> Result<String, String> {
    type Suite = (&'static str, fn(usize) -> checks::Check, usize);
    let suites: [Suite; 6] = [
        ("segment pipeline", checks::segment_pipeline_vs_predicate, 500),
        ("rank", checks::rank_vs_exhaustive_selection, 200),
        ("R@K", checks::recall_vs_set_membership, 200),
        ("recall report", checks::recall_report_both_directions, 200),
        ("W1/W2", checks::w1_w2_vs_cosine, 200),
        ("PCA", checks::pca_vs_covariance_eigensolve, 200),
    ];
    let mut done = Vec::new();
    for (name, check, n) in suites {
        let count = check(n).map_err(|e| format!("{name}: {e}"))?;
        done.push(format!("{name} {count}"));
    }
    Ok(done.join(", "))
}

// ---------------------------------------------------------------- 7

fn default_snapshot() -> Result<String, String> {
    let expected = BTreeMap::from([
        ("T_a", 0.2),
        ("T_s", 0.2),
        ("num_seg", 6.0),
        ("beta", 1.0),
        ("n_t", 16.0),
        ("n_s", 80.0),
        ("pretrain_epochs", 15.0),
        ("finetune_epochs", 5.0),
        ("finetune_lr", 1e-7),
    ]);
    let got = canonical_defaults();
    if got == expected {
        Ok(format!("{} entries equal", got.len()))
    } else {
        Err(format!("got {got:?}"))
    }
}

// ---------------------------------------------------------------- 8

const SMALL_RUN: &str = r#"{
    "seed": 3,
    "data": {"n_pairs": 160, "feature_dim": 32, "domain_shift_strength": 1.25},
    "encoder": {"embed_dim": 8, "n_heads": 2, "n_layers": 1, "mlp": true},
    "pretrain": {"lr": 0.003, "epochs": 2},
    "adapt": {"lr": 0.0003, "epochs": 2, "debug_dump": true}
}"#;

fn run_all_commands(cfg: &RunConfig) -> satret::Result<()> {
    pipeline::cmd_gen_data(cfg)?;
    pipeline::cmd_pretrain(cfg)?;
    pipeline::cmd_adapt(cfg)?;
    pipeline::cmd_eval(cfg, None, None)?;
    pipeline::cmd_ablate(cfg)?;
    pipeline::cmd_analyze_tags(cfg, None)?;
    Ok(())
}

fn artifacts(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        out.insert(name, fs::read(&path).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

fn determinism() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let mut cfg = RunConfig::from_json(SMALL_RUN).map_err(|e| e.to_string())?;
    cfg.out_dir = a.clone();
    run_all_commands(&cfg).map_err(|e| format!("first run: {e}"))?;

    let mut replay = RunConfig::load(a.join(pipeline::CONFIG_SNAPSHOT)).map_err(|e| e.to_string())?;
    replay.out_dir = b.clone();
    run_all_commands(&replay).map_err(|e| format!("replay: {e}"))?;

    let (first, second) = (artifacts(&a)?, artifacts(&b)?);
    if first.keys().ne(second.keys()) {
        return Err(format!("artifact sets differ: {:?} vs {:?}", first.keys(), second.keys()));
    }
    let mut compared = 0;
    for (name, bytes) in &first {
        if name == pipeline::CONFIG_SNAPSHOT {
            // differs only in out_dir
            let mut snap = RunConfig::load(b.join(name)).map_err(|e| e.to_string())?;
            snap.out_dir = a.clone();
            if (snap.to_json() + "\n").as_bytes() != bytes.as_slice() {
                return Err("config snapshots differ beyond out_dir".into());
            }
            continue;
        }
        if bytes != &second[name] {
            return Err(format!("{name} differs between the run and its replay"));
        }
        compared += 1;
    }
    Ok(format!("{compared} artifacts bit-identical across the six commands"))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut outcomes = Vec::new();
    let (first, second) = transfer_and_ablation();
    outcomes.push(first);
    outcomes.push(second);
    outcomes.push(Outcome::new(3, "gradient correctness", gradient_checks()));
    outcomes.push(Outcome::new(4, "weight vector properties", weight_vector_properties()));
    outcomes.push(Outcome::new(5, "curriculum coverage", curriculum_coverage()));
    outcomes.push(Outcome::new(6, "oracle equivalence", oracle_equivalence()));
    outcomes.push(Outcome::new(7, "default snapshot", default_snapshot()));
    outcomes.push(Outcome::new(8, "determinism", determinism()));

    println!();
    for o in &outcomes {
        let status = if o.pass { "PASS" } else { "FAIL" };
        let kind = if o.gating { "" } else { " (diagnostic)" };
        println!("criterion {} {status}{kind} {}: {}", o.id, o.name, o.detail);
    }
    let failed = outcomes.iter().filter(|o| o.gating && !o.pass).count();
    println!(
        "acceptance: {failed} gating failure(s) in {:.1}s",
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
