//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Criteria 7-9 train the desk configuration (`configs/desk.cfg`) end to end and
//! take several CPU minutes; the rest are property checks over random cases.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clsr::asr::{
    ce_loss, edit_distance, erroneous_positions, mwer_loss_with_candidates, replacement_count, sample_candidates,
    sampler_mix, transcribe, wer, Decoder, DecoderConfig,
};
use clsr::cif::{fire, fire_training, CifPredictor};
use clsr::compute::{
    grad_check, grad_check_against, grad_check_params, softmax_rows, Graph, ParamId, ParamStore, Tensor, Var,
};
use clsr::contrastive::{cosine, nll_symmetric, similarity_matrix};
use clsr::corpus::{generate_corpus, CorpusConfig, QaPair};
use clsr::eval::{
    embed_split, evaluate_embeddings, evaluate_longform, longform_documents, rank_by_similarity, recall_at_k,
    unit_rows, Direction, RetrievalRun,
};
use clsr::model::{Model, ModelConfig, SpeechTrainOptions, Variant};
use clsr::retriever::index::dot;
use clsr::retriever::{load_index, rank_order, save_index, Hit, IndexEntry, IndexMetadata, RetrievalIndex};
use clsr::trainer::{batch_objective, BatchItem, Checkpoint, ExperimentConfig, Stage, StageOutcome, Trainer};
use clsr::vq::{map_to_text_space, quantize_st, GradientPath};

const GRAD_TOL: f64 = 1e-3;
const DESK_CONFIG: &str = include_str!("../../../configs/desk.cfg");

type Verdict = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn column(values: &[f64]) -> Tensor {
    Tensor::from_vec(values.len(), 1, values.to_vec()).unwrap()
}

/// `sum(x * probe)` for a fixed probe: a generic scalar readout.
fn readout(g: &mut Graph, x: Var, probe: &Tensor) -> Var {
    let p = g.constant(probe.clone());
    let m = g.mul(x, p);
    g.sum(m)
}

fn worst(errors: &mut f64, report: clsr::compute::GradCheckReport, what: &str) -> Result<(), String> {
    *errors = errors.max(report.max_rel_error);
    ensure(report.passes(GRAD_TOL), || {
        format!("{what}: relative error {:.2e}", report.max_rel_error)
    })
}

fn tiny_model_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        feature_dim: 6,
        d_model: 8,
        heads: 2,
        ff_dim: 16,
        speech_layers: 1,
        text_layers: 1,
        decoder_layers: 1,
        variant,
        ..ModelConfig::default()
    }
}

fn tiny_pairs() -> Vec<QaPair> {
    generate_corpus(&CorpusConfig {
        pairs: 4,
        vocab_size: 12,
        feature_dim: 6,
        context_len: (3, 5),
        question_len: (2, 2),
        edge_silence: 1,
        ..CorpusConfig::default()
    })
    .unwrap()
    .pairs
}

fn gradient_suite() -> Verdict {
    let started = Instant::now();
    let mut err = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(100);

    let mut store = ParamStore::new();
    let predictor = CifPredictor::new(&mut store, 6, &mut rng);
    let weights = Tensor::randn(5, 1, 1.0, &mut rng);
    for _ in 0..3 {
        let x = Tensor::randn(5, 6, 1.0, &mut rng);
        let r = grad_check(
            |g, h| {
                let a = predictor.predict_weights(g, &store, h).unwrap();
                readout(g, a, &weights)
            },
            &x,
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        worst(&mut err, r, "predict_weights")?;
    }

    // points whose running sums stay clear of the firing boundaries
    let hv = Tensor::randn(5, 3, 1.0, &mut rng);
    let probe = Tensor::randn(2, 3, 1.0, &mut rng);
    for point in [
        [0.8, 0.3, 0.4, 0.35, 0.2],
        [0.55, 0.7, 0.2, 0.35, 0.45],
        [0.9, 0.05, 0.6, 0.3, 0.4],
    ] {
        let through_alpha = grad_check(
            |g, a| {
                let h = g.constant(hv.clone());
                let fired = fire(g, h, a, 1.0).unwrap();
                readout(g, fired.embeddings, &probe)
            },
            &column(&point),
            1e-6,
        )
        .map_err(|e| e.to_string())?;
        worst(&mut err, through_alpha, "fire (weights)")?;
        let through_frames = grad_check(
            |g, h| {
                let a = g.constant(column(&point));
                let fired = fire(g, h, a, 1.0).unwrap();
                readout(g, fired.embeddings, &probe)
            },
            &hv,
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        worst(&mut err, through_frames, "fire (frames)")?;
    }

    let mut store = ParamStore::new();
    let cfg = DecoderConfig {
        d_model: 8,
        heads: 2,
        ff_dim: 16,
        layers: 2,
        vocab_size: 20,
        positional: true,
    };
    let decoder = Decoder::new(&mut store, cfg, &mut rng).unwrap();
    let hs = Tensor::randn(4, 8, 1.0, &mut rng);
    let probe = Tensor::randn(3, 20, 1.0, &mut rng);
    let e = Tensor::randn(3, 8, 1.0, &mut rng);
    let r = grad_check(
        |g, q| {
            let h = g.constant(hs.clone());
            let d = decoder.decode(g, &store, h, q).unwrap();
            readout(g, d, &probe)
        },
        &e,
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    worst(&mut err, r, "decode (inputs)")?;
    let ids: Vec<ParamId> = store.ids().collect();
    let r = grad_check_params(
        &store,
        &ids,
        |g, s| {
            let h = g.constant(hs.clone());
            let q = g.constant(e.clone());
            let d = decoder.decode(g, s, h, q).unwrap();
            readout(g, d, &probe)
        },
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    worst(&mut err, r, "decode (parameters)")?;

    for smoothing in [0.0, 0.1] {
        let x = Tensor::randn(4, 7, 1.5, &mut rng);
        let r =
            grad_check(|g, l| ce_loss(g, l, &[3, 0, 6, 1], smoothing).unwrap(), &x, 1e-5).map_err(|e| e.to_string())?;
        worst(&mut err, r, "ce_loss")?;
    }

    // MWER's value is zero by construction (the baseline is the expectation);
    // its gradient is checked against the same sum with the baseline frozen.
    let reference = [2, 3, 1];
    for seed in 0..3u64 {
        let x = Tensor::randn(3, 5, 1.0, &mut rng);
        let cands = sample_candidates(&x, 6, seed);
        let errs: Vec<f64> = cands.iter().map(|c| edit_distance(c, &reference) as f64).collect();
        let seq_logprobs = |lsm: &Tensor| -> Vec<f64> {
            cands
                .iter()
                .map(|c| c.iter().enumerate().map(|(i, &t)| lsm.get(i, t)).sum())
                .collect()
        };
        let lp = seq_logprobs(&log_softmax(&x));
        let m = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = lp.iter().map(|v| (v - m).exp()).sum();
        let w_bar: f64 = lp.iter().zip(&errs).map(|(v, w)| (v - m).exp() / z * w).sum();
        let centered = Tensor::from_vec(1, errs.len(), errs.iter().map(|w| w - w_bar).collect()).unwrap();
        let r = grad_check_against(
            |g, l| mwer_loss_with_candidates(g, l, &reference, &cands).unwrap(),
            |g, l| {
                let lsm = g.log_softmax_rows(l);
                let seqs: Vec<Var> = cands
                    .iter()
                    .map(|c| {
                        let p = g.pick(lsm, c);
                        g.sum(p)
                    })
                    .collect();
                let row = g.concat_cols(&seqs);
                let p = g.softmax_rows(row);
                let m = g.mul_const(p, centered.clone());
                g.sum(m)
            },
            &x,
            1e-5,
        )
        .map_err(|e| e.to_string())?;
        worst(&mut err, r, "mwer_loss")?;
    }

    let table = Tensor::randn(6, 4, 1.0, &mut rng);
    let probe = Tensor::randn(3, 4, 1.0, &mut rng);
    for _ in 0..3 {
        let x = Tensor::randn(3, 6, 1.0, &mut rng);
        let r = grad_check_against(
            |g, d| {
                let q = quantize_st(g, d, 0.1).unwrap();
                let t = g.constant(table.clone());
                let e = map_to_text_space(g, &q, t).unwrap();
                readout(g, e, &probe)
            },
            |g, d| {
                let s = g.scale(d, 10.0);
                let p = g.softmax_rows(s);
                let t = g.constant(table.clone());
                let e = g.matmul(p, t);
                readout(g, e, &probe)
            },
            &x,
            1e-6,
        )
        .map_err(|e| e.to_string())?;
        worst(&mut err, r, "quantize_st + map_to_text_space")?;
    }

    for _ in 0..3 {
        let x = Tensor::randn(4, 4, 0.5, &mut rng).map(f64::tanh);
        let r = grad_check(|g, s| nll_symmetric(g, s, 0.5).unwrap(), &x, 1e-5).map_err(|e| e.to_string())?;
        worst(&mut err, r, "nll_symmetric")?;
    }

    // Full joint objective on a 2-pair batch. The quantizer runs its relaxed path
    // (the straight-through forward is piecewise constant) and MWER is off (its
    // value is identically zero). With the sampler on, the substituted rows are
    // detached copies of the output layer, so that layer is checked only with the
    // sampler off.
    let pairs = tiny_pairs();
    let mut model = Model::new(tiny_model_config(Variant::Full), 5).unwrap();
    model.store.set_frozen(&Stage::Joint.frozen_groups());
    let items: Vec<BatchItem> = pairs[..2].iter().map(BatchItem::from).collect();
    let batch: Vec<&BatchItem> = items.iter().collect();
    for sampler in [false, true] {
        let mut tc = ExperimentConfig::default().train;
        tc.n_mwer = 0;
        tc.sampler = sampler;
        tc.tau = 0.5;
        let output = [model.decoder.output.weight, model.decoder.output.bias];
        let ids: Vec<ParamId> = model
            .store
            .ids()
            .filter(|&id| !model.store.is_frozen(id) && (!sampler || !output.contains(&id)))
            .collect();
        let r = grad_check_params(
            &model.store,
            &ids,
            |g, s| {
                let mut m = model.clone();
                m.store = s.clone();
                batch_objective(&m, &tc, Stage::Joint, g, &batch, 0, GradientPath::Relaxed)
                    .unwrap()
                    .0
            },
            1e-6,
        )
        .map_err(|e| e.to_string())?;
        worst(&mut err, r, &format!("joint objective (sampler {sampler})"))?;
    }

    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1}s, budget 120s"))?;
    Ok(format!("max relative error {err:.2e}, {secs:.1}s"))
}

fn log_softmax(x: &Tensor) -> Tensor {
    softmax_rows(x, 1.0).map(f64::ln)
}

fn cif_laws() -> Verdict {
    let mut g = Graph::new();
    let h = g.constant(Tensor::eye(5));
    let a = g.constant(column(&[0.8, 0.3, 0.4, 0.4, 0.1]));
    let fired = fire(&mut g, h, a, 1.0).map_err(|e| e.to_string())?;
    ensure(fired.count == 2, || {
        format!("worked example fired {} tokens", fired.count)
    })?;
    let expect = [[0.8, 0.2, 0.0, 0.0, 0.0], [0.0, 0.1, 0.4, 0.4, 0.1]];
    let e = g.value(fired.embeddings);
    for (k, row) in expect.iter().enumerate() {
        for (i, &w) in row.iter().enumerate() {
            ensure((e.get(k, i) - w).abs() < 1e-12, || {
                format!("worked example token {k} frame {i}: {}", e.get(k, i))
            })?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for case in 0..1000 {
        let t = rng.random_range(1..40);
        let beta = rng.random_range(0.3..2.0);
        let alpha: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut g = Graph::new();
        let h = g.constant(Tensor::eye(t));
        let av = g.constant(column(&alpha));
        let fired = fire(&mut g, h, av, beta).map_err(|e| e.to_string())?;
        let w = g.value(fired.contributions).clone();
        let total: f64 = alpha.iter().sum();
        ensure(fired.count == ((total + 1e-9) / beta).floor() as usize, || {
            format!("case {case}: count {}", fired.count)
        })?;
        for k in 0..fired.count {
            let s: f64 = w.row(k).iter().sum();
            ensure((s - beta).abs() < 1e-9, || {
                format!("case {case}: token {k} integrates {s}, beta {beta}")
            })?;
        }
        for (i, &ai) in alpha.iter().enumerate() {
            let used: f64 = (0..fired.count).map(|k| w.get(k, i)).sum();
            ensure(used <= ai + 1e-12, || {
                format!("case {case}: frame {i} gives {used} of {ai}")
            })?;
        }
        let span = |k: usize| {
            let nz: Vec<usize> = (0..t).filter(|&i| w.get(k, i) > 0.0).collect();
            (nz.first().copied(), nz.last().copied())
        };
        for k in 1..fired.count {
            if let ((_, Some(prev_last)), (Some(first), _)) = (span(k - 1), span(k)) {
                ensure(prev_last <= first, || {
                    format!("case {case}: tokens {} and {k} overlap", k - 1)
                })?;
            }
        }
    }

    for case in 0..1000 {
        let t = rng.random_range(1..40);
        let n = rng.random_range(1..20);
        let alpha: Vec<f64> = (0..t).map(|_| rng.random_range(0.05..1.0)).collect();
        let mut g = Graph::new();
        let h = g.constant(Tensor::eye(t));
        let av = g.constant(column(&alpha));
        let fired = fire_training(&mut g, h, av, n, 1.0).map_err(|e| e.to_string())?;
        ensure(fired.count == n, || {
            format!("scaled case {case}: fired {} of {n}", fired.count)
        })?;
    }
    Ok("worked example, 1000 conservation/monotonicity cases, 1000 scaled-firing cases".into())
}

fn straight_through() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    for case in 0..1000 {
        let n = rng.random_range(1..10);
        let v = rng.random_range(2..30);
        let d = rng.random_range(1..9);
        let table = Tensor::randn(v, d, 1.0, &mut rng);
        let logits = Tensor::randn(n, v, 2.0, &mut rng);
        let mut g = Graph::new();
        let dv = g.constant(logits.clone());
        let t = g.constant(table.clone());
        let q = quantize_st(&mut g, dv, 0.1).map_err(|e| e.to_string())?;
        let e = map_to_text_space(&mut g, &q, t).map_err(|e| e.to_string())?;
        ensure(g.value(e) == &table.select_rows(&transcribe(&logits)), || {
            format!("case {case}: forward is not the lookup")
        })?;
    }
    let mut err = 0.0f64;
    for case in 0..50 {
        let table = Tensor::randn(6, 4, 1.0, &mut rng);
        let probe = Tensor::randn(3, 4, 1.0, &mut rng);
        let x = Tensor::randn(3, 6, 1.0, &mut rng);
        let r = grad_check_against(
            |g, d| {
                let q = quantize_st(g, d, 0.1).unwrap();
                let t = g.constant(table.clone());
                let e = map_to_text_space(g, &q, t).unwrap();
                readout(g, e, &probe)
            },
            |g, d| {
                let s = g.scale(d, 10.0);
                let p = g.softmax_rows(s);
                let t = g.constant(table.clone());
                let e = g.matmul(p, t);
                readout(g, e, &probe)
            },
            &x,
            1e-6,
        )
        .map_err(|e| e.to_string())?;
        worst(&mut err, r, &format!("gradient case {case}"))?;
    }
    Ok(format!(
        "1000 bit-exact forwards, 50 gradient checks (max relative error {err:.2e})"
    ))
}

fn sampler_contract() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    for case in 0..1000 {
        let n = rng.random_range(1..16);
        let target: Vec<usize> = (0..n).map(|_| rng.random_range(3..12)).collect();
        let hyp: Vec<usize> = target
            .iter()
            .map(|&t| if rng.random_bool(0.5) { t + 20 } else { t })
            .collect();
        let lambda = rng.random_range(0.01..0.99);
        let errors = erroneous_positions(&hyp, &target);
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(n, 3));
        let c = g.constant(Tensor::full(n, 3, 1.0));
        let mix = sampler_mix(&mut g, a, c, &hyp, &target, lambda, &mut rng).map_err(|e| e.to_string())?;
        let want = (lambda * errors.len() as f64 - 1e-9).ceil() as usize;
        ensure(
            mix.replaced.len() == want && want == replacement_count(errors.len(), lambda),
            || {
                format!(
                    "case {case}: replaced {} of {} errors at lambda {lambda}",
                    mix.replaced.len(),
                    errors.len()
                )
            },
        )?;
        ensure(mix.replaced.iter().all(|i| errors.contains(i)), || {
            format!("case {case}: replaced a correct position")
        })?;
        let e = g.value(mix.embeddings);
        for i in 0..n {
            let expect = if mix.replaced.contains(&i) { 1.0 } else { 0.0 };
            ensure(e.get(i, 0) == expect, || {
                format!("case {case}: row {i} has the wrong source")
            })?;
        }
    }

    let mut g = Graph::new();
    let av = Tensor::randn(4, 3, 1.0, &mut rng);
    let a = g.constant(av.clone());
    let c = g.constant(Tensor::randn(4, 3, 1.0, &mut rng));
    let same = [4, 5, 6, 7];
    let mix = sampler_mix(&mut g, a, c, &same, &same, 0.75, &mut rng).map_err(|e| e.to_string())?;
    ensure(mix.replaced.is_empty() && g.value(mix.embeddings) == &av, || {
        "zero-error case changed E^a".into()
    })?;

    let pairs = tiny_pairs();
    let model = Model::new(tiny_model_config(Variant::Full), 2).unwrap();
    let opts = SpeechTrainOptions {
        mwer_candidates: 0,
        ..SpeechTrainOptions::default()
    };
    let mut g = Graph::new();
    let p = &pairs[1];
    let out = model
        .speech_train(&mut g, &p.context_speech, &p.context, &opts, &mut rng)
        .map_err(|e| e.to_string())?;
    let first = out.first_logits.ok_or("sampler did not run a first pass")?;
    let sentence = out.sentence.ok_or("no sentence vector")?;
    let pooled = g.sum(sentence);
    let loss = g.add(out.ce, pooled);
    let grads = g.backward(loss);
    ensure(!g.requires_grad(first) && grads.wrt(first).is_none(), || {
        "first pass received gradient".into()
    })?;
    ensure(!grads.param_grads(&g).is_empty(), || {
        "second pass produced no parameter gradient".into()
    })?;
    Ok(format!(
        "1000 random cases, zero-error identity, gradient tap ({} rows replaced)",
        out.replaced
    ))
}

fn contrastive_laws() -> Verdict {
    for b in [2usize, 4, 8] {
        for (value, tau) in [(0.0, 0.05), (0.3, 0.05), (-0.7, 1.0), (0.9, 0.2)] {
            let mut g = Graph::new();
            let s = g.constant(Tensor::full(b, b, value));
            let nll = nll_symmetric(&mut g, s, tau).map_err(|e| e.to_string())?;
            let l = g.scalar(nll);
            ensure((l - (b as f64).ln()).abs() <= 1e-12, || {
                format!("B={b}: uniform loss {l}")
            })?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    for _ in 0..50 {
        let b = rng.random_range(1..9);
        let d = rng.random_range(2..10);
        let q = Tensor::randn(b, d, 1.0, &mut rng);
        let c = Tensor::randn(b, d, 1.0, &mut rng);
        let mut g = Graph::new();
        let (qv, cv) = (g.constant(q.clone()), g.constant(c.clone()));
        let sv = similarity_matrix(&mut g, qv, cv).map_err(|e| e.to_string())?;
        let s = g.value(sv).clone();
        for i in 0..b {
            for j in 0..b {
                let want = cosine(q.row(i), c.row(j)).unwrap();
                ensure((s.get(i, j) - want).abs() < 1e-12, || {
                    format!("S[{i},{j}] = {} vs {want}", s.get(i, j))
                })?;
            }
        }
        let scale = |x: &Tensor, rng: &mut ChaCha8Rng| {
            let mut y = x.clone();
            for r in 0..y.rows() {
                let f = rng.random_range(0.01..100.0);
                y.row_mut(r).iter_mut().for_each(|v| *v *= f);
            }
            y
        };
        let (qs, cs) = (scale(&q, &mut rng), scale(&c, &mut rng));
        let (qv, cv) = (g.constant(qs.clone()), g.constant(cs.clone()));
        let sv = similarity_matrix(&mut g, qv, cv).map_err(|e| e.to_string())?;
        let s2 = g.value(sv).clone();
        ensure(
            s.data().iter().zip(s2.data()).all(|(a, b)| (a - b).abs() < 1e-12),
            || "rescaling changed S".into(),
        )?;
        for dir in [Direction::QuestionToContext, Direction::ContextToQuestion] {
            let (a, b2) = match dir {
                Direction::QuestionToContext => ((&q, &c), (&qs, &cs)),
                Direction::ContextToQuestion => ((&c, &q), (&cs, &qs)),
            };
            let r1 = rank_by_similarity(&unit_rows(a.0), &unit_rows(a.1), dir).map_err(|e| e.to_string())?;
            let r2 = rank_by_similarity(&unit_rows(b2.0), &unit_rows(b2.1), dir).map_err(|e| e.to_string())?;
            ensure(r1 == r2, || "rescaling changed a ranking".into())?;
        }
    }
    Ok("ln B for B in {2,4,8}, 50 cosine-oracle and rescaling cases".into())
}

fn random_index(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> RetrievalIndex {
    let entries = (0..count)
        .map(|i| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            IndexEntry {
                doc_id: (i / 7) as u64,
                segment_index: (i % 7) as u32,
                vector: v.iter().map(|x| (x / n) as f32).collect(),
            }
        })
        .collect();
    let meta = IndexMetadata {
        model_hash: "oracle".into(),
        window: 100,
        hop: 100,
    };
    RetrievalIndex::new(dim, meta, entries).unwrap()
}

fn exhaustive(index: &RetrievalIndex, q: &[f64]) -> Vec<Hit> {
    let mut hits: Vec<Hit> = index
        .entries()
        .iter()
        .map(|e| Hit {
            doc_id: e.doc_id,
            segment_index: e.segment_index,
            score: dot(q, &e.vector),
        })
        .collect();
    hits.sort_by(rank_order);
    hits
}

fn retrieval_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    let (n, dim) = (10_000, 16);
    let index = random_index(&mut rng, n, dim);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("oracle.idx");
    save_index(&path, &index).map_err(|e| e.to_string())?;
    let loaded = load_index(&path).map_err(|e| e.to_string())?;
    let mut searches = 0;
    for query in 0..4 {
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let full = exhaustive(&index, &q);
        let ks: Vec<usize> = if query == 0 {
            (1..=n).collect()
        } else {
            (1..=64).chain([100, 1000, 5000, n]).collect()
        };
        for &k in &ks {
            let got = index.search_topk(&q, k).map_err(|e| e.to_string())?;
            ensure(got[..] == full[..k], || {
                format!("query {query}, k={k}: differs from the sorted scan")
            })?;
            searches += 1;
        }
        for k in [1, 10, n] {
            ensure(
                loaded.search_topk(&q, k).unwrap() == index.search_topk(&q, k).unwrap(),
                || format!("query {query}, k={k}: reloaded index ranks differently"),
            )?;
        }
    }
    Ok(format!("{searches} searches over {n} entries, roundtrip bit-exact"))
}

/// Held-out WER and R@1 of a trained model in both directions.
fn held_out_metrics(model: &Model, held_out: &[QaPair]) -> Result<(f64, f64, f64), String> {
    let emb = embed_split(model, held_out, false).map_err(|e| e.to_string())?;
    let [(_, qc), (_, cq)] = evaluate_embeddings(&emb).map_err(|e| e.to_string())?;
    Ok((
        emb.wer(held_out).map_err(|e| e.to_string())?,
        qc.at(1).unwrap(),
        cq.at(1).unwrap(),
    ))
}

struct DeskRun {
    config: ExperimentConfig,
    asr: StageOutcome,
    pretrained: Checkpoint,
    model: Model,
    seconds: f64,
    metrics: (f64, f64, f64),
}

fn desk_run() -> Result<DeskRun, String> {
    let started = Instant::now();
    let config = ExperimentConfig::parse(DESK_CONFIG).map_err(|e| e.to_string())?;
    let corpus = generate_corpus(&config.corpus).map_err(|e| e.to_string())?;
    let (train, held_out) = corpus.split(config.held_out);
    let mut trainer = Trainer::new(config.clone()).map_err(|e| e.to_string())?;
    let asr = trainer
        .run_stage(Stage::PretrainAsr, train, held_out)
        .map_err(|e| e.to_string())?;
    trainer
        .run_stage(Stage::PretrainText, train, held_out)
        .map_err(|e| e.to_string())?;
    let pretrained = trainer.checkpoint();
    trainer
        .run_stage(Stage::Joint, train, held_out)
        .map_err(|e| e.to_string())?;
    let seconds = started.elapsed().as_secs_f64();
    let metrics = held_out_metrics(&trainer.model, held_out)?;
    Ok(DeskRun {
        config,
        asr,
        pretrained,
        model: trainer.model,
        seconds,
        metrics,
    })
}

fn end_to_end(run: &DeskRun) -> Verdict {
    let (wer, qc, cq) = run.metrics;
    let summary = format!("WER {wer:.4}, R@1 Q->C {qc:.4} C->Q {cq:.4}, {:.0}s", run.seconds);
    ensure(wer <= 0.10, || format!("{summary}: WER above 0.10"))?;
    ensure(qc >= 0.80, || format!("{summary}: Q->C R@1 below 0.80"))?;
    ensure((qc - cq).abs() < 0.05, || {
        format!("{summary}: directions differ by 5 points or more")
    })?;
    ensure(run.seconds <= 900.0, || format!("{summary}: over 15 minutes"))?;
    Ok(summary)
}

fn ablation_direction(run: &DeskRun) -> Verdict {
    let corpus = generate_corpus(&run.config.corpus).map_err(|e| e.to_string())?;
    let (train, held_out) = corpus.split(run.config.held_out);

    let pretrained = run.pretrained.restore_model().map_err(|e| e.to_string())?;
    let no_vq = pretrained
        .with_variant(Variant::NoVq, run.config.train.seed)
        .map_err(|e| e.to_string())?;
    let mut cfg = run.config.clone();
    cfg.model.variant = Variant::NoVq;
    let ckpt = Checkpoint::capture(&no_vq, &cfg, None);
    let mut trainer = Trainer::from_checkpoint(cfg, &ckpt).map_err(|e| e.to_string())?;
    trainer
        .run_stage(Stage::Joint, train, held_out)
        .map_err(|e| e.to_string())?;
    let (_, no_vq_r1, _) = held_out_metrics(&trainer.model, held_out)?;
    let full_r1 = run.metrics.1;

    let mut cfg = run.config.clone();
    cfg.train.sampler = false;
    let mut trainer = Trainer::new(cfg).map_err(|e| e.to_string())?;
    let off = trainer
        .run_stage(Stage::PretrainAsr, train, held_out)
        .map_err(|e| e.to_string())?;
    let final_wer = |o: &StageOutcome| o.history.last().and_then(|r| r.wer).unwrap_or(f64::NAN);
    let (on_wer, off_wer) = (final_wer(&run.asr), final_wer(&off));

    let summary = format!(
        "R@1 full {full_r1:.4} vs no-VQ {no_vq_r1:.4}; pretraining WER sampler on {on_wer:.4} vs off {off_wer:.4}"
    );
    ensure(full_r1 > no_vq_r1, || format!("{summary}: quantizer did not help"))?;
    ensure(on_wer <= off_wer, || format!("{summary}: sampler did not help"))?;
    Ok(summary)
}

fn long_form(run: &DeskRun) -> Verdict {
    let corpus = generate_corpus(&run.config.corpus).map_err(|e| e.to_string())?;
    let r = &run.config.retrieval;
    let docs = longform_documents(&corpus, &run.config.corpus, 100, &r.longform).map_err(|e| e.to_string())?;
    let windows = docs[0].num_regions();
    let report = evaluate_longform(&run.model, &docs, r.window, r.hop).map_err(|e| e.to_string())?;
    let summary = format!(
        "{}/{} documents ({windows} windows each), accuracy {:.2}, {} empty segments",
        report.hits, report.documents, report.accuracy, report.sentinel_segments
    );
    ensure(windows == 5, || format!("{summary}: expected 5 windows"))?;
    ensure(report.accuracy >= 0.90, || format!("{summary}: below 0.90"))?;
    Ok(summary)
}

/// The textbook recursion on suffixes, memoised on `(i, j)` so the exhaustive
/// sweep stays polynomial.
fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    fn go(a: &[usize], b: &[usize], i: usize, j: usize, memo: &mut [Vec<Option<usize>>]) -> usize {
        if let Some(d) = memo[i][j] {
            return d;
        }
        let d = if i == a.len() {
            b.len() - j
        } else if j == b.len() {
            a.len() - i
        } else {
            let sub = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
            sub.min(go(a, b, i + 1, j, memo) + 1).min(go(a, b, i, j + 1, memo) + 1)
        };
        memo[i][j] = Some(d);
        d
    }
    let mut memo = vec![vec![None; b.len() + 1]; a.len() + 1];
    go(a, b, 0, 0, &mut memo)
}

fn all_sequences(max_len: usize, alphabet: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s| {
                (0..alphabet).map(move |t| {
                    let mut s2 = s.clone();
                    s2.push(t);
                    s2
                })
            })
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

fn metric_correctness() -> Verdict {
    let seqs = all_sequences(5, 4);
    let mut pairs = 0usize;
    for a in &seqs {
        for b in &seqs {
            let d = levenshtein(a, b);
            ensure(edit_distance(a, b) == d, || format!("{a:?} vs {b:?}"))?;
            match wer(a, b) {
                Ok(w) => ensure(!b.is_empty() && w == d as f64 / b.len() as f64, || {
                    format!("wer {a:?} vs {b:?}")
                })?,
                Err(_) => ensure(b.is_empty(), || format!("wer refused {a:?} vs {b:?}"))?,
            }
            pairs += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let (queries, universe) = (10_000, 64);
    let run = RetrievalRun {
        direction: Direction::QuestionToContext,
        rankings: (0..queries)
            .map(|_| {
                let mut ids: Vec<usize> = (0..universe).collect();
                rand::seq::SliceRandom::shuffle(&mut ids[..], &mut rng);
                ids
            })
            .collect(),
        gold: (0..queries).map(|i| i % universe).collect(),
    };
    for k in [1, 5, 10, 32] {
        let p = k as f64 / universe as f64;
        let sigma = (p * (1.0 - p) / queries as f64).sqrt();
        let r = recall_at_k(&run, k).map_err(|e| e.to_string())?;
        ensure((r - p).abs() <= 3.0 * sigma, || {
            format!("R@{k} = {r:.4}, chance {p:.4} +- {:.4}", 3.0 * sigma)
        })?;
    }
    Ok(format!("{pairs} sequence pairs, Monte Carlo R@k within 3 sigma"))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, verdict: Verdict| match verdict {
        Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail})"),
        Err(detail) => {
            failed += 1;
            println!("criterion {n:>2} {name}: FAIL ({detail})");
        }
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "CIF laws", cif_laws());
    report(3, "straight-through quantizer", straight_through());
    report(4, "sampler contract", sampler_contract());
    report(5, "contrastive laws", contrastive_laws());
    report(6, "retrieval oracle", retrieval_oracle());
    report(10, "metric correctness", metric_correctness());
    match desk_run() {
        Ok(run) => {
            report(7, "desk-scale end-to-end", end_to_end(&run));
            report(8, "ablation direction", ablation_direction(&run));
            report(9, "long-form retrieval", long_form(&run));
        }
        Err(e) => {
            for (n, name) in [
                (7, "desk-scale end-to-end"),
                (8, "ablation direction"),
                (9, "long-form retrieval"),
            ] {
                report(n, name, Err(format!("training failed: {e}")));
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
