//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always print; exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ordcap::corpus::{
    build_vocab, synth_corpus, CaptionSequence, ImageFeatures, SynthCorpus, SynthSpec, Vocabulary, DEFAULT_MAX_LEN,
    END, START, UNK,
};
use ordcap::decoder::{
    Decoder, DecoderConfig, DecoderDims, DecoderMode, DecoderSample, DecoderTrainer, EpochLog, GenerateOptions,
    GuideInput, ZOrder,
};
use ordcap::metrics::{bleu, evaluate};
use ordcap::numerics::gradcheck::{max_relative_error, DEFAULT_STEP};
use ordcap::numerics::{Graph, ParamStore, Tensor};
use ordcap::ordernet::{
    caption_recall, order_similarity, total_loss, train_ordernet, BatchEmbeddings, EmbedMap, OrderDims, OrderNet,
    OrderNetConfig, OrderSample,
};
use ordcap::pipeline::{ablation, PipelineConfig, Profile};
use ordcap::topics::{eval_prf, lda_train, threshold_topics, LdaConfig};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), rand_vec(rng, shape.iter().product(), -1.0, 1.0)).unwrap()
}

// 1 ──────────────────────────────────────────────────────────────────────

fn ranking_loss_gradients(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let dims = OrderDims {
        d_fc: 6,
        n_topics: 4,
        vocab: 12,
        d_word: 5,
        d_gru: 6,
        d_emb: 8,
    };
    let net = OrderNet::new(dims, EmbedMap::Square, seed).unwrap();
    let b = 3;
    let fc = Tensor::matrix(b, 6, rand_vec(&mut rng, b * 6, -1.0, 1.0)).unwrap();
    let tp = Tensor::matrix(b, 4, rand_vec(&mut rng, b * 4, 0.0, 1.0)).unwrap();
    let seqs: Vec<Vec<usize>> = (0..b)
        .map(|r| (0..r + 2).map(|_| rng.gen_range(UNK + 1..12)).collect())
        .collect();
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    // every hinge active, away from its kink
    let margin = 2.0;
    let loss_of = |p: &ParamStore| {
        let n = OrderNet {
            params: p.clone(),
            ..net.clone()
        };
        let mut g = Graph::new();
        let be = BatchEmbeddings::encode(&n, &mut g, fc.clone(), tp.clone(), &refs)?;
        let l = total_loss(&mut g, &be, margin)?;
        Ok(g.value(l).item())
    };
    let mut params = net.params.clone();
    let mut g = Graph::new();
    let be = BatchEmbeddings::encode(&net, &mut g, fc.clone(), tp.clone(), &refs).unwrap();
    let l = total_loss(&mut g, &be, margin).unwrap();
    g.backward(l, &mut params).unwrap();
    max_relative_error(&params, DEFAULT_STEP, loss_of).unwrap().0
}

fn caption_loss_gradients(mode: DecoderMode, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
    // the topic guide is fc ⧺ topic probabilities; embedding guides are d_emb wide
    let (gi, gt) = if mode.uses_embeddings() { (6, 6) } else { (5, 3) };
    let d = DecoderDims {
        vocab: 20,
        d_word: 5,
        d_fc: 5,
        d_down: 3,
        grid_n: 4,
        d_loc: 8,
        d_guide: if mode.uses_embeddings() { 6 } else { 8 },
        d_h: 6,
        d_att: 5,
        mlp: 8,
    };
    let z_order = if seed.is_multiple_of(2) {
        ZOrder::AfterCore
    } else {
        ZOrder::BeforeCore
    };
    let mut dec = Decoder::new(d, mode, z_order, seed).unwrap();
    // move λ and μ off their symmetric initial value
    for (_, t) in dec.params.iter_mut() {
        if t.len() == 1 {
            t.data_mut()[0] = rng.gen_range(-1.0..1.0);
        }
    }
    let ims: Vec<ImageFeatures> = (0..3)
        .map(|_| ImageFeatures::new(rand_tensor(&mut rng, &[5]), rand_tensor(&mut rng, &[4, 8])).unwrap())
        .collect();
    let gds: Vec<GuideInput> = (0..3)
        .map(|_| GuideInput {
            image: Tensor::vector(rand_vec(&mut rng, gi, 0.0, 1.0)).unwrap(),
            topic: Tensor::vector(rand_vec(&mut rng, gt, 0.0, 1.0)).unwrap(),
        })
        .collect();
    let caps: Vec<CaptionSequence> = (0..3)
        .map(|i| {
            let mut ids = vec![START];
            ids.extend((0..i + 1).map(|_| rng.gen_range(UNK + 1..20)));
            ids.push(END);
            CaptionSequence::from_ids(ids).unwrap()
        })
        .collect();
    let batch: Vec<_> = (0..3).map(|i| (&ims[i], &gds[i], &caps[i])).collect();
    dec.loss_and_grad(&batch).unwrap();
    let probe = dec.clone();
    let loss_of = |p: &ParamStore| {
        let mut q = probe.clone();
        q.params = p.clone();
        q.loss(&batch)
    };
    max_relative_error(&dec.params, DEFAULT_STEP, loss_of).unwrap().0
}

fn criterion_1() -> Outcome {
    let rank = (0..10).map(ranking_loss_gradients).fold(0.0, f64::max);
    let mut detail = format!("10 seeds each; worst rel err ranking {rank:.2e}");
    let mut worst = rank;
    for mode in DecoderMode::ALL {
        let cap = (0..10).map(|s| caption_loss_gradients(mode, s)).fold(0.0, f64::max);
        detail.push_str(&format!(", caption[{mode}] {cap:.2e}"));
        worst = worst.max(cap);
    }
    ensure(worst < 1e-4, format!("{detail} (< 1e-4)"))
}

// 2 ──────────────────────────────────────────────────────────────────────

fn dominated_by(rng: &mut ChaCha8Rng, x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v - rng.gen_range(0.0..1.0) * v).collect()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dim = 6;
    let mut violations = 0;
    let mut dominated_pairs = 0;
    for i in 0..1000 {
        let x = rand_vec(&mut rng, dim, 0.0, 1.0);
        // half the pairs are dominated by construction
        let y = if i % 2 == 0 {
            dominated_by(&mut rng, &x)
        } else {
            rand_vec(&mut rng, dim, 0.0, 1.0)
        };
        let s = order_similarity(&x, &y).unwrap();
        let dominates = x.iter().zip(&y).all(|(a, b)| a >= b);
        dominated_pairs += usize::from(dominates);
        if s > 0.0 || (s == 0.0) != dominates {
            violations += 1;
        }
    }
    let mut broken_chains = 0;
    for _ in 0..1000 {
        let x = rand_vec(&mut rng, dim, 0.0, 1.0);
        let y = dominated_by(&mut rng, &x);
        let z = dominated_by(&mut rng, &y);
        let sat = |a: &[f64], b: &[f64]| order_similarity(a, b).unwrap() == 0.0;
        if !(sat(&x, &y) && sat(&y, &z) && sat(&x, &z)) {
            broken_chains += 1;
        }
    }
    ensure(
        violations == 0 && broken_chains == 0,
        format!(
            "1000 pairs ({dominated_pairs} dominated): {violations} violations; 1000 chains: {broken_chains} broken"
        ),
    )
}

// 4 ──────────────────────────────────────────────────────────────────────

fn planted_topic_rows(c: &SynthCorpus, k: usize) -> Vec<Tensor> {
    c.image_topics
        .iter()
        .map(|ts| {
            let w = 1.0 / ts.len() as f64;
            Tensor::vector((0..k).map(|t| if ts.contains(&t) { w } else { 0.0 }).collect()).unwrap()
        })
        .collect()
}

fn criterion_4() -> Outcome {
    let c = synth_corpus(&SynthSpec::default()).unwrap();
    let vocab = build_vocab(&c.manifest, 1).unwrap();
    let topics = planted_topic_rows(&c, 3);
    let samples = OrderSample::build_all(&c.features, &c.captions(), &topics, &vocab, DEFAULT_MAX_LEN).unwrap();
    let cfg = OrderNetConfig {
        d_emb: 16,
        d_gru: 16,
        d_word: 16,
        lr: 0.01,
        batch_size: 16,
        epochs: 300,
        seed: 1,
        ..OrderNetConfig::default()
    };
    let (net, _) = train_ordernet(&samples, vocab.len(), &cfg).unwrap();
    let ks = [1, 5, 10];
    let r = caption_recall(&net, &samples, &ks).unwrap();
    let monotone = r.windows(2).all(|w| w[0] <= w[1]);
    ensure(
        r[0] >= 0.9 && monotone,
        format!(
            "50 images: R@1 {:.3}, R@5 {:.3}, R@10 {:.3} (need R@1 ≥ 0.9, monotone)",
            r[0], r[1], r[2]
        ),
    )
}

// 5 ──────────────────────────────────────────────────────────────────────

fn criterion_5() -> Outcome {
    let c = synth_corpus(&SynthSpec::default()).unwrap();
    let docs: Vec<String> = c.captions().iter().map(|caps| caps.join(" ")).collect();
    let cfg = LdaConfig {
        n_topics: 3,
        iters: 100,
        alpha: Some(0.1),
        seed: 11,
        ..LdaConfig::default()
    };
    let m = lda_train(&docs, &cfg).unwrap();
    // greedy matching: learned topic t → first free planted pool holding its top-5 words
    let mut free: Vec<usize> = (0..3).collect();
    let mut pool_of = [usize::MAX; 3];
    for (t, slot) in pool_of.iter_mut().enumerate() {
        let top: Vec<&str> = m.top_words(t, 5).iter().map(|&w| m.words[w].as_str()).collect();
        let hit = free
            .iter()
            .position(|&p| top.iter().all(|w| c.pools[p].iter().any(|x| x == w)));
        match hit {
            Some(i) => *slot = free.remove(i),
            None => return Err(format!("topic {t} top-5 {top:?} lies in no unmatched pool")),
        }
    }
    let pred: Vec<Vec<u8>> = (0..docs.len())
        .map(|d| {
            let labels = threshold_topics(m.doc_topic.row(d));
            let mut planted_order = vec![0u8; 3];
            for (t, &on) in labels.iter().enumerate() {
                planted_order[pool_of[t]] = on;
            }
            planted_order
        })
        .collect();
    let gold: Vec<Vec<u8>> = c
        .image_topics
        .iter()
        .map(|ts| (0..3).map(|k| u8::from(ts.contains(&k))).collect())
        .collect();
    let f1 = eval_prf(&pred, &gold, 1.0).unwrap().f_beta;
    ensure(
        f1 >= 0.9,
        format!("all 3 topics matched to pools; thresholded F1 {f1:.3} (≥ 0.9)"),
    )
}

// 6, 3, 9 share one toy training run ─────────────────────────────────────

struct ToyRun {
    log: Vec<EpochLog>,
    /// (epoch, BLEU-1..4) at each checkpoint epoch.
    bleu: Vec<(usize, [f64; 4])>,
    alpha_sum_err: f64,
    alpha_min: f64,
    hull_excess: f64,
    steps_seen: usize,
    elapsed: Duration,
}

const TOY_EPOCHS: usize = 200;

fn toy_run() -> ToyRun {
    let start = Instant::now();
    let d_h = 32;
    let c = synth_corpus(&SynthSpec {
        n_images: 20,
        captions_per_image: 1,
        d_loc: d_h,
        ..SynthSpec::default()
    })
    .unwrap();
    let vocab: Vocabulary = build_vocab(&c.manifest, 1).unwrap();
    let topics = planted_topic_rows(&c, 3);
    let samples = OrderSample::build_all(&c.features, &c.captions(), &topics, &vocab, DEFAULT_MAX_LEN).unwrap();
    let ocfg = OrderNetConfig {
        d_emb: 16,
        d_gru: 16,
        d_word: 16,
        lr: 0.01,
        batch_size: 16,
        epochs: 100,
        seed: 1,
        ..OrderNetConfig::default()
    };
    let (net, _) = train_ordernet(&samples, vocab.len(), &ocfg).unwrap();
    let fcs: Vec<&Tensor> = samples.iter().map(|s| &s.fc).collect();
    let tps: Vec<&Tensor> = topics.iter().collect();
    let (oi, ot) = (net.embed_images(&fcs).unwrap(), net.embed_topics(&tps).unwrap());
    let data: Vec<DecoderSample> = (0..samples.len())
        .map(|i| DecoderSample {
            features: c.features[i].clone(),
            guide: GuideInput {
                image: Tensor::vector(oi[i].clone()).unwrap(),
                topic: Tensor::vector(ot[i].clone()).unwrap(),
            },
            captions: samples[i].captions.clone(),
        })
        .collect();
    let refs: Vec<Vec<String>> = c
        .captions()
        .iter()
        .map(|cs| cs.iter().map(|s| s.to_string()).collect())
        .collect();
    let cfg = DecoderConfig {
        mode: DecoderMode::TOeAtt,
        d_h,
        d_word: 16,
        d_down: 8,
        d_att: 16,
        mlp: 64,
        lr: 0.01,
        batch_size: 20,
        epochs: TOY_EPOCHS,
        seed: 3,
        ..DecoderConfig::default()
    };
    let mut trainer = DecoderTrainer::new(&data, vocab.len(), &cfg).unwrap();
    let (mut sum_err, mut min_alpha, mut hull_excess, mut steps) = (0.0f64, f64::INFINITY, 0.0f64, 0usize);
    let mut bleu_at = Vec::new();
    for epoch in 1..=TOY_EPOCHS {
        trainer
            .run_epoch_observed(&data, &mut |obs| {
                let (b, n) = obs.alpha.dims2();
                let width = obs.rho_s.dims2().1;
                for r in 0..b {
                    let a = obs.alpha.row(r);
                    sum_err = sum_err.max((a.iter().sum::<f64>() - 1.0).abs());
                    min_alpha = a.iter().copied().fold(min_alpha, f64::min);
                    let rho = obs.rho_s.row(r);
                    for j in 0..width {
                        let col = (0..n).map(|i| obs.grid.row(r * n + i)[j]);
                        let (lo, hi) =
                            col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
                        hull_excess = hull_excess.max(lo - rho[j]).max(rho[j] - hi);
                    }
                }
                steps += 1;
            })
            .unwrap();
        if epoch % 25 == 0 {
            let ims: Vec<_> = data.iter().map(|s| &s.features).collect();
            let gds: Vec<_> = data.iter().map(|s| &s.guide).collect();
            let caps: Vec<String> = trainer
                .decoder
                .generate_all(&ims, &gds, &GenerateOptions::default())
                .unwrap()
                .into_iter()
                .map(|(s, _)| vocab.decode(s.ids()))
                .collect();
            bleu_at.push((epoch, bleu(&caps, &refs).unwrap()));
        }
    }
    ToyRun {
        log: trainer.log.clone(),
        bleu: bleu_at,
        alpha_sum_err: sum_err,
        alpha_min: min_alpha,
        hull_excess,
        steps_seen: steps,
        elapsed: start.elapsed(),
    }
}

fn criterion_3(run: &ToyRun) -> Outcome {
    ensure(
        run.steps_seen > 0 && run.alpha_sum_err <= 1e-9 && run.alpha_min >= 0.0 && run.hull_excess <= 1e-12,
        format!(
            "{} recorded steps over {TOY_EPOCHS} epochs; max |Σα−1| {:.1e}, min α {:.3e}, hull excess {:.1e}",
            run.steps_seen, run.alpha_sum_err, run.alpha_min, run.hull_excess
        ),
    )
}

fn criterion_6(run: &ToyRun) -> Outcome {
    let first = run.bleu.iter().find(|(_, b)| b[0] >= 0.95 && b[3] >= 0.8);
    let (last_epoch, last) = *run.bleu.last().expect("at least one checkpoint");
    let detail = format!(
        "20 pairs, d_h 32: BLEU-1 {:.3}, BLEU-4 {:.3} at epoch {last_epoch}; first met at {}; {:.1}s",
        last[0],
        last[3],
        first.map_or("never".to_string(), |(e, _)| format!("epoch {e}")),
        run.elapsed.as_secs_f64()
    );
    ensure(first.is_some() && run.elapsed < Duration::from_secs(600), detail)
}

fn criterion_9(run: &ToyRun) -> Outcome {
    if run.log.len() != TOY_EPOCHS {
        return Err(format!("{} epoch logs for {TOY_EPOCHS} epochs", run.log.len()));
    }
    let inside = run
        .log
        .iter()
        .all(|e| e.lambda_eff > 0.0 && e.lambda_eff < 1.0 && e.mu_eff > 0.0 && e.mu_eff < 1.0);
    let last = run.log.last().expect("non-empty");
    let (dl, dm) = ((last.lambda_eff - 0.5).abs(), (last.mu_eff - 0.5).abs());
    ensure(
        inside && dl > 1e-3 && dm > 1e-3,
        format!(
            "{} epochs logged, all in (0,1): {inside}; final λ_eff {:.4} (Δ {dl:.4}), μ_eff {:.4} (Δ {dm:.4})",
            run.log.len(),
            last.lambda_eff,
            last.mu_eff
        ),
    )
}

// 7 ──────────────────────────────────────────────────────────────────────

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_images: 100,
        ..SynthSpec::default()
    };
    synth_corpus(&spec)
        .unwrap()
        .write_to(&dir.path().join("corpus"))
        .unwrap();
    let cfg = PipelineConfig {
        corpus: dir.path().join("corpus/manifest.json"),
        work_dir: dir.path().join("runs"),
        seed: 0,
        ..PipelineConfig::profile(Profile::Desk)
    };
    let report = ablation(&cfg, &DecoderMode::ALL, &mut |_| {}).unwrap();
    let b1 = |m: DecoderMode| report.rows.iter().find(|r| r.mode == m).expect("row per mode").bleu1;
    let (topic, toe, att) = (b1(DecoderMode::Topic), b1(DecoderMode::TOe), b1(DecoderMode::TOeAtt));
    ensure(
        att >= toe && toe >= topic,
        format!("test-split BLEU-1: t-oe-att {att:.4}, t-oe {toe:.4}, topic {topic:.4} (need t-oe-att ≥ t-oe ≥ topic)"),
    )
}

// 8 ──────────────────────────────────────────────────────────────────────

fn criterion_8() -> Outcome {
    let oracle: serde_json::Value =
        serde_json::from_str(include_str!("oracles/metrics_5img.json")).expect("oracle parses");
    let images = oracle["images"].as_array().expect("images");
    let cands: Vec<&str> = images.iter().map(|i| i["candidate"].as_str().unwrap()).collect();
    let refs: Vec<Vec<&str>> = images
        .iter()
        .map(|i| {
            i["references"]
                .as_array()
                .unwrap()
                .iter()
                .map(|r| r.as_str().unwrap())
                .collect()
        })
        .collect();
    let report = evaluate(&cands, &refs).unwrap();
    let f = |v: &serde_json::Value| v.as_f64().unwrap();
    let mut worst = 0.0f64;
    let mut check = |got: f64, want: f64| worst = worst.max((got - want).abs());
    for n in 0..4 {
        check(report.bleu[n], f(&oracle["bleu"][n]));
    }
    check(report.rouge_l, f(&oracle["rouge_l"]));
    check(report.cider, f(&oracle["cider"]));
    for (got, want) in report
        .per_image
        .as_ref()
        .unwrap()
        .iter()
        .zip(oracle["per_image"].as_array().unwrap())
    {
        for n in 0..4 {
            check(got.bleu[n], f(&want["bleu"][n]));
        }
        check(got.rouge_l, f(&want["rouge_l"]));
        check(got.cider, f(&want["cider"]));
    }
    ensure(
        worst <= 1e-4,
        format!("5 images, corpus and per-image: max |Δ| {worst:.2e} (≤ 1e-4)"),
    )
}

// ────────────────────────────────────────────────────────────────────────

fn attempt(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

fn main() {
    let toy = catch_unwind(toy_run).map_err(|_| "toy training run panicked".to_string());
    let shared = |f: fn(&ToyRun) -> Outcome| match &toy {
        Ok(run) => f(run),
        Err(e) => Err(e.clone()),
    };
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome>, Duration)> = vec![
        ("gradient correctness", Box::new(criterion_1), Duration::from_secs(60)),
        ("order algebra", Box::new(criterion_2), Duration::from_secs(10)),
        (
            "attention normalization",
            Box::new(move || shared(criterion_3)),
            Duration::from_secs(300),
        ),
        ("retrieval sanity", Box::new(criterion_4), Duration::from_secs(300)),
        (
            "planted-topic recovery",
            Box::new(criterion_5),
            Duration::from_secs(120),
        ),
        (
            "overfit decoding",
            Box::new(move || shared(criterion_6)),
            Duration::from_secs(600),
        ),
        ("ablation direction", Box::new(criterion_7), Duration::from_secs(1200)),
        (
            "metric oracle equivalence",
            Box::new(criterion_8),
            Duration::from_secs(10),
        ),
        (
            "lambda/mu logging",
            Box::new(move || shared(criterion_9)),
            Duration::from_secs(600),
        ),
    ];
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let mut outcome = attempt(run);
        let took = t.elapsed();
        if let Ok(detail) = &outcome {
            if took > budget {
                outcome = Err(format!(
                    "{detail}; took {:.1}s, budget {}s",
                    took.as_secs_f64(),
                    budget.as_secs()
                ));
            }
        }
        let (verdict, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "criterion {} [{name}]: {verdict} - {detail} ({:.1}s)",
            i + 1,
            took.as_secs_f64()
        );
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
