//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Exits zero after reporting unless `DVQ_ACCEPTANCE_STRICT=1`, in which case
//! any failure makes the process exit nonzero.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::{grad_suite, plain_vq, rows_of, scan_nearest};
use dvq::baselines::{
    gumbel_max_sample, gumbel_max_with_noise, gumbel_noise_like, gumbel_softmax_with_noise, saturating_sigmoid,
    semhash_encode, GumbelConfig, SemHashState,
};
use dvq::checkpoint::Checkpoint;
use dvq::commands::{self, ClassifyReport, SynthArgs};
use dvq::config::RunConfig;
use dvq::entropy::{sub_encoder_entropy, EntropyReport};
use dvq::model::{Batch, Mode};
use dvq::quantizer::{
    ema_update, init_codebook, nearest_index, quantize, straight_through_backward, CodebookShape, DecomposedCodebook,
    Metric, VqLossConfig,
};
use dvq::{RngState, Tensor};

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient_fidelity() -> Check {
    let start = Instant::now();
    let mut failed = Vec::new();
    for (name, check) in grad_suite::ALL {
        if catch_unwind(check).is_err() {
            failed.push(*name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(failed.is_empty(), || format!("failing checks: {failed:?}"))?;
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{} suites x 20 instances in {secs:.1}s", grad_suite::ALL.len()))
}

fn quantizer_oracle() -> Check {
    let mut rng = RngState::new(1);
    let mut ties = 0;
    for metric in [Metric::L1, Metric::L2] {
        for trial in 0..1000 {
            let rows = 1 + rng.below(16);
            let cols = 1 + rng.below(6);
            let gen = |rng: &mut RngState, r: usize| -> Tensor<f64> {
                if trial % 2 == 0 {
                    Tensor::normal(&[r, cols], 1.0, rng)
                } else {
                    Tensor::from_fn(&[r, cols], |_| rng.below(3) as f64 - 1.0)
                }
            };
            let book = gen(&mut rng, rows);
            let query = gen(&mut rng, 1);
            let book_rows = rows_of(&book);
            let want = scan_nearest(query.row(0), &book_rows, metric);
            let got = nearest_index(query.row(0), &book, metric).map_err(|e| e.to_string())?.0;
            ensure(got == want, || format!("{metric:?} trial {trial}: {got} != {want}"))?;
            let best = dvq::quantizer::distance(query.row(0), &book_rows[want], metric);
            let equal = book_rows
                .iter()
                .filter(|r| dvq::quantizer::distance(query.row(0), r, metric) == best)
                .count();
            ties += usize::from(equal > 1);
        }
    }
    ensure(ties > 0, || "no tie cases generated".into())?;

    let cb: DecomposedCodebook<f64> = init_codebook(64, 2, 6, &mut rng).map_err(|e| e.to_string())?;
    let q =
        quantize(&Tensor::normal(&[50, 6], 1.0, &mut rng), &cb, &VqLossConfig::default()).map_err(|e| e.to_string())?;
    for p in 0..q.positions() {
        for i in 0..2 {
            let post = q.posterior(p, i);
            let ones = post.iter().filter(|&&v| v == 1.0).count();
            let zeros = post.iter().filter(|&&v| v == 0.0).count();
            ensure(ones == 1 && zeros == post.len() - 1, || format!("posterior {post:?}"))?;
        }
    }

    for metric in [Metric::L1, Metric::L2] {
        for _ in 0..50 {
            let table = Tensor::<f64>::normal(&[32, 5], 1.0, &mut rng);
            let z = Tensor::<f64>::normal(&[25, 5], 1.0, &mut rng);
            let cb = DecomposedCodebook::from_tables(32, vec![table.clone()]).map_err(|e| e.to_string())?;
            let q = quantize(
                &z,
                &cb,
                &VqLossConfig {
                    metric,
                    ..Default::default()
                },
            )
            .map_err(|e| e.to_string())?;
            let want = plain_vq(&rows_of(&z), &rows_of(&table), metric);
            let flat: Vec<u64> = want.z_q.concat().iter().map(|v| v.to_bits()).collect();
            let got: Vec<u64> = q.z_q.data().iter().map(|v| v.to_bits()).collect();
            ensure(
                q.indices == want.indices && flat == got && q.vq_loss.to_bits() == want.loss.to_bits(),
                || format!("{metric:?}: n=1 output differs from plain VQ"),
            )?;
        }
    }
    Ok(format!(
        "2000 scans exact ({ties} with ties); one-hot posterior; n=1 bit-identical"
    ))
}

fn codebook_sizing() -> Check {
    let s = CodebookShape::new(512, 3, 24).map_err(|e| e.to_string())?;
    ensure(s.sub_size == 8 && s.composite_size() == 512, || format!("{s:?}"))?;
    let mut checked = 0;
    for k in 0..=1100usize {
        for n in 0..=10usize {
            for d in [0usize, 1, 6, 8, 12, 24] {
                let valid = k >= 2
                    && k.is_power_of_two()
                    && n >= 1
                    && (k.trailing_zeros() as usize).is_multiple_of(n)
                    && d > 0
                    && d % n == 0;
                let got = CodebookShape::new(k, n, d);
                ensure(got.is_ok() == valid, || {
                    format!("({k}, {n}, {d}) accepted={}", got.is_ok())
                })?;
                if let Ok(s) = got {
                    ensure(s.composite_size() == k as u128, || format!("({k}, {n}) composite size"))?;
                }
                checked += 1;
            }
        }
    }
    Ok(format!(
        "K'=8, K'^n=512; {checked} (K, n, D) combinations classified correctly"
    ))
}

fn batch_means(z: &Tensor<f64>, idx: &[usize], n: usize, sub: usize, d: usize, i: usize) -> Vec<Option<Vec<f64>>> {
    let mut sums = vec![vec![0.0; d]; sub];
    let mut counts = vec![0usize; sub];
    for p in 0..z.rows() {
        let j = idx[p * n + i];
        counts[j] += 1;
        for (s, v) in sums[j].iter_mut().zip(&z.row(p)[i * d..(i + 1) * d]) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect()
}

fn ema_fixed_point() -> Check {
    let mut rng = RngState::new(21);
    let mut cb: DecomposedCodebook<f64> = init_codebook(16, 2, 8, &mut rng)
        .map_err(|e| e.to_string())?
        .with_ema(0.99, 1e-5);
    let z = Tensor::normal(&[40, 8], 1.0, &mut rng);
    let cfg = VqLossConfig::default();
    for _ in 0..1000 {
        let q = quantize(&z, &cb, &cfg).map_err(|e| e.to_string())?;
        ema_update(&mut cb, &z, &q.indices).map_err(|e| e.to_string())?;
    }
    let q = quantize(&z, &cb, &cfg).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for i in 0..2 {
        for (j, mean) in batch_means(&z, &q.indices, 2, 4, 4, i).into_iter().enumerate() {
            if let Some(m) = mean {
                for (a, b) in cb.sub[i].value.row(j).iter().zip(&m) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    ensure(worst < 1e-4, || format!("L∞ distance to batch means {worst:e}"))?;

    let mut cb: DecomposedCodebook<f64> = init_codebook(64, 2, 6, &mut rng)
        .map_err(|e| e.to_string())?
        .with_ema(0.0, 0.0);
    let z = Tensor::normal(&[50, 6], 1.0, &mut rng);
    let q = quantize(&z, &cb, &cfg).map_err(|e| e.to_string())?;
    ema_update(&mut cb, &z, &q.indices).map_err(|e| e.to_string())?;
    let mut one_step: f64 = 0.0;
    for i in 0..2 {
        for (j, mean) in batch_means(&z, &q.indices, 2, 8, 3, i).into_iter().enumerate() {
            if let Some(m) = mean {
                for (a, b) in cb.sub[i].value.row(j).iter().zip(&m) {
                    one_step = one_step.max((a - b).abs());
                }
            }
        }
    }
    ensure(one_step <= 1e-15, || format!("decay 0 off by {one_step:e}"))?;
    Ok(format!(
        "1000 steps at 0.99: L∞ {worst:.2e}; decay 0: L∞ {one_step:.1e}"
    ))
}

fn adaptive_straight_through() -> Check {
    let mut rng = RngState::new(9);
    let g = Tensor::<f64>::normal(&[7, 5], 1.0, &mut rng);
    ensure(straight_through_backward(&g, 3.7, 0.0) == g, || {
        "alpha=0 is not identity".into()
    })?;
    ensure(straight_through_backward(&g, 0.0, 2.5) == g, || {
        "vq_loss=0 is not identity".into()
    })?;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (alpha, vq) = (rng.uniform() * 5.0, rng.uniform() * 10.0);
        let g = Tensor::<f64>::normal(&[3, 4], 1.0, &mut rng);
        for (o, v) in straight_through_backward(&g, vq, alpha).data().iter().zip(g.data()) {
            let want = (1.0 + alpha * vq) * v;
            worst = worst.max((o - want).abs() / want.abs().max(1e-300));
        }
    }
    ensure(worst <= 1e-7, || format!("scaling relative error {worst:e}"))?;
    Ok(format!("identity cases exact; 1000 random scalings within {worst:.1e}"))
}

fn entropy_gate() -> Check {
    let err = |e: dvq::Error| e.to_string();
    for k in [2usize, 4, 8, 16, 256] {
        let uniform = sub_encoder_entropy(&vec![3; k]).map_err(err)?;
        ensure(uniform == (k as f64).log2(), || format!("uniform K'={k}: {uniform}"))?;
        let mut one = vec![0; k];
        one[k - 1] = 5;
        ensure(sub_encoder_entropy(&one).map_err(err)? == 0.0, || {
            format!("degenerate K'={k}")
        })?;
    }
    let exact: [(&[u64], f64); 4] = [
        (&[1, 1], 1.0),
        (&[1, 1, 2], 1.5),
        (&[1, 1, 1, 1, 4], 2.0),
        (&[2, 1, 1, 0], 1.5),
    ];
    for (c, want) in exact {
        let h = sub_encoder_entropy(c).map_err(err)?;
        ensure((h - want).abs() < 1e-9, || format!("{c:?}: {h}"))?;
    }
    let gates: [(&[f64], &[bool]); 12] = [
        (&[1.0], &[false]),
        (&[1.0, 2.0], &[false, true]),
        (&[2.0, 1.0], &[true, false]),
        (&[1.0, 1.0], &[false, false]),
        (&[3.0, 1.0, 2.0], &[true, false, false]),
        (&[0.0, 0.0, 5.0], &[false, false, true]),
        (&[1.0, 2.0, 3.0, 4.0], &[false, false, true, true]),
        (&[4.0, 4.0, 4.0, 1.0], &[false, false, false, false]),
        (&[0.5, 3.0, 3.0, 0.5], &[false, true, true, false]),
        (&[2.0, 2.0, 1.0, 3.0, 5.0], &[false, false, false, true, true]),
        (
            &[7.0, 6.0, 5.0, 4.0, 3.0, 2.0],
            &[true, true, true, false, false, false],
        ),
        (
            &[1.0, 8.0, 8.0, 8.0, 8.0, 1.0],
            &[false, false, false, false, false, false],
        ),
    ];
    for (e, want) in gates {
        let r = EntropyReport::from_entropies(e.to_vec()).map_err(err)?;
        ensure(r.gated == want, || format!("{e:?}: gated {:?}", r.gated))?;
    }
    Ok("bounds attained; 4 exact values; 12 gated sets match".into())
}

fn baselines() -> Check {
    let err = |e: dvq::Error| e.to_string();
    let mut rng = RngState::new(2024);
    let logits = [0.0, 1.0, 2.0, -1.0];
    let draws = 100_000;
    let batch = Tensor::<f64>::from_fn(&[draws, 4], |i| logits[i % 4]);
    let hot = gumbel_max_sample(&batch, &mut rng).map_err(err)?;
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    let mut worst: f64 = 0.0;
    for (c, l) in logits.iter().enumerate() {
        let freq = (0..draws).map(|r| hot.row(r)[c]).sum::<f64>() / draws as f64;
        worst = worst.max((freq - l.exp() / z).abs());
    }
    ensure(worst <= 0.01, || format!("Gumbel-Max frequency error {worst}"))?;

    let mut compared = 0;
    for _ in 0..200 {
        let logits = Tensor::<f64>::normal(&[4, 6], 1.0, &mut rng);
        let noise = gumbel_noise_like(&[4, 6], &mut rng);
        let hard = gumbel_max_with_noise(&logits, &noise).map_err(err)?;
        for tau in [1.0, 0.01] {
            let s =
                gumbel_softmax_with_noise(&logits, &noise, &GumbelConfig { tau, k: 6, hard: false }).map_err(err)?;
            for r in 0..4 {
                let sum: f64 = s.output.row(r).iter().sum();
                ensure((sum - 1.0).abs() < 1e-12, || format!("softmax row sums to {sum}"))?;
                if tau == 0.01 {
                    let mut p: Vec<f64> = logits.row(r).iter().zip(noise.row(r)).map(|(a, b)| a + b).collect();
                    p.sort_by(|a, b| b.total_cmp(a));
                    if p[0] - p[1] >= 0.2 {
                        compared += 1;
                        let d = s
                            .output
                            .row(r)
                            .iter()
                            .zip(hard.row(r))
                            .map(|(a, b)| (a - b).abs())
                            .fold(0.0, f64::max);
                        ensure(d < 1e-6, || format!("tau 0.01 differs from hard sample by {d}"))?;
                    }
                }
            }
        }
    }

    let x = Tensor::<f64>::from_f64(&[1, 4], &[-40.0, -2.4, 2.4, 40.0]).map_err(err)?;
    ensure(saturating_sigmoid(&x).data() == [0.0, 0.0, 1.0, 1.0], || {
        "saturation not exact".into()
    })?;

    let state: SemHashState<f64> = SemHashState::new(8, 4, &mut rng);
    for training in [true, false] {
        for _ in 0..100 {
            let z = Tensor::<f64>::normal(&[5, 8], 3.0, &mut rng);
            let code = semhash_encode(&z, &mut rng, training, &state).map_err(err)?;
            ensure(code.g.data().iter().all(|&v| v == 0.0 || v == 1.0), || {
                "non-binary semhash code".into()
            })?;
        }
    }
    Ok(format!(
        "Gumbel-Max max error {worst:.4}; {compared} low-temperature rows match; saturation exact; codes binary"
    ))
}

struct Runs {
    dir: tempfile::TempDir,
    data: PathBuf,
}

impl Runs {
    fn new() -> dvq::Result<Self> {
        let dir = tempfile::tempdir()?;
        let data = dir.path().join("synth.jsonl");
        commands::synth(
            SynthArgs {
                num_classes: 4,
                vocab_size: 32,
                seq_len: 16,
                per_class: 500,
                seed: 7,
            },
            &data,
        )?;
        Ok(Self { dir, data })
    }

    fn config(&self, n: usize, seed: u64) -> RunConfig {
        RunConfig {
            data: Some(self.data.clone()),
            checkpoint: Some(self.dir.path().join(format!("n{n}-s{seed}.dvq"))),
            n_sub_encoders: n,
            seed,
            ..RunConfig::default()
        }
    }
}

fn classify_at(cfg: &RunConfig, fraction: f64) -> dvq::Result<ClassifyReport> {
    commands::classify(&RunConfig {
        labeled_fraction: fraction,
        ..cfg.clone()
    })
}

fn end_to_end(runs: &Runs) -> Check {
    let err = |e: dvq::Error| e.to_string();
    let start = Instant::now();
    let cfg = runs.config(2, 0);
    commands::pretrain(&cfg).map_err(err)?;
    let held_out = commands::eval(&cfg)
        .map_err(err)?
        .reconstruction
        .reconstruction_accuracy;
    let full = classify_at(&cfg, 1.0).map_err(err)?.test.accuracy;
    let few = classify_at(&cfg, 0.05).map_err(err)?.test.accuracy;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "held-out reconstruction {held_out:.4}, accuracy {full:.4} at 100% labels, {few:.4} at 5% labels, {secs:.0}s"
    );
    ensure(held_out >= 0.90, || detail.clone())?;
    ensure(full >= 0.95, || detail.clone())?;
    ensure(few >= 0.25 + 0.40, || detail.clone())?;
    ensure(secs < 600.0, || detail.clone())?;
    Ok(detail)
}

fn summed_perplexity(cfg: &RunConfig, data: &Path) -> dvq::Result<f64> {
    let ck = Checkpoint::load(cfg.checkpoint.as_deref().expect("checkpoint path"))?;
    let model = ck.to_model()?;
    let records = dvq::data::read_records(data)?;
    let all = dvq::data::Dataset::from_records(&records, &ck.vocab, &ck.labels, model.config.encoder.max_len)?;
    Ok(commands::diagnose_model(&model, &all.sequences)?
        .losses
        .summed_perplexity)
}

fn index_collapse(runs: &Runs) -> Check {
    let err = |e: dvq::Error| e.to_string();
    let mut lines = Vec::new();
    let mut wins = 0;
    for seed in 0..3 {
        let two = runs.config(2, seed);
        if seed > 0 {
            commands::pretrain(&two).map_err(err)?;
        }
        let one = runs.config(1, seed);
        commands::pretrain(&one).map_err(err)?;
        let p2 = summed_perplexity(&two, &runs.data).map_err(err)?;
        let p1 = summed_perplexity(&one, &runs.data).map_err(err)?;
        wins += usize::from(p2 >= p1);
        lines.push(format!("seed {seed}: n=2 {p2:.2} vs n=1 {p1:.2}"));
    }
    let detail = format!("{} ({wins}/3 seeds favour n=2)", lines.join("; "));
    ensure(wins == 3, || detail.clone())?;
    Ok(detail)
}

fn protocol(runs: &Runs) -> Check {
    let err = |e: dvq::Error| e.to_string();
    let fractions = [0.05, 0.2, 0.5, 1.0];
    let mut acc = vec![Vec::new(); fractions.len()];
    for seed in 0..3 {
        let cfg = runs.config(2, seed);
        for (i, &f) in fractions.iter().enumerate() {
            let r = classify_at(&cfg, f).map_err(err)?;
            for m in [&r.train, &r.test] {
                ensure(m.f1 == m.accuracy, || {
                    format!("seed {seed} fraction {f}: F1 {} vs accuracy {}", m.f1, m.accuracy)
                })?;
            }
            acc[i].push(r.test.accuracy);
        }
    }
    let medians: Vec<f64> = acc
        .iter_mut()
        .map(|a| {
            a.sort_by(|x, y| x.total_cmp(y));
            a[1]
        })
        .collect();
    let shown: Vec<String> = medians.iter().map(|m| format!("{m:.4}")).collect();
    ensure(medians.windows(2).all(|w| w[1] >= w[0]), || {
        format!("medians {shown:?}")
    })?;

    let cfg = runs.config(2, 0);
    let path = cfg.checkpoint.clone().expect("checkpoint path");
    let ck = Checkpoint::load(&path).map_err(err)?;
    let model = ck.to_model().map_err(err)?;
    let copy = runs.dir.path().join("copy.dvq");
    Checkpoint::from_model(&model, ck.vocab.clone(), ck.labels.clone(), ck.run.clone())
        .save(&copy)
        .map_err(err)?;
    let reloaded = Checkpoint::load(&copy).map_err(err)?.to_model().map_err(err)?;
    let probe = Batch::from_sequences(
        &[
            &[2, 3, 4, 5][..],
            &[9, 1, 30, 31, 7, 7, 2, 8, 10, 11, 12, 13, 14, 15, 16, 17],
        ],
        16,
        None,
    )
    .map_err(err)?;
    let a = model.forward(&probe, &mut Mode::Eval).map_err(err)?.logits;
    let b = reloaded.forward(&probe, &mut Mode::Eval).map_err(err)?.logits;
    let ca = model.classify(&probe).map_err(err)?;
    let cb = reloaded.classify(&probe).map_err(err)?;
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(&a) == bits(&b) && bits(&ca) == bits(&cb), || {
        "probe logits changed across round trip".into()
    })?;
    Ok(format!(
        "median accuracy at 5/20/50/100%: {}; micro-F1 == accuracy on 24 evaluations; probe logits bit-identical",
        shown.join(" ")
    ))
}

fn report(n: usize, name: &str, check: impl FnOnce() -> Check) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n}: {tag} - {name}: {detail}");
    outcome.is_ok()
}

fn main() {
    let runs = Runs::new();
    let runs = &runs;
    let e2e = |f: fn(&Runs) -> Check| {
        move || match runs {
            Ok(r) => f(r),
            Err(e) => Err(format!("corpus setup failed: {e}")),
        }
    };
    let results = [
        report(1, "gradient fidelity", gradient_fidelity),
        report(2, "quantizer oracle", quantizer_oracle),
        report(3, "sub-codebook sizing", codebook_sizing),
        report(4, "EMA fixed point", ema_fixed_point),
        report(5, "adaptive straight-through", adaptive_straight_through),
        report(6, "entropy gate", entropy_gate),
        report(7, "baselines", baselines),
        report(8, "end-to-end learning", e2e(end_to_end)),
        report(9, "index-collapse diagnostic", e2e(index_collapse)),
        report(10, "protocol plumbing", e2e(protocol)),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed < results.len() && std::env::var("DVQ_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
