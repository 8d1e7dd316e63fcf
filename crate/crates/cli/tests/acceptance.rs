//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Run with `cargo test -p sdrformer-cli --test acceptance`. Add `-- 7` (or any
//! list of criterion numbers) to run a subset.

use std::collections::{HashMap, VecDeque};
use std::time::{Duration, Instant};

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdrformer::autograd::ParamId;
use sdrformer::data::{synthetic_task, Batch, TaskKind};
use sdrformer::homeostasis::{boost_factors, median, median_adjust, sample_tiled_mask, BoostReference};
use sdrformer::metrics::{bleu, bleu_stats, imi, MetricSeries};
use sdrformer::model::{ForwardCtx, ModelSize, Seq2Seq, TransformerConfig, MULTI30K_SRC_VOCAB, MULTI30K_TGT_VOCAB};
use sdrformer::sparsity::{kwta_gradient, kwta_mask, SparsityCoefficient};
use sdrformer::stats_cache::{HeadCounts, StatsCache};
use sdrformer::tensor::Tensor;
use sdrformer::train::{desk, Checkpoint, Trainer, Variant};
use sdrformer_cli::{Cli, Command};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s <= limit_s, format!("{s:.2}s of {limit_s}s"))
}

/// Full-sort oracle: indices ordered by (value desc, index asc), first k kept.
fn sort_oracle(x: &[f64], k: usize) -> Vec<u8> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).unwrap().then(a.cmp(&b)));
    let mut m = vec![0u8; x.len()];
    for &i in &idx[..k] {
        m[i] = 1;
    }
    m
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut count_ok, mut oracle_ok) = (0, 0);
    const TRIALS: usize = 1000;
    for t in 0..TRIALS {
        let n = rng.gen_range(4..=512);
        let s = rng.gen_range(1..=9) as f64 / 10.0;
        // Every third slice is quantised to force ties.
        let x: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(-1.0..1.0);
                if t % 3 == 0 {
                    (v * 4.0).round() / 4.0
                } else {
                    v
                }
            })
            .collect();
        let coef = SparsityCoefficient::new(s).unwrap();
        let mask = kwta_mask(&x, coef).unwrap();
        let k = ((s * n as f64).round() as usize).max(1);
        count_ok += usize::from(mask.count_ones() == k);
        oracle_ok += usize::from(mask.bits() == sort_oracle(&x, k).as_slice());
    }
    let (fast, time) = within(start.elapsed(), 5.0);
    outcome(
        count_ok == TRIALS && oracle_ok == TRIALS && fast,
        format!("count {count_ok}/{TRIALS}, sort oracle {oracle_ok}/{TRIALS}, {time}"),
    )
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Absolute floor for the relative-error denominator, so gradients that are
/// numerically zero do not divide by roundoff.
const GRAD_FLOOR: f64 = 1e-6;
const FD_H: f64 = 1e-4;

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    // kWTA layer: L(x) = Σ w ⊙ kwta(x).
    let mut kwta_max: f64 = 0.0;
    let mut slices = 0;
    while slices < 50 {
        let n = rng.gen_range(4..=64);
        let s = SparsityCoefficient::new(rng.gen_range(0.1..0.9)).unwrap();
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let k = s.winners(n);
        let mut sorted = x.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if k < n && sorted[k - 1] - sorted[k] < 10.0 * FD_H {
            continue;
        }
        slices += 1;
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |x: &[f64]| -> f64 {
            let m = kwta_mask(x, s).unwrap();
            x.iter().zip(m.bits()).zip(&w).map(|((v, &b), w)| v * b as f64 * w).sum()
        };
        let mask = kwta_mask(&x, s).unwrap();
        let up = Tensor::new(vec![n], w.clone()).unwrap();
        let grad = kwta_gradient(&up, &mask).unwrap();
        for i in 0..n {
            let mut xp = x.clone();
            xp[i] += FD_H;
            let mut xm = x.clone();
            xm[i] -= FD_H;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * FD_H);
            kwta_max = kwta_max.max(rel_err(fd, grad.data()[i], GRAD_FLOOR));
        }
    }

    // Micro-transformer with plain inserts.
    let mut cfg = TransformerConfig::new(8, 2, 16, 2, 11, 11);
    cfg.max_len = 6;
    let mut model = Seq2Seq::new(cfg, 3).unwrap();
    let corpus = synthetic_task(TaskKind::Reverse, 7, 2..=5, 3, 4).unwrap();
    let pairs: Vec<(&[u32], &[u32])> = corpus.pairs.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
    let batch = Batch::from_pairs(&pairs, vec![0, 1, 2], 6);
    let loss_of = |m: &mut Seq2Seq| -> f64 {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx { training: true, rng: &mut r };
        let (g, l) = m.loss(&batch, &mut ctx).unwrap();
        g.value(l).data()[0]
    };
    let grads = {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx { training: true, rng: &mut r };
        let (g, l) = model.loss(&batch, &mut ctx).unwrap();
        g.backward(l).unwrap()
    };
    let ids: Vec<ParamId> = model.params().iter().map(|(id, _)| id).collect();
    let (mut model_max, mut checked, mut worst) = (0.0f64, 0usize, String::new());
    for id in ids {
        for i in 0..model.params().get(id).len() {
            let orig = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = orig + FD_H;
            let up = loss_of(&mut model);
            model.params_mut().get_mut(id).data_mut()[i] = orig - FD_H;
            let down = loss_of(&mut model);
            model.params_mut().get_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * FD_H);
            let an = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let e = rel_err(fd, an, GRAD_FLOOR);
            if e > model_max {
                model_max = e;
                worst = format!("{}[{i}]", model.params().name(id));
            }
            checked += 1;
        }
    }
    let (fast, time) = within(start.elapsed(), 60.0);
    outcome(
        kwta_max < 1e-4 && model_max < 1e-4 && fast,
        format!(
            "kWTA max rel err {kwta_max:.2e} (50 slices); micro-transformer max rel err {model_max:.2e} over {checked} params (worst {worst}); floor {GRAD_FLOOR:e}, h {FD_H:e}, {time}"
        ),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    const SEQS: usize = 10_000;
    let mut ok = 0;
    for _ in 0..SEQS {
        let (h, q, f) = (rng.gen_range(1..=3), rng.gen_range(1..=8), rng.gen_range(1..=8));
        let mut cache = StatsCache::new(h, q, f).unwrap();
        let mut reference: VecDeque<Vec<u64>> = VecDeque::new();
        let mut all_equal = true;
        for _ in 0..rng.gen_range(0..=20) {
            let frame: Vec<u64> = (0..h * f).map(|_| rng.gen_range(0..50)).collect();
            cache.push(&HeadCounts::new(h, f, frame.clone()).unwrap()).unwrap();
            reference.push_back(frame);
            if reference.len() > q {
                reference.pop_front();
            }
            let mut want = vec![0u64; h * f];
            for fr in &reference {
                for (w, v) in want.iter_mut().zip(fr) {
                    *w += v;
                }
            }
            all_equal &= cache.aggregate().values() == want.as_slice() && cache.fill() == reference.len();
        }
        ok += usize::from(all_equal);
    }
    let (fast, time) = within(start.elapsed(), 10.0);
    outcome(ok == SEQS && fast, format!("{ok}/{SEQS} sequences match the list reference, {time}"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    const TRIALS: usize = 2000;
    let (mut max_err, mut k_ok, mut k_cases) = (0.0f64, 0, 0);
    for _ in 0..TRIALS {
        let h = rng.gen_range(1..=4);
        let f = rng.gen_range(2..=64);
        let s = rng.gen_range(0.05..0.95);
        let coef = SparsityCoefficient::new(s).unwrap();
        let values: Vec<u64> = (0..h * f).map(|_| rng.gen_range(0..1000)).collect();
        let stats = HeadCounts::new(h, f, values.clone()).unwrap();
        let got = boost_factors(&stats, coef, BoostReference::Numerator).unwrap();
        let k = ((s * f as f64).round() as usize).clamp(1, f);
        for head in 0..h {
            let t = &values[head * f..(head + 1) * f];
            let (mx, mn) = (*t.iter().max().unwrap() as f64, *t.iter().min().unwrap() as f64);
            let num: Vec<f64> = t.iter().map(|&x| mx - x as f64 + mn).collect();
            let mut sorted = num.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let v = sorted[k - 1];
            let g = got.head(head);
            if mx == mn || v == 0.0 {
                max_err = max_err.max(g.iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max));
                continue;
            }
            for (a, n) in g.iter().zip(&num) {
                max_err = max_err.max((a - n / v).abs());
            }
            let mut distinct = sorted.clone();
            distinct.dedup();
            if distinct.len() == f {
                k_cases += 1;
                k_ok += usize::from(g.iter().filter(|&&x| x >= 1.0).count() == k);
            }
        }
    }
    let mut degenerate_ok = true;
    for c in [0u64, 1, 7, 1000] {
        let stats = HeadCounts::new(2, 16, vec![c; 32]).unwrap();
        let b = boost_factors(&stats, SparsityCoefficient::new(0.5).unwrap(), BoostReference::Numerator).unwrap();
        degenerate_ok &= b.head(0).iter().chain(b.head(1)).all(|&x| x == 1.0);
    }
    outcome(
        max_err <= 1e-12 && k_ok == k_cases && k_cases > 0 && degenerate_ok,
        format!(
            "max |err| {max_err:.1e} over {TRIALS} draws; exactly-k {k_ok}/{k_cases} distinct-numerator heads; all-equal -> 1: {degenerate_ok}"
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    const DRAWS: usize = 100_000;
    const FEATURES: usize = 64;
    let probs: Vec<f64> = (0..FEATURES).map(|i| if i < 2 { i as f64 } else { rng.gen_range(0.0..1.0) }).collect();
    let mask = sample_tiled_mask(&[DRAWS, FEATURES], &probs, &mut rng);
    let mut kept = vec![0usize; FEATURES];
    for row in mask.bits().chunks(FEATURES) {
        for (k, &b) in kept.iter_mut().zip(row) {
            *k += b as usize;
        }
    }
    let within3 = kept
        .iter()
        .zip(&probs)
        .filter(|(&k, &p)| {
            let sd = (p * (1.0 - p) / DRAWS as f64).sqrt();
            (k as f64 / DRAWS as f64 - p).abs() <= 3.0 * sd
        })
        .count();
    let frac = within3 as f64 / FEATURES as f64;

    // median_adjust with the shift branch firing and no clamping.
    let (mut checked, mut max_dev) = (0, 0.0f64);
    while checked < 1000 {
        let n = rng.gen_range(1..=64);
        let s = rng.gen_range(0.05..0.95);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let shift = s - median(&p);
        let lo = p.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if shift.abs() <= 0.05 || lo + shift < 0.0 || hi + shift > 1.0 {
            continue;
        }
        checked += 1;
        max_dev = max_dev.max((median(&median_adjust(&p, s, 0.05)) - s).abs());
    }
    outcome(
        frac >= 0.99 && max_dev <= 4.0 * f64::EPSILON,
        format!(
            "{within3}/{FEATURES} features within 3 sd over {DRAWS} draws; median(P') - s max |dev| {max_dev:.1e} over {checked} shifts (tolerance 4 ulp)"
        ),
    )
}

/// Naive BLEU-4: explicit n-gram dictionaries per sentence.
fn naive_bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
    let (mut m, mut t) = ([0usize; 4], [0usize; 4]);
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let grams = |s: &[u32]| {
                let mut d: HashMap<Vec<u32>, usize> = HashMap::new();
                if s.len() >= n {
                    for w in s.windows(n) {
                        *d.entry(w.to_vec()).or_default() += 1;
                    }
                }
                d
            };
            let (hd, rd) = (grams(h), grams(rf));
            for (g, cnt) in &hd {
                m[n - 1] += (*cnt).min(*rd.get(g).unwrap_or(&0));
                t[n - 1] += cnt;
            }
        }
    }
    if (0..4).any(|i| m[i] == 0 || t[i] == 0) {
        return 0.0;
    }
    let logp: f64 = (0..4).map(|i| (m[i] as f64 / t[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * logp.exp()
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut notes = Vec::new();
    let corpus: Vec<Vec<u32>> = (0..20)
        .map(|_| (0..rng.gen_range(4..15)).map(|_| rng.gen_range(0..30)).collect())
        .collect();
    let self_bleu = bleu(&corpus, &corpus).unwrap();
    let ok_self = self_bleu == 1.0;
    notes.push(format!("BLEU(x,x) = {self_bleu}"));

    let words = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();
    let st = bleu_stats(&[words("the the the the the the the")], &[words("the cat is on the mat")]).unwrap();
    let ok_clip = st.precision(1) == 2.0 / 7.0;
    notes.push(format!("clipped p1 = {}", st.precision(1)));

    let mut max_err = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=12);
        let vocab = rng.gen_range(3..=8);
        let gen = |rng: &mut ChaCha8Rng| -> Vec<u32> { (0..rng.gen_range(1..=12)).map(|_| rng.gen_range(0..vocab)).collect() };
        let refs: Vec<Vec<u32>> = (0..n).map(|_| gen(&mut rng)).collect();
        let hyps: Vec<Vec<u32>> = refs
            .iter()
            .map(|r| {
                if rng.gen_bool(0.5) {
                    let mut h = r.clone();
                    if !h.is_empty() && rng.gen_bool(0.5) {
                        let i = rng.gen_range(0..h.len());
                        h[i] = rng.gen_range(0..vocab);
                    }
                    h
                } else {
                    gen(&mut rng)
                }
            })
            .collect();
        max_err = max_err.max((bleu(&hyps, &refs).unwrap() - naive_bleu(&hyps, &refs)).abs());
    }
    let ok_oracle = max_err <= 1e-9;
    notes.push(format!("naive oracle max |err| {max_err:.1e} over 100 corpora"));

    let series = |v: &[f64]| imi(&MetricSeries::new(v.to_vec()).unwrap()).unwrap();
    let imis = [series(&[1.0, 1.0, 1.0]), series(&[0.0, 1.0]), series(&[0.2, 0.6, 1.0])];
    let ok_imi = (imis[0] - 1.0).abs() <= 1e-12 && (imis[1] - 0.5).abs() <= 1e-12 && (imis[2] - 0.6).abs() <= 1e-12;
    notes.push(format!("IMI {:?}", imis));
    outcome(ok_self && ok_clip && ok_oracle && ok_imi, notes.join("; "))
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let (train, _) = desk::corpora(TaskKind::Copy, 0).unwrap();
    let mut all_ok = true;
    let mut notes = Vec::new();
    for v in Variant::ALL {
        let mut cfg = desk::experiment(v, 0);
        cfg.checkpoint_interval_epochs = 0;
        cfg.eval_interval_epochs = 0;
        let mut t = Trainer::new(cfg).unwrap();
        let mut failure = None;
        while t.state().step < desk::STEPS {
            if let Err(e) = t.step(&train) {
                failure = Some(e.to_string());
                break;
            }
        }
        if let Some(e) = failure {
            all_ok = false;
            notes.push(format!("{v}: {e}"));
            continue;
        }
        let losses = &t.state().step_losses;
        let (first, last) = (losses[0], *losses.last().unwrap());
        let finite = losses.iter().all(|l| l.is_finite());
        let ratio = last / first;
        let (eval_loss, acc) = t.teacher_forced(&train).unwrap();
        let acc_ok = v != Variant::A || acc >= 0.99;
        all_ok &= finite && ratio <= 0.5 && acc_ok;
        notes.push(format!(
            "{v}: loss {first:.3}->{last:.3} ({:.0}%), eval loss {eval_loss:.3}, token acc {acc:.4}",
            100.0 * ratio
        ));
    }
    let (fast, time) = within(start.elapsed(), 600.0);
    notes.push(time);
    outcome(all_ok && fast, notes.join("; "))
}

fn criterion_8() -> Outcome {
    let (train, val) = desk::corpora(TaskKind::Copy, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut all_ok = true;
    let mut notes = Vec::new();
    for v in Variant::ALL {
        let mut cfg = desk::experiment(v, 8);
        cfg.steps = 120;
        cfg.checkpoint_interval_epochs = 2;
        cfg.eval_interval_epochs = 1;
        let run = |steps: u64| {
            let mut t = Trainer::new(cfg.clone()).unwrap();
            t.run_until(steps, &train, &val).unwrap();
            t
        };
        let a = run(120);
        let b = run(120);
        let same_seed = a.state().step_losses == b.state().step_losses;

        let path = dir.path().join(format!("{v}.ckpt"));
        run(50).snapshot().save(&path).unwrap();
        let mut resumed = Trainer::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        resumed.run_until(120, &train, &val).unwrap();
        let resumed_ok = resumed.state().step_losses == a.state().step_losses
            && resumed.snapshot().weights == a.snapshot().weights;
        all_ok &= same_seed && resumed_ok;
        notes.push(format!("{v}: repeat {same_seed}, resume@50 {resumed_ok}"));
    }
    outcome(all_ok, notes.join("; ") + " (120 steps, bit-exact comparison)")
}

fn criterion_9() -> Outcome {
    let mut all_ok = true;
    let mut notes = Vec::new();
    for size in [ModelSize::Small, ModelSize::Base, ModelSize::Big] {
        let cfg = TransformerConfig::preset(size, MULTI30K_SRC_VOCAB, MULTI30K_TGT_VOCAB);
        let model = Seq2Seq::new(cfg.clone(), 0).unwrap();
        let n = model.num_parameters();
        drop(model);
        let reference = size.reference_parameters();
        let dev = (n as f64 - reference) / reference;
        all_ok &= dev.abs() <= 0.05 && n == cfg.parameter_count();
        notes.push(format!("{size:?} {n} vs {:.1}M ({:+.2}%)", reference / 1e6, 100.0 * dev));
    }
    let cli = Cli::try_parse_from([
        "sdrformer", "train", "--variant", "D", "--q-att", "256", "--q-bo", "16", "--s", "0.9", "--out", "unused",
    ])
    .unwrap();
    let Command::Train(args) = cli.command else {
        unreachable!("parsed a train command")
    };
    let e = args.resolve().unwrap().experiment;
    let flags_ok = e.variant == Variant::D && e.q_att == 256 && e.q_bo == 16 && e.s == 0.9;
    all_ok &= flags_ok;
    notes.push(format!("best-row flags -> variant {}, Q_Att {}, Q_BO {}, s {}", e.variant, e.q_att, e.q_bo, e.s));
    outcome(all_ok, notes.join("; "))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "kWTA exactness", criterion_1),
        (2, "gradient checks", criterion_2),
        (3, "FIFO statistics oracle", criterion_3),
        (4, "boost-factor oracle", criterion_4),
        (5, "Smart Inhibition statistics", criterion_5),
        (6, "metric oracles", criterion_6),
        (7, "end-to-end desk-scale copy task", criterion_7),
        (8, "determinism and resume", criterion_8),
        (9, "config fidelity", criterion_9),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!(
            "{verdict} criterion {id} ({name}) [{:.1}s]: {}",
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
