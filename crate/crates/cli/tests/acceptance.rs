//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the lines always print.
//!
//! Set `MTKD_ACCEPTANCE=1,5` to run a subset.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mtkd_core::augment::{
    asda_augment, augment_examples, mixup_pair, mixup_permutation, mixup_rows, word_drop, AugmentConfig, AugmentKind,
};
use mtkd_core::corpus::{generate_synthetic, split_dataset, DatasetSplit, SyntheticSpec};
use mtkd_core::encoder::{encode_batch, head_logits, tempered_softmax_values};
use mtkd_core::eval::compute_metrics;
use mtkd_core::losses::{self, value, AnnealSchedule, DistillConfig};
use mtkd_core::numcore::gradcheck::{check_gradients, relative_error};
use mtkd_core::tokenizer::{build_vocab, tokenize, TokenId, MASK};
use mtkd_core::trainer::{
    self, shared_vocab, train_teachers, AblationReport, AnnealConfig, RunRecord, TeacherBundle, TrainConfig,
};
use mtkd_core::{Example, Graph, LossKind, ModelConfig, ModelParams, SeededRng, TaskId, TaskSpec, Tensor, Var, Vocab};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
}

fn one_hot_rows(n: usize, k: usize, rng: &mut SeededRng) -> Tensor {
    let mut t = Tensor::zeros(&[n, k]);
    for i in 0..n {
        t.data_mut()[i * k + rng.below(k)] = 1.0;
    }
    t
}

fn multi_hot_rows(n: usize, k: usize, rng: &mut SeededRng) -> Tensor {
    random_tensor(&[n, k], 0.0, 1.0, rng).map(|u| if u < 0.5 { 1.0 } else { 0.0 })
}

const GRAD_TOL: f64 = 1e-3;
const GRAD_INSTANCES: usize = 20;

/// Splits `x` [N, ΣK] into per-task column blocks.
fn task_blocks(g: &mut Graph, x: Var, widths: &[(TaskId, usize)]) -> Result<BTreeMap<TaskId, Var>, mtkd_core::Error> {
    let mut out = BTreeMap::new();
    let mut start = 0;
    for &(t, k) in widths {
        out.insert(t, g.slice_cols(x, start, start + k)?);
        start += k;
    }
    Ok(out)
}

fn random_widths(rng: &mut SeededRng) -> Vec<(TaskId, usize)> {
    let mut tasks: Vec<TaskId> = TaskId::ALL.into_iter().filter(|_| rng.bernoulli(0.6)).collect();
    if !tasks.contains(&TaskId::Offense) {
        tasks.insert(0, TaskId::Offense);
    }
    tasks.sort();
    tasks.into_iter().map(|t| (t, TaskSpec::standard(t).num_classes())).collect()
}

fn loss_kind(t: TaskId) -> LossKind {
    TaskSpec::standard(t).loss_kind
}

/// Gradient checks on every loss and on the encoder with a head.
fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |name: &'static str, err: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(err);
    };
    for i in 0..GRAD_INSTANCES {
        let mut rng = SeededRng::new(1000 + i as u64);
        let n = 1 + rng.below(4);
        let k = [2usize, 4, 7][rng.below(3)];
        let t = [1.0, 2.0, 4.0, 7.0][rng.below(4)];
        let alpha = rng.uniform();

        let probs = random_tensor(&[n, k], 0.05, 0.95, &mut rng);
        let y = one_hot_rows(n, k, &mut rng);
        let r = ok(check_gradients(|g, x| losses::ce_loss(g, x, &y), &probs, GRAD_TOL))?;
        record("ce", r.max_relative_error);

        let yb = multi_hot_rows(n, k, &mut rng);
        let r = ok(check_gradients(|g, x| losses::bce_loss(g, x, &yb), &probs, GRAD_TOL))?;
        record("bce", r.max_relative_error);

        let student = random_tensor(&[n, k], -3.0, 3.0, &mut rng);
        let teacher = random_tensor(&[n, k], -3.0, 3.0, &mut rng);
        let r = ok(check_gradients(
            |g, x| {
                let tv = g.constant(teacher.clone());
                losses::kl_kd_loss(g, tv, x, t)
            },
            &student,
            GRAD_TOL,
        ))?;
        record("kl_kd", r.max_relative_error);

        let r = ok(check_gradients(
            |g, x| {
                let ce = losses::supervised_loss(g, x, &y, LossKind::CategoricalCe)?;
                let tv = g.constant(teacher.clone());
                let kl = losses::kl_kd_loss(g, tv, x, t)?;
                losses::kd_loss(g, ce, kl, alpha)
            },
            &student,
            GRAD_TOL,
        ))?;
        record("kd", r.max_relative_error);

        let widths = random_widths(&mut rng);
        let total: usize = widths.iter().map(|w| w.1).sum();
        let student = random_tensor(&[n, total], -3.0, 3.0, &mut rng);
        let teacher = random_tensor(&[n, total], -3.0, 3.0, &mut rng);
        let targets: BTreeMap<TaskId, Tensor> =
            widths.iter().map(|&(task, k)| (task, one_hot_rows(n, k, &mut rng))).collect();
        let attached: Vec<TaskId> = widths.iter().map(|w| w.0).collect();
        let config = DistillConfig {
            temperature: t,
            alpha,
            per_task_temperature: BTreeMap::from([(TaskId::Emotion, 7.0)]),
        };
        let kl_part = |g: &mut Graph, x: Var| -> mtkd_core::Result<Var> {
            let s = task_blocks(g, x, &widths)?;
            let tv = g.constant(teacher.clone());
            let tm = task_blocks(g, tv, &widths)?;
            losses::mtkd_kl_loss(g, &tm, &s, &config)
        };
        let ce_part = |g: &mut Graph, x: Var| -> mtkd_core::Result<Var> {
            let s = task_blocks(g, x, &widths)?;
            let mut per = BTreeMap::new();
            for (task, v) in s {
                per.insert(task, losses::supervised_loss(g, v, &targets[&task], loss_kind(task))?);
            }
            losses::mtl_loss(g, &per, &attached)
        };
        let r = ok(check_gradients(|g, x| ce_part(g, x), &student, GRAD_TOL))?;
        record("mtl", r.max_relative_error);
        let r = ok(check_gradients(|g, x| kl_part(g, x), &student, GRAD_TOL))?;
        record("mtkd_kl", r.max_relative_error);
        let r = ok(check_gradients(
            |g, x| {
                let ce = ce_part(g, x)?;
                let kl = kl_part(g, x)?;
                losses::mtkd_loss(g, ce, kl, alpha)
            },
            &student,
            GRAD_TOL,
        ))?;
        record("mtkd", r.max_relative_error);
        let schedule = ok(AnnealSchedule::new(1 + rng.below(10) as u64))?;
        let step = rng.below(schedule.total_steps() as usize + 3) as u64;
        let r = ok(check_gradients(
            |g, x| {
                let ce = ce_part(g, x)?;
                let kl = kl_part(g, x)?;
                losses::mtkd_ta_loss(g, ce, kl, &schedule, step)
            },
            &student,
            GRAD_TOL,
        ))?;
        record("mtkd_ta", r.max_relative_error);

        record("encoder+head", encoder_gradcheck(&mut rng)?);
    }
    let failing: Vec<String> = worst
        .iter()
        .filter(|(_, &e)| !(e < GRAD_TOL))
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let max = worst.values().cloned().fold(0.0, f64::max);
    ensure!(failing.is_empty(), "relative error over {GRAD_TOL}: {}", failing.join(", "));
    ensure!(secs < 60.0, "gradient suite took {secs:.1} s");
    Ok(format!(
        "{} checks x {GRAD_INSTANCES} instances, max rel err {max:.2e}, {secs:.1} s",
        worst.len()
    ))
}

fn tiny_vocab() -> Vocab {
    let words = "alpha beta gamma delta epsilon zeta eta theta iota kappa";
    build_vocab(&[Example::new(words, "Other", TaskId::Offense)], 1).unwrap()
}

/// Central differences on sampled parameter coordinates of a small encoder
/// with a head; returns the largest relative error.
fn encoder_gradcheck(rng: &mut SeededRng) -> Result<f64, String> {
    let vocab = tiny_vocab();
    let config = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 16,
        max_len: 8,
        dropout_rate: 0.0,
    };
    let task = if rng.bernoulli(0.5) { TaskId::Offense } else { TaskId::Emotion };
    let spec = TaskSpec::standard(task);
    let mut params = ok(ModelParams::init(&config, std::slice::from_ref(&spec), &vocab, rng.next_u64()))?;
    // Scale parameters up a little so the check sees non-trivial curvature.
    for name in params.tensors().keys().cloned().collect::<Vec<_>>() {
        let t = params.tensor_mut(&name).unwrap();
        for v in t.data_mut() {
            *v += rng.uniform_range(-0.3, 0.3);
        }
    }
    let rows: Vec<Vec<TokenId>> = (0..3)
        .map(|_| {
            let len = 2 + rng.below(config.max_len - 1);
            std::iter::once(2)
                .chain((1..len).map(|_| (5 + rng.below(vocab.len() - 5)) as TokenId))
                .collect()
        })
        .collect();
    let classes: Vec<usize> = (0..3).map(|_| rng.below(spec.num_classes())).collect();
    let batch = ok(mtkd_core::TokenBatch::from_encoded(rows, classes, &spec))?;
    let targets = batch.labels.dense(spec.num_classes());

    let loss_of = |p: &ModelParams, trainable: bool| -> mtkd_core::Result<(Graph, Var)> {
        let mut g = Graph::new();
        let model = p.bind(&mut g, trainable)?;
        let pooled = encode_batch(&mut g, &model, &batch, false, &mut SeededRng::new(0))?;
        let logits = head_logits(&mut g, &model, pooled, task)?;
        let loss = losses::supervised_loss(&mut g, logits, &targets, spec.loss_kind)?;
        Ok((g, loss))
    };
    let (g, loss) = ok(loss_of(&params, true))?;
    let grads = ok(g.backward(loss))?.into_params();

    let names: Vec<String> = params.tensors().keys().cloned().collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..40 {
        let name = &names[rng.below(names.len())];
        let len = params.tensor(name).unwrap().numel();
        let idx = rng.below(len);
        let base = params.tensor(name).unwrap().data()[idx];
        let mut eval_at = |v: f64| -> Result<f64, String> {
            params.tensor_mut(name).unwrap().data_mut()[idx] = v;
            let (g, l) = ok(loss_of(&params, false))?;
            Ok(g.value(l).item())
        };
        let numeric = (eval_at(base + h)? - eval_at(base - h)?) / (2.0 * h);
        params.tensor_mut(name).unwrap().data_mut()[idx] = base;
        worst = worst.max(relative_error(grads[name].data()[idx], numeric));
    }
    Ok(worst)
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// Collapses and identities of the losses and the tempered softmax.
fn criterion_2() -> Outcome {
    let tol = 1e-9;
    let mut rng = SeededRng::new(2);
    for case in 0..200 {
        let n = 1 + rng.below(5);
        let k = [2usize, 4, 7][rng.below(3)];
        let t = [1.0, 2.0, 4.0, 7.0][rng.below(4)];
        let s = random_tensor(&[n, k], -5.0, 5.0, &mut rng);
        let te = random_tensor(&[n, k], -5.0, 5.0, &mut rng);
        let classes: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let ce = ok(value::ce_loss(&s.softmax_rows(), &classes))?;
        let kl = ok(value::kl_kd_loss(&te, &s, t))?;
        ensure!(ok(value::kd_loss(ce, kl, 1.0))? == ce, "case {case}: KD at alpha=1 is not CE");
        ensure!(ok(value::kd_loss(ce, kl, 0.0))? == kl, "case {case}: KD at alpha=0 is not KL");
        ensure!(ok(value::mtkd_loss(ce, kl, 1.0))? == ce, "case {case}: MTKD at alpha=1 is not MTL");
        ensure!(ok(value::mtkd_loss(ce, kl, 0.0))? == kl, "case {case}: MTKD at alpha=0 is not KL");

        // The same collapses on the graph.
        let mut g = Graph::new();
        let sv = g.constant(s.clone());
        let tv = g.constant(te.clone());
        let y = mtkd_core::tokenizer::one_hot(&classes, k);
        let cev = ok(losses::supervised_loss(&mut g, sv, &y, LossKind::CategoricalCe))?;
        let klv = ok(losses::kl_kd_loss(&mut g, tv, sv, t))?;
        let one = ok(losses::kd_loss(&mut g, cev, klv, 1.0))?;
        let zero = ok(losses::kd_loss(&mut g, cev, klv, 0.0))?;
        ensure!(g.value(one).item() == g.value(cev).item(), "case {case}: graph KD alpha=1");
        ensure!(g.value(zero).item() == g.value(klv).item(), "case {case}: graph KD alpha=0");
        let total = 1 + rng.below(20) as u64;
        let sched = ok(AnnealSchedule::new(total))?;
        let at0 = ok(losses::mtkd_ta_loss(&mut g, cev, klv, &sched, 0))?;
        let at_end = ok(losses::mtkd_ta_loss(&mut g, cev, klv, &sched, total + rng.below(3) as u64))?;
        ensure!(g.value(at0).item() == g.value(klv).item(), "case {case}: lambda=0 is not pure KL");
        ensure!(g.value(at_end).item() == g.value(cev).item(), "case {case}: lambda=1 is not pure CE");

        let self_kl = ok(value::kl_kd_loss(&s, &s, t))?;
        ensure!(self_kl.abs() <= tol, "case {case}: KL(p||p) = {self_kl}");
        ensure!(kl >= -tol, "case {case}: KL = {kl} < 0");

        let p = ok(tempered_softmax_values(&s, t))?;
        let c = rng.uniform_range(-10.0, 10.0);
        let shifted = ok(tempered_softmax_values(&s.map(|z| z + c), t))?;
        let argmax = s.argmax_rows();
        ensure!(p.argmax_rows() == argmax, "case {case}: argmax changed under T={t}");
        let mut prev_h: Vec<f64> = vec![f64::NEG_INFINITY; n];
        for temp in [0.5, 1.0, 2.0, 4.0, 7.0, 20.0] {
            let q = ok(tempered_softmax_values(&s, temp))?;
            for i in 0..n {
                let h = entropy(q.row(i));
                ensure!(h >= prev_h[i] - tol, "case {case}: entropy fell at T={temp}");
                prev_h[i] = h;
            }
        }
        for i in 0..n {
            let sum: f64 = p.row(i).iter().sum();
            ensure!((sum - 1.0).abs() <= tol, "case {case}: row sums to {sum}");
            for (a, b) in p.row(i).iter().zip(shifted.row(i)) {
                ensure!((a - b).abs() <= tol, "case {case}: not shift invariant");
            }
        }
    }
    Ok("200 random cases: alpha/lambda collapses exact, KL(p||p)=0, KL>=0, softmax identities".into())
}

/// `(T²/N) Σ KL` against a direct summation.
fn criterion_3() -> Outcome {
    let mut rng = SeededRng::new(3);
    let mut worst: f64 = 0.0;
    for t in [1.0, 2.0, 4.0, 7.0] {
        for _ in 0..25 {
            let n = 1 + rng.below(6);
            let k = 2 + rng.below(6);
            let s = random_tensor(&[n, k], -4.0, 4.0, &mut rng);
            let te = random_tensor(&[n, k], -4.0, 4.0, &mut rng);
            let soft = |row: &[f64]| -> Vec<f64> {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|z| ((z - m) / t).exp()).collect();
                let z: f64 = e.iter().sum();
                e.iter().map(|x| x / z).collect()
            };
            let mut raw = 0.0;
            for i in 0..n {
                let (pt, ps) = (soft(te.row(i)), soft(s.row(i)));
                for c in 0..k {
                    raw += pt[c] * (pt[c].ln() - ps[c].ln());
                }
            }
            let oracle = t * t * raw / n as f64;
            let got = ok(value::kl_kd_loss(&te, &s, t))?;
            let rel = (got - oracle).abs() / oracle.abs().max(1e-12);
            worst = worst.max(rel);
            ensure!(rel < 1e-9, "T={t}: {got} vs oracle {oracle}");
            let ratio = got / (raw / n as f64);
            ensure!((ratio - t * t).abs() < 1e-9 * t * t, "T={t}: prefactor {ratio}");
        }
    }
    Ok(format!("T in {{1,2,4,7}}, 100 cases, max rel err {worst:.1e}"))
}

/// Augmentation constraints and determinism.
fn criterion_4() -> Outcome {
    let tokens: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
    let (mut lo, mut hi) = (usize::MAX, 0);
    for i in 0..10_000u64 {
        let out = word_drop(&tokens, 1.0, &mut SeededRng::new(i));
        let removed = tokens.len() - out.len();
        ensure!((1..=10).contains(&removed), "seed {i}: removed {removed}");
        let mut it = tokens.iter();
        ensure!(out.iter().all(|w| it.any(|t| t == w)), "seed {i}: order not kept");
        ensure!(out == word_drop(&tokens, 1.0, &mut SeededRng::new(i)), "seed {i}: not deterministic");
        lo = lo.min(removed);
        hi = hi.max(removed);
        let gated = tokens.len() - word_drop(&tokens, 0.2, &mut SeededRng::new(i)).len();
        ensure!(gated == 0 || (1..=10).contains(&gated), "seed {i}: gated run removed {gated}");
    }

    let spec = TaskSpec::standard(TaskId::Offense);
    let synth = SyntheticSpec {
        examples_per_task: 200,
        ..SyntheticSpec::default_for(&spec)
    };
    let examples = ok(generate_synthetic(&synth, &spec, 4))?;
    let vocab = ok(build_vocab(&examples, 1))?;
    let mut rng = SeededRng::new(44);
    for case in 0..500 {
        let e1 = &examples[rng.below(examples.len())];
        let same: Vec<&Example> = examples.iter().filter(|e| e.label == e1.label).collect();
        let e2 = same[rng.below(same.len())];
        let (num, den) = [(15, 100), (3, 10), (1, 2), (9, 10)][rng.below(4)];
        let rate = num as f64 / den as f64;
        let seed = rng.next_u64();
        let a = ok(asda_augment(e1, e2, &vocab, rate, &mut SeededRng::new(seed)))?;
        let e2_len = tokenize(&e2.text).len();
        ensure!(a.e2_range.len() == e2_len, "case {case}: E2 span {:?} for {e2_len} tokens", a.e2_range);
        let want = (num * e2_len).div_ceil(den).clamp(1, e2_len);
        ensure!(a.masked.len() == want, "case {case}: {} masks, want {want}", a.masked.len());
        for m in &a.masked {
            ensure!(a.e2_range.contains(&m.position), "case {case}: mask at {} outside E2", m.position);
            ensure!(a.tokens[m.position] == "[MASK]" && a.ids[m.position] == MASK, "case {case}: masked id is not [MASK]");
        }
        let again = ok(asda_augment(e1, e2, &vocab, rate, &mut SeededRng::new(seed)))?;
        ensure!(again == a, "case {case}: ASDA not deterministic");
    }

    for case in 0..1000 {
        let k = [2usize, 4, 7][rng.below(3)];
        let ya = one_hot_rows(1, k, &mut rng);
        let yb = one_hot_rows(1, k, &mut rng);
        let lambda = rng.uniform();
        let x = [rng.uniform(), rng.uniform()];
        let (_, y) = ok(mixup_pair((&x, ya.data()), (&x, yb.data()), lambda))?;
        let sum: f64 = y.iter().sum();
        ensure!(y.iter().all(|&v| v >= 0.0) && (sum - 1.0).abs() < 1e-12, "case {case}: label {y:?} off simplex");
    }
    let mut g = Graph::new();
    let labels = one_hot_rows(8, 4, &mut rng);
    let rows = g.constant(random_tensor(&[8, 3], -1.0, 1.0, &mut rng));
    let perm = mixup_permutation(8, &mut SeededRng::new(9));
    let (_, mixed) = ok(mixup_rows(&mut g, rows, &labels, &perm, 0.3))?;
    for i in 0..8 {
        let sum: f64 = mixed.row(i).iter().sum();
        ensure!((sum - 1.0).abs() < 1e-12, "batch MixUp row {i} sums to {sum}");
    }
    ensure!(perm == mixup_permutation(8, &mut SeededRng::new(9)), "MixUp pairing not deterministic");

    let configs: Vec<AugmentConfig> = [
        AugmentKind::Asda,
        AugmentKind::SentenceDrop,
        AugmentKind::WordDrop,
        AugmentKind::Continuation,
    ]
    .into_iter()
    .map(AugmentConfig::new)
    .collect();
    let gen = ok(mtkd_core::augment::fit_ngram_generator(&examples, 2))?;
    let run = || augment_examples(&examples, &configs, &vocab, Some(&gen), 7, 1, 63);
    let (a, b) = (ok(run())?, ok(run())?);
    ensure!(a.examples == b.examples && a.asda == b.asda, "augment_examples not deterministic");
    Ok(format!(
        "10000 word drops removed {lo}..={hi}; 500 ASDA, 1000 MixUp checks; stacked pipeline deterministic"
    ))
}

/// `compute_metrics` against direct counting.
fn criterion_5() -> Outcome {
    let hand = ok(compute_metrics(&[0, 0, 1, 1], &[0, 1, 1, 1], 2))?;
    ensure!(hand.accuracy == 0.75, "hand accuracy {}", hand.accuracy);
    ensure!(hand.per_class[0].precision == 0.5 && hand.per_class[0].recall == 1.0, "hand class 0");
    ensure!((hand.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-15, "hand class 0 F1");
    ensure!(hand.per_class[1].precision == 1.0 && (hand.per_class[1].recall - 2.0 / 3.0).abs() < 1e-15, "hand class 1");
    ensure!((hand.per_class[1].f1 - 0.8).abs() < 1e-15, "hand class 1 F1");
    ensure!((hand.weighted_f1 - (2.0 / 3.0 + 2.4) / 4.0).abs() < 1e-15, "hand weighted F1 {}", hand.weighted_f1);

    let mut rng = SeededRng::new(5);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let k = [2usize, 4, 7][case % 3];
        let n = 1 + rng.below(60);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let m = ok(compute_metrics(&preds, &labels, k))?;
        let mut f1s = Vec::new();
        let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
        for c in 0..k {
            let mut tp = 0.0;
            let mut fp = 0.0;
            let mut fne = 0.0;
            for (p, y) in preds.iter().zip(&labels) {
                match (*p == c, *y == c) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fne += 1.0,
                    _ => {}
                }
            }
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = if tp + fne > 0.0 { tp / (tp + fne) } else { 0.0 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            let support = tp + fne;
            wp += support * p;
            wr += support * r;
            wf += support * f;
            f1s.push(f);
        }
        let acc = preds.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / n as f64;
        let nn = n as f64;
        let diffs = [
            m.accuracy - acc,
            m.precision - wp / nn,
            m.recall - wr / nn,
            m.weighted_f1 - wf / nn,
        ];
        for (c, f) in f1s.iter().enumerate() {
            worst = worst.max((m.per_class[c].f1 - f).abs());
        }
        for d in diffs {
            worst = worst.max(d.abs());
        }
        ensure!(worst <= 1e-12, "case {case}: deviation {worst:e}");
    }
    Ok(format!("hand K=2 example exact; 200 random cases, max deviation {worst:.1e}"))
}

fn synthetic_world(
    examples_per_task: usize,
    tasks: &[TaskId],
    seed: u64,
) -> (Vec<TaskSpec>, BTreeMap<TaskId, DatasetSplit>, Vocab) {
    let specs: Vec<TaskSpec> = tasks.iter().map(|&t| TaskSpec::standard(t)).collect();
    let datasets: BTreeMap<TaskId, DatasetSplit> = specs
        .iter()
        .map(|spec| {
            let synth = SyntheticSpec {
                examples_per_task,
                ..SyntheticSpec::default_for(spec)
            };
            let examples = generate_synthetic(&synth, spec, seed).unwrap();
            (spec.task_id, split_dataset(&examples, spec, seed).unwrap())
        })
        .collect();
    let vocab = shared_vocab(&datasets).unwrap();
    (specs, datasets, vocab)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Desk-scale runs on planted-keyword corpora.
fn criterion_6() -> Outcome {
    let (specs, datasets, vocab) = synthetic_world(1250, &TaskId::ALL, 0);
    let offense = &specs[0];
    ensure!(offense.task_id == TaskId::Offense, "offense must come first");
    let teacher_model = ModelConfig::teacher(vocab.len());
    let student_model = ModelConfig::student(vocab.len());
    let config = TrainConfig::default();

    let start = Instant::now();
    let (teacher, teacher_record) =
        ok(trainer::fine_tune(offense, &datasets[&TaskId::Offense], &vocab, &teacher_model, &config))?;
    let teacher_secs = start.elapsed().as_secs_f64();
    let teacher_test = teacher_record.main_test().unwrap().clone();
    ensure!(teacher_test.accuracy >= 0.95, "teacher accuracy {:.4}", teacher_test.accuracy);
    ensure!(teacher_secs < 120.0, "teacher took {teacher_secs:.1} s");

    let aux = ok(train_teachers(&specs[1..], &datasets, &vocab, &teacher_model, &config))?;
    let mut all: BTreeMap<TaskId, ModelParams> = aux.tasks().into_iter().map(|t| (t, aux.get(t).unwrap().clone())).collect();
    all.insert(TaskId::Offense, teacher.clone());
    let bundle = ok(TeacherBundle::from_params(all))?;

    let mut kd = Vec::new();
    let mut ta = Vec::new();
    for seed in 0..3 {
        let config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let (_, r) = ok(trainer::distill(
            &teacher,
            &student_model,
            offense,
            &datasets[&TaskId::Offense],
            &vocab,
            &config,
        ))?;
        let kd_f1 = r.main_test().unwrap().weighted_f1;
        ensure!(
            teacher_test.weighted_f1 - kd_f1 <= 0.05,
            "seed {seed}: KD student F1 {kd_f1:.4} vs teacher {:.4}",
            teacher_test.weighted_f1
        );
        kd.push(kd_f1);
        let ta_config = TrainConfig {
            anneal: Some(AnnealConfig::default()),
            ..config
        };
        let (_, r) = ok(trainer::train_mtkd_ta(&bundle, &student_model, &specs, &datasets, &vocab, &ta_config))?;
        ta.push(r.main_test().unwrap().weighted_f1);
    }
    let (kd_med, ta_med) = (median(kd.clone()), median(ta.clone()));
    ensure!(ta_med >= kd_med - 0.01, "MTKD-TA median F1 {ta_med:.4} < KD median {kd_med:.4} - 0.01");
    Ok(format!(
        "teacher acc {:.4} in {teacher_secs:.1} s; KD F1 {:?}; MTKD-TA F1 {:?} (median {ta_med:.4} vs {kd_med:.4})",
        teacher_test.accuracy,
        kd.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
        ta.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
    ))
}

const SMALL_CONFIG: &str = r#"
output_dir = "out"
teacher_epochs = 2

[train]
epochs = 2
batch_size = 16
seed = 3

[teacher_model]
d_model = 16
n_heads = 2
n_layers = 2
d_ff = 32
max_len = 48

[student_model]
d_model = 16
n_heads = 2
n_layers = 1
d_ff = 32
max_len = 48

[synthetic]
examples_per_task = 120

[tasks.offense]
path = "data/offense.jsonl"
[tasks.emotion]
path = "data/emotion.jsonl"
[tasks.sentiment]
path = "data/sentiment.jsonl"
[tasks.sexism]
path = "data/sexism.jsonl"
"#;

fn mtkd_cmd(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = ok(Command::new(env!("CARGO_BIN_EXE_mtkd")).current_dir(dir).args(args).output())?;
    ensure!(
        out.status.success(),
        "mtkd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// `ablate` through the binary, twice.
fn criterion_7() -> Outcome {
    let expected = [
        "Proposed model",
        "w/o emotions & sentiment & sexist language",
        "w/o emotions & sentiment",
        "w/o emotions & sexist language",
        "w/o sentiment & sexist language",
        "w/o emotions",
        "w/o sentiment",
        "w/o sexist language",
    ];
    let mut grids = Vec::new();
    let mut reports = Vec::new();
    for _ in 0..2 {
        let dir = ok(tempfile::tempdir())?;
        ok(std::fs::write(dir.path().join("exp.toml"), SMALL_CONFIG))?;
        mtkd_cmd(dir.path(), &["synth", "--config", "exp.toml", "--seed", "1"])?;
        mtkd_cmd(dir.path(), &["ablate", "--config", "exp.toml"])?;
        grids.push(ok(std::fs::read_to_string(dir.path().join("out/ablation.txt")))?);
        let json = ok(std::fs::read_to_string(dir.path().join("out/ablation.json")))?;
        reports.push(ok(serde_json::from_str::<AblationReport>(&json))?);
    }
    let report = &reports[0];
    let labels: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
    ensure!(labels == expected, "row labels {labels:?}");
    ensure!(report.rows.iter().all(|r| r.cells.len() == 3), "a row lacks a pipeline cell");
    ensure!(grids[0] == grids[1], "grid files differ between invocations");
    ensure!(reports[0].rows == reports[1].rows, "grid metrics differ between invocations");
    ensure!(reports[0].teacher_hashes == reports[1].teacher_hashes, "teachers differ between invocations");
    let first = grids[0].lines().nth(1).unwrap_or("").to_string();
    Ok(format!("8x3 grid, labels match, bit-identical across 2 runs; first row: {first}"))
}

/// Every pipeline twice with one config and seed.
fn criterion_8() -> Outcome {
    let (specs, datasets, vocab) = synthetic_world(150, &[TaskId::Offense, TaskId::Emotion, TaskId::Sexism], 8);
    let model = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        max_len: 48,
        ..ModelConfig::student(vocab.len())
    };
    let config = TrainConfig {
        epochs: 2,
        seed: 11,
        augmentations: vec![AugmentConfig::new(AugmentKind::WordDrop), AugmentConfig::new(AugmentKind::MixupEncoder)],
        anneal: Some(AnnealConfig::default()),
        active_tasks: specs.iter().map(|s| s.task_id).collect(),
        ..TrainConfig::default()
    };
    let offense = &specs[0];
    let data = &datasets[&TaskId::Offense];
    let teachers = ok(train_teachers(&specs, &datasets, &vocab, &model, &config))?;
    let runs: Vec<(&str, Box<dyn Fn() -> mtkd_core::Result<(ModelParams, RunRecord)>>)> = vec![
        ("finetune", Box::new(|| trainer::fine_tune(offense, data, &vocab, &model, &config))),
        (
            "kd",
            Box::new(|| trainer::distill(teachers.get(TaskId::Offense).unwrap(), &model, offense, data, &vocab, &config)),
        ),
        ("mtl", Box::new(|| trainer::train_mtl(&specs, &datasets, &vocab, &model, &config))),
        ("mtkd", Box::new(|| trainer::train_mtkd(&teachers, &model, &specs, &datasets, &vocab, &config))),
        ("mtkd_ta", Box::new(|| trainer::train_mtkd_ta(&teachers, &model, &specs, &datasets, &vocab, &config))),
    ];
    for (name, run) in &runs {
        let (pa, ra) = ok(run())?;
        let (pb, rb) = ok(run())?;
        ensure!(ra.same_outcome(&rb), "{name}: run records differ");
        ensure!(pa.checkpoint_hash() == pb.checkpoint_hash(), "{name}: checkpoints differ");
        for (t, m) in &ra.test {
            let other = &rb.test[t];
            ensure!(m.weighted_f1.to_bits() == other.weighted_f1.to_bits(), "{name}: {t} F1 bits differ");
        }
    }
    Ok("finetune, kd, mtl, mtkd, mtkd_ta reproduce records and checkpoints bit-exactly".into())
}

fn main() {
    let selected: Option<Vec<usize>> = std::env::var("MTKD_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "gradient suite", criterion_1),
        (2, "loss identities", criterion_2),
        (3, "temperature factor", criterion_3),
        (4, "augmentation constraints", criterion_4),
        (5, "metrics oracle", criterion_5),
        (6, "end-to-end smoke", criterion_6),
        (7, "ablation harness", criterion_7),
        (8, "determinism", criterion_8),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id} ({name}): PASS [{secs:.1} s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL [{secs:.1} s] {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
