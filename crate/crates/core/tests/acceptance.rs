//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion and exits non-zero if any fails.
//!
//! Pass criterion numbers to run a subset:
//! `cargo test --test acceptance -- 9 12`.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::oracles::{span_f1, traced_lengths, ReferenceAdamax};
use common::{desk_train, gradcases, rng, synthetic_task, tiny_encoder};
use mtl_core::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, CheckpointError};
use mtl_core::config::ExperimentConfig;
use mtl_core::data::synthetic::SyntheticConfig;
use mtl_core::encoder::ParamSource;
use mtl_core::experiment::{
    label_edge, median, pairwise_mtl, pairwise_seed, run_experiment, EdgeLabel, Experiment, RunReport, FINETUNE, SINGLE,
};
use mtl_core::metrics::{entity_f1, micro_f1, pearson};
use mtl_core::model::Model;
use mtl_core::rng::derive_seed;
use mtl_core::tokenizer::{encode_pair, split_long_sentence, Vocab};
use mtl_core::train::mlm::{mlm_eval_loss, mlm_pretrain, prepare_corpus, uniform_loss};
use mtl_core::train::{
    adamax_update, build_epoch_schedule, fine_tune, lr_at, mtl_refine, train_single_task, AdamaxState, TrainConfig,
};
use rand::Rng;

/// Outcome of one criterion: pass flag and a short summary of the evidence.
type Verdict = (bool, String);

type Criterion = (usize, &'static str, fn() -> Verdict);

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 12] = [
        (1, "autodiff finite differences", autodiff),
        (2, "Adamax reference trajectories", optimizer),
        (3, "learning-rate schedule anchors", lr_schedule),
        (4, "tokenizer truncation", truncation),
        (5, "epoch schedule and sampling", sampling),
        (6, "metric oracles", metrics),
        (7, "single-task refinement equivalence", single_task_equivalence),
        (8, "fine-tune contract", fine_tune_contract),
        (9, "multi-task gain on the synthetic suite", mtl_gain),
        (10, "pairwise protocol", pairwise),
        (11, "determinism and persistence", determinism),
        (12, "masked-token pretraining", pretraining),
    ];
    let mut failed = Vec::new();
    let mut out = std::io::stdout();
    for (id, name, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(run)) {
            Ok(v) => v,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        let status = if ok { "PASS" } else { "FAIL" };
        // Written straight to stdout so the harness does not capture it.
        writeln!(
            out,
            "criterion {id:>2} {status} {name} ({:.1}s): {detail}",
            start.elapsed().as_secs_f64()
        )
        .unwrap();
        out.flush().unwrap();
        if !ok {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        writeln!(out, "failed criteria: {failed:?}").unwrap();
        std::process::exit(1);
    }
}

fn autodiff() -> Verdict {
    let mut cases = gradcases::primitives();
    cases.extend(gradcases::heads());
    let worst = cases.iter().map(|c| c.1).fold(0.0, f64::max);
    let bad: Vec<&str> = cases.iter().filter(|c| c.1 > gradcases::TOL).map(|c| c.0).collect();
    let closed = gradcases::cross_entropy_closed_form();
    let linear = gradcases::linearity();
    (
        bad.is_empty() && closed <= 1e-10 && linear <= 1e-10,
        format!(
            "{} cases x {} instances, worst rel err {worst:.2e}, failing {bad:?}; softmax-minus-onehot gap {closed:.1e}, linearity gap {linear:.1e}",
            cases.len(),
            gradcases::INSTANCES
        ),
    )
}

fn optimizer() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut counters_ok = true;
    for decay in [0.0, 0.01] {
        for seed in 0..5 {
            let mut r = rng(seed);
            let start: f64 = r.random_range(-2.0..2.0);
            let mut reference = ReferenceAdamax::at(start);
            let mut param = [start];
            let mut state = AdamaxState::default();
            for step in 0..100 {
                let g = 2.0 * (param[0] - 0.3) + r.random_range(-0.5..0.5);
                let lr = lr_at(step + 1, 100, 0.1, 0.05);
                reference.step(g, lr, decay);
                adamax_update(&mut param, &[g], &mut state, lr, decay).unwrap();
                worst = worst
                    .max((param[0] - reference.theta).abs())
                    .max((state.m[0] - reference.m).abs())
                    .max((state.u[0] - reference.u).abs());
                counters_ok &= state.t == step as u64 + 1;
            }
        }
    }
    (
        worst <= 1e-12 && counters_ok,
        format!("10 trajectories x 100 steps (decay 0 and 0.01), max abs gap {worst:.1e}"),
    )
}

fn lr_schedule() -> Verdict {
    let anchors = [
        (lr_at(5, 100, 0.1, 5e-5), 2.5e-5),
        (lr_at(10, 100, 0.1, 5e-5), 5e-5),
        (lr_at(100, 100, 0.1, 5e-5), 0.0),
    ];
    let anchors_ok = anchors.iter().all(|(got, want)| (got - want).abs() <= 1e-18);
    let mut linear_ok = true;
    let mut checked = 0;
    for (total, warmup) in [(100, 0.1), (37, 0.1), (250, 0.25)] {
        let peak = 5e-5;
        let w = ((warmup * total as f64).round() as usize).max(1);
        for step in 0..=total {
            let expected = if step <= w {
                peak * step as f64 / w as f64
            } else {
                peak * (total - step) as f64 / (total - w) as f64
            };
            linear_ok &= (lr_at(step, total, warmup, peak) - expected).abs() <= 1e-18;
            checked += 1;
        }
    }
    (
        anchors_ok && linear_ok,
        format!(
            "lr_at(5,10,100) = {:e}, {:e}, {:e}; {checked} integer steps on the piecewise-linear line: {linear_ok}",
            anchors[0].0, anchors[1].0, anchors[2].0
        ),
    )
}

fn truncation() -> Verdict {
    const WORDS: [&str; 8] = ["the", "play", "##ing", "drug", "gene", "##s", "a", "b"];
    let v = Vocab::from_tokens(["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"].into_iter().chain(WORDS)).unwrap();
    let a: Vec<String> = ["the", "play", "a", "b", "gene", "drug"].map(String::from).to_vec();
    let b: Vec<String> = ["a", "b", "the", "gene", "play"].map(String::from).to_vec();
    let segs = encode_pair(&a, &b, 10, &v).unwrap().decode_segments(&v);
    let traced = (segs[0].len(), segs[1].len());
    let traced_ok = traced == (4, 3) && segs[0] == a[..4] && segs[1] == b[..3];

    let mut r = rng(4);
    let mut violations = 0;
    for _ in 0..500 {
        let (na, nb, max_len) = (r.random_range(0..40), r.random_range(0..40), r.random_range(5..48));
        let mut words = |n: usize| -> Vec<String> { (0..n).map(|_| WORDS[r.random_range(0..8)].to_string()).collect() };
        let (a, b) = (words(na), words(nb));
        let enc = encode_pair(&a, &b, max_len, &v).unwrap();
        let (la, lb) = traced_lengths(na, nb, max_len);
        let segs = enc.decode_segments(&v);
        let ok = enc.len() == max_len
            && enc.real_len() == la + lb + 3
            && segs[0] == a[..la]
            && segs[1] == b[..lb]
            && enc.token_ids[0] == v.cls_id()
            && enc.token_ids[la + 1] == v.sep_id()
            && enc.token_ids[la + lb + 2] == v.sep_id()
            && (0..max_len).all(|i| {
                let real = i < la + lb + 3;
                enc.attention_mask[i] == u8::from(real)
                    && if real {
                        enc.segment_ids[i] == usize::from(i > la + 1)
                    } else {
                        enc.token_ids[i] == v.pad_id()
                    }
            });
        violations += usize::from(!ok);
    }
    let split: Vec<usize> = split_long_sentence(&[0u8; 65], 30).iter().map(Vec::len).collect();
    (
        traced_ok && violations == 0 && split == [30, 30, 5],
        format!(
            "traced 6,5 at 10 -> {traced:?}; 500 random cases, {violations} violations; split 65 by 30 -> {split:?}"
        ),
    )
}

fn sampling() -> Verdict {
    let mut coverage_ok = true;
    for seed in 0..20 {
        let s = build_epoch_schedule(&[100, 300], 32, seed).unwrap();
        let mut seen = [vec![0u32; 100], vec![0u32; 300]];
        for (task, batch) in &s.batches {
            for &i in batch {
                seen[*task][i] += 1;
            }
        }
        coverage_ok &= s.len() == 14 && seen.iter().all(|v| v.iter().all(|&c| c == 1));
    }
    let epochs = 1000u64;
    let (mut first_half, mut total) = (0usize, 0usize);
    for e in 0..epochs {
        let s = build_epoch_schedule(&[100, 300], 32, derive_seed(12345, &[e])).unwrap();
        let small: Vec<bool> = s.batches.iter().map(|(t, _)| *t == 0).collect();
        total += small.iter().filter(|&&b| b).count();
        first_half += small[..7].iter().filter(|&&b| b).count();
    }
    let share = first_half as f64 / (7 * epochs) as f64;
    (
        coverage_ok && total == 4 * epochs as usize && (share - 4.0 / 14.0).abs() <= 0.02,
        format!(
            "14 batches with every example once over 20 seeds: {coverage_ok}; task share in the first half over {epochs} epochs {share:.4} (target {:.4})",
            4.0 / 14.0
        ),
    )
}

fn metrics() -> Verdict {
    const TAGS: [&str; 5] = ["O", "B-D", "I-D", "B-C", "I-C"];
    let mut r = rng(2024);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let golds: Vec<Vec<&str>> = (0..r.random_range(1..4))
            .map(|_| (0..r.random_range(0..12)).map(|_| TAGS[r.random_range(0..5)]).collect())
            .collect();
        let preds: Vec<Vec<&str>> = golds
            .iter()
            .map(|g| {
                g.iter()
                    .map(|&t| {
                        if r.random_bool(0.7) {
                            t
                        } else {
                            TAGS[r.random_range(0..5)]
                        }
                    })
                    .collect()
            })
            .collect();
        mismatches += usize::from(entity_f1(&preds, &golds).unwrap().value != span_f1(&preds, &golds));
    }
    let m = micro_f1(&[1, 2, 2, 0], &[1, 1, 2, 0], &[1, 2]).unwrap();
    let third = 2.0 / 3.0;
    let micro_ok = [m.precision.unwrap(), m.recall.unwrap(), m.value]
        .iter()
        .all(|x| (x - third).abs() <= 1e-12);
    let p = pearson(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap().value;
    (
        mismatches == 0 && micro_ok && (p - 0.8).abs() <= 1e-12,
        format!("entity F1 vs span oracle on 1000 cases: {mismatches} mismatches; micro F1 example {:.12}; pearson example {p:.12}", m.value),
    )
}

fn small(train: usize, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        seed,
        train,
        dev: 16,
        test: 16,
        ..SyntheticConfig::default()
    }
}

fn single_task_equivalence() -> Verdict {
    let (vocab, rel, _) = synthetic_task("rel", &small(40, 2));
    let model = Model::new(
        tiny_encoder(vocab.len()),
        vec![rel.spec.clone()],
        ParamSource::Random { seed: 9 },
        9,
    )
    .unwrap();
    let cfg = TrainConfig {
        trace: true,
        ..desk_train(3, 5)
    };
    let a = mtl_refine(model.clone(), std::slice::from_ref(&rel), &cfg).unwrap();
    let b = train_single_task(model, &rel, &cfg).unwrap();
    let same = a.trajectory == b.trajectory && a.model.params == b.model.params && a.log == b.log;
    (
        same && !a.trajectory.is_empty(),
        format!("{} steps, trajectories bitwise identical: {same}", a.trajectory.len()),
    )
}

fn fine_tune_contract() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;

    // Head replacement and zero-epoch fine-tuning leave the encoder alone.
    let (vocab, rel, _) = synthetic_task("rel", &small(16, 1));
    let (_, ner, _) = synthetic_task("ner", &small(16, 1));
    let model = Model::new(
        tiny_encoder(vocab.len()),
        vec![rel.spec.clone(), ner.spec.clone()],
        ParamSource::Random { seed: 4 },
        4,
    )
    .unwrap();
    let mut replaced = model.clone();
    replaced.replace_head(&ner.spec, 77).unwrap();
    let zero = fine_tune(
        &model,
        &ner,
        &TrainConfig {
            epochs: 0,
            ..desk_train(0, 3)
        },
    )
    .unwrap();
    let untouched = replaced.shared() == model.shared() && zero.model.shared() == model.shared();
    let fresh =
        replaced.params.with_prefix(&ner.spec.param_prefix()) != model.params.with_prefix(&ner.spec.param_prefix());
    ok &= untouched && fresh;
    notes.push(format!("shared params unchanged by head replacement: {untouched}"));

    // Zero learning rate changes nothing.
    let refine = mtl_refine(
        model.clone(),
        &[rel.clone(), ner.clone()],
        &TrainConfig {
            lr: 0.0,
            ..desk_train(2, 0)
        },
    )
    .unwrap();
    let tuned = fine_tune(
        &model,
        &ner,
        &TrainConfig {
            lr: 0.0,
            ..desk_train(2, 3)
        },
    )
    .unwrap();
    let no_op = refine.model.params == model.params && tuned.model.params == zero.model.params;
    ok &= no_op;
    notes.push(format!("lr=0 no-op: {no_op}"));

    // Every head kind memorizes 32 examples.
    for name in ["sim", "rel", "nli", "ner"] {
        let (vocab, task, _) = synthetic_task(name, &small(32, 3));
        let base = Model::new(tiny_encoder(vocab.len()), vec![], ParamSource::Random { seed: 1 }, 1).unwrap();
        let cfg = memorize(30);
        let out = fine_tune(&base, &task, &cfg).unwrap();
        let first_epoch = out.log.rows.iter().position(|r| r.loss < 0.05).map(|i| i + 1);
        let train_metric = out.model.evaluate(name, &task.train).unwrap().value;
        let memorized = first_epoch.is_some() || train_metric == 1.0;
        ok &= memorized;
        let last = out.log.rows.last().unwrap().loss;
        notes.push(format!(
            "{name}: final loss {last:.4}, loss<0.05 from epoch {}, train metric {train_metric:.3}",
            first_epoch.map_or("-".into(), |e| e.to_string())
        ));
    }
    (ok, notes.join("; "))
}

/// Small batches at a high rate, without dropout or model selection.
fn memorize(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        batch_size: 4,
        dropout: 0.0,
        select_best: false,
        ..desk_train(epochs, 2)
    }
}

const TINY_ENCODER: &str = "
[encoder]
max_positions = 64
hidden_size = 32
num_layers = 2
num_heads = 2
ff_size = 64
";

fn desk_config(body: &str) -> ExperimentConfig {
    let text = format!("{body}\n{TINY_ENCODER}");
    ExperimentConfig::parse(&text, Path::new(".")).unwrap()
}

const MTL_GAIN_CONFIG: &str = "
[global]
max_len = 64
stages = [\"single\", \"refine\", \"finetune\"]
[synthetic]
[stage.single]
lr = 3e-3
batch_size = 16
weight_decay = 0.0
epochs = 30
[stage.refine]
lr = 3e-3
batch_size = 16
weight_decay = 0.0
epochs = 20
[stage.finetune]
lr = 3e-3
batch_size = 16
weight_decay = 0.0
epochs = 30
";

fn mtl_gain() -> Verdict {
    let seeds = [0u64, 1, 2, 3, 4];
    let reports: Vec<RunReport> = seeds
        .iter()
        .map(|&s| run_experiment(desk_config(MTL_GAIN_CONFIG).with_seed(s), None).unwrap())
        .collect();
    let tasks = reports[0].tasks.clone();
    let column =
        |strategy: &str, t: usize| -> Vec<f64> { reports.iter().map(|r| r.row(strategy).unwrap().values[t]).collect() };
    let mut wins = 0;
    let mut notes = Vec::new();
    for (t, name) in tasks.iter().enumerate() {
        let single = median(&column(SINGLE, t));
        let mtl = median(&column(FINETUNE, t));
        wins += usize::from(mtl >= single);
        notes.push(format!("{name} {mtl:.4} vs {single:.4}"));
    }
    let avg = |strategy: &str| {
        median(
            &reports
                .iter()
                .map(|r| r.row(strategy).unwrap().avg())
                .collect::<Vec<_>>(),
        )
    };
    let (mtl_avg, single_avg) = (avg(FINETUNE), avg(SINGLE));
    (
        wins >= 3 && mtl_avg >= single_avg,
        format!(
            "medians over 5 seeds, fine-tuned MTL vs single-task: {}; wins {wins}/4; Avg {mtl_avg:.4} vs {single_avg:.4}",
            notes.join(", ")
        ),
    )
}

const PAIRWISE_CONFIG: &str = "
[global]
max_len = 64
pairwise_seeds = [0, 1, 2]
[synthetic]
[stage.single]
lr = 3e-3
batch_size = 16
weight_decay = 0.0
epochs = 5
[stage.refine]
lr = 3e-3
batch_size = 16
weight_decay = 0.0
epochs = 5
";

fn pairwise() -> Verdict {
    let constructed = [
        label_edge(&[0.02], 0.005).1,
        label_edge(&[-0.02], 0.005).1,
        label_edge(&[0.001], 0.005).1,
    ];
    let labels_ok = constructed == [EdgeLabel::Improves, EdgeLabel::Decreases, EdgeLabel::NoEffect];

    let config = desk_config(PAIRWISE_CONFIG);
    let matrix = pairwise_mtl(&config, None).unwrap();
    let edges_ok = matrix.edges.len() == 12
        && matrix
            .tasks
            .iter()
            .all(|s| matrix.tasks.iter().all(|t| (s == t) != matrix.edge(s, t).is_some()));
    // Rerunning one seed reproduces its entries of the matrix exactly.
    let again = pairwise_seed(&config, 1, None).unwrap();
    let n = matrix.tasks.len();
    let deterministic = (0..n).all(|s| {
        (0..n).filter(|&t| t != s).all(|t| {
            let e = matrix.edge(&matrix.tasks[s], &matrix.tasks[t]).unwrap();
            e.baseline[1].to_bits() == again.baseline[t].to_bits()
                && e.joint[1].to_bits() == again.joint[s][t].to_bits()
        })
    });
    let counts = [EdgeLabel::Improves, EdgeLabel::Decreases, EdgeLabel::NoEffect]
        .map(|l| format!("{l} {}", matrix.edges.iter().filter(|e| e.label == l).count()));
    (
        labels_ok && edges_ok && deterministic,
        format!(
            "constructed deltas -> {constructed:?}; 4 tasks -> {} directed edges ({}); seed rerun bitwise identical: {deterministic}",
            matrix.edges.len(),
            counts.join(", ")
        ),
    )
}

const DETERMINISM_CONFIG: &str = "
[global]
max_len = 64
stages = [\"pretrain\", \"single\", \"refine\", \"finetune\"]
[synthetic]
train = 32
dev = 8
test = 8
corpus_sentences = 40
[stage.pretrain]
lr = 3e-3
batch_size = 8
epochs = 1
[stage.single]
lr = 3e-3
batch_size = 8
epochs = 1
[stage.refine]
lr = 3e-3
batch_size = 8
epochs = 2
[stage.finetune]
lr = 3e-3
batch_size = 8
epochs = 1
";

fn read_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Verdict {
    let dirs = [
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    ];
    for (d, seed) in dirs.iter().zip([7, 7, 8]) {
        run_experiment(desk_config(DETERMINISM_CONFIG).with_seed(seed), Some(d.path())).unwrap();
    }
    let (a, b, c) = (
        read_dir(dirs[0].path()),
        read_dir(dirs[1].path()),
        read_dir(dirs[2].path()),
    );
    let identical = a == b;
    let seed_matters = a != c;

    let ckpt = dirs[0].path().join("refine.ckpt");
    let model = load_checkpoint(&ckpt).unwrap();
    let resaved = dirs[0].path().join("resaved.ckpt");
    save_checkpoint(&model, &resaved).unwrap();
    let bytes = std::fs::read(&ckpt).unwrap();
    let round_trip = std::fs::read(&resaved).unwrap() == bytes && model.params == model.params.round_to_f32();

    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    let mut version = bytes.clone();
    version[8] = 99;
    let truncated = bytes[..bytes.len() - 3].to_vec();
    let mut nan = bytes.clone();
    let end = nan.len();
    nan[end - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    let rejected = [
        matches!(from_bytes(&bad_magic), Err(CheckpointError::BadMagic)),
        matches!(from_bytes(&version), Err(CheckpointError::Version { found: 99, .. })),
        matches!(from_bytes(&truncated), Err(CheckpointError::TruncatedPayload { .. })),
        matches!(from_bytes(&nan), Err(CheckpointError::NonFinite(_))),
        matches!(from_bytes(&bytes[..10]), Err(CheckpointError::TruncatedHeader(10))),
    ];
    let all_rejected = rejected.iter().all(|&r| r);
    let defects = from_bytes(&truncated).err().map(|e| e.to_string()).unwrap_or_default();
    (
        identical && seed_matters && round_trip && all_rejected,
        format!(
            "{} artifacts byte-identical across reruns: {identical}; other seed differs: {seed_matters}; load/save round trip bitwise: {round_trip}; corruptions rejected {rejected:?} (e.g. \"{defects}\")",
            a.len()
        ),
    )
}

const PRETRAIN_CONFIG: &str = "
[global]
max_len = 64
mask_prob = 0.25
stages = [\"pretrain\", \"single\"]
[synthetic]
tasks = [\"ner\"]
[stage.pretrain]
lr = 5e-3
batch_size = 4
weight_decay = 0.0
dropout = 0.0
epochs = 20
[stage.single]
lr = 3e-3
batch_size = 16
weight_decay = 0.0
epochs = 10
";

/// A wider encoder than the other checks: at width 32 the masked-token loss
/// sits on a plateau for the first 25 or so epochs.
const PRETRAIN_ENCODER: &str = "
[encoder]
max_positions = 64
hidden_size = 64
num_layers = 2
num_heads = 4
ff_size = 128
";

fn pretraining() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    let (mut pre, mut rand) = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let text = format!("{PRETRAIN_CONFIG}\n{PRETRAIN_ENCODER}");
        let config = ExperimentConfig::parse(&text, Path::new(".")).unwrap().with_seed(seed);
        let exp = Experiment::prepare(config).unwrap();
        let inputs = prepare_corpus(&exp.corpus, &exp.vocab, exp.config.global.max_len).unwrap();
        let outcome = exp.pretrain().unwrap();
        let untrained = TrainConfig {
            epochs: 0,
            ..exp.config.stages.pretrain.clone()
        };
        let fresh = mlm_pretrain(&exp.encoder, &inputs, &exp.vocab, &untrained, 0.15).unwrap();
        let initial = mlm_eval_loss(&fresh.model.params, &exp.encoder, &inputs, &exp.vocab, 0.15, 99).unwrap();
        let trained = mlm_eval_loss(&outcome.model.params, &exp.encoder, &inputs, &exp.vocab, 0.15, 99).unwrap();
        let ln_v = uniform_loss(exp.vocab.len());
        let init_ok = (initial - ln_v).abs() <= 0.1 * ln_v;
        let drop_ok = trained < 0.8 * initial;
        ok &= init_ok && drop_ok;
        if seed == 0 {
            notes.push(format!(
                "{} sentences, initial loss {initial:.3} vs ln V {ln_v:.3}, after 20 epochs {trained:.3} ({:.2}x)",
                inputs.len(),
                trained / initial
            ));
        } else if !(init_ok && drop_ok) {
            notes.push(format!("seed {seed}: initial {initial:.3}, trained {trained:.3}"));
        }
        let t = exp.task_index("ner").unwrap();
        let shared = outcome.model.shared();
        let from_pretrained = exp.single(t, Some(&shared)).unwrap();
        let from_random = exp.single(t, None).unwrap();
        pre.push(exp.test_score(&from_pretrained.model, t).unwrap());
        rand.push(exp.test_score(&from_random.model, t).unwrap());
    }
    let (mp, mr) = (median(&pre), median(&rand));
    ok &= mp > mr;
    notes.push(format!(
        "ner entity F1 median over 5 seeds: pretrained {mp:.4} vs random init {mr:.4}"
    ));
    (ok, notes.join("; "))
}
