//! End-to-end acceptance checks. Each check prints one `PASS`/`FAIL` line;
//! the test fails if any check fails.

use std::time::{Duration, Instant};

use meta_sgcl::data::{
    build_sequences, ingest_with, synth_markov_dataset, synth_preference_dataset, Delimiter, IngestOptions,
};
use meta_sgcl::encoder::{encode, Dropout};
use meta_sgcl::eval::{
    evaluate, evaluate_at, metrics_at_k, popularity_report, rank_target, run_ablation, SplitKind, Variant,
};
use meta_sgcl::generator::{decode, predict_scores, ForwardMode};
use meta_sgcl::losses::kl_term;
use meta_sgcl::objective::TrainBatch;
use meta_sgcl::params::{ParamGroup, ParamStore};
use meta_sgcl::rng::{derive, Stream};
use meta_sgcl::trainer::{fit, read_checkpoint, train_epochs, training_loss, write_checkpoint, LogRecord, TrainState};
use meta_sgcl::verification::{
    check_elbo_decomposition, check_mi_bound, gradcheck_model, kl_monte_carlo, kl_numerical_1d, mean_se,
    GaussianToyModel,
};
use meta_sgcl::{Model, ModelConfig, TrainConfig};
use ndarray::Array2;
use rand::Rng as _;

const GRAD_TOL: f64 = 1e-4;
const KL_INTEGRAL_TOL: f64 = 1e-6;
const SE_MULT: f64 = 3.0;
const ABLATION_SE_MULT: f64 = 2.0;
const HR1_MARGIN: f64 = 0.15;
const MEMORIZE_LOSS: f64 = 0.1;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(name: &'static str, pass: bool, detail: String) -> Outcome {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { name, pass, detail }
}

fn assert_all(outcomes: &[Outcome]) {
    let failed: Vec<_> = outcomes
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("{} ({})", o.name, o.detail))
        .collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_items: 7,
        max_len: 5,
        hidden_dim: 4,
        num_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        dropout: 0.0,
        alpha: 0.1,
        beta: 0.2,
        ..Default::default()
    }
}

#[test]
fn gradient_oracle() {
    let start = Instant::now();
    let r = gradcheck_model(&tiny_config(), 1).unwrap();
    let took = start.elapsed();
    let pass = r.max_rel_error < GRAD_TOL && took < Duration::from_secs(60);
    assert_all(&[report(
        "gradient oracle",
        pass,
        format!(
            "max rel err {:.2e} at {} over {} scalars in {took:.1?}",
            r.max_rel_error, r.worst, r.checked
        ),
    )]);
}

#[test]
fn kl_oracle() {
    let start = Instant::now();
    let mut rng = derive(11, Stream::Verify, &[]);
    let (mut mc_ok, mut worst_int) = (0, 0.0f64);
    for _ in 0..100 {
        let mu = rng.random_range(-2.0..2.0);
        let sigma: f64 = rng.random_range(0.2..2.5);
        let closed = kl_term(mu, 2.0 * sigma.ln());
        let (m, se) = kl_monte_carlo(&[mu], &[sigma], 20_000, &mut rng);
        if (m - closed).abs() <= SE_MULT * se {
            mc_ok += 1;
        }
        worst_int = worst_int.max((kl_numerical_1d(mu, sigma) - closed).abs());
    }
    let took = start.elapsed();
    // 3·SE covers 99.7% per draw; allow the expected handful of misses out of 100.
    let pass = mc_ok >= 97 && worst_int < KL_INTEGRAL_TOL && took < Duration::from_secs(60);
    assert_all(&[report(
        "KL oracle",
        pass,
        format!("{mc_ok}/100 within 3 SE, max integration error {worst_int:.2e}, {took:.1?}"),
    )]);
}

#[test]
fn elbo_identity() {
    let start = Instant::now();
    let mut fails = Vec::new();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let toy = GaussianToyModel::random(seed);
        let r = check_elbo_decomposition(&toy, 20_000, seed).unwrap();
        worst = worst.max(r.diff.abs() / r.diff_se);
        if !r.pass {
            fails.push(seed);
        }
    }
    let took = start.elapsed();
    let pass = fails.is_empty() && took < Duration::from_secs(120);
    assert_all(&[report(
        "ELBO identity",
        pass,
        format!("20 toys, worst |diff|/SE {worst:.2}, failing seeds {fails:?}, {took:.1?}"),
    )]);
}

#[test]
fn mi_bound() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for rho in [0.0, 0.5, 0.9] {
        for batch in [8, 64, 256] {
            let r = check_mi_bound(rho, batch, 1.0, 200, 5).unwrap();
            pass &= r.pass;
            lines.push(format!(
                "rho={rho} B={batch}: {:.3}<= {:.3}+3*{:.3}",
                r.bound, r.true_mi, r.bound_se
            ));
        }
    }
    let took = start.elapsed();
    pass &= took < Duration::from_secs(120);
    assert_all(&[report("MI bound", pass, format!("{} ({took:.1?})", lines.join("; ")))]);
}

/// Pessimistic rank by brute-force sort: the target goes after every item
/// with an equal or higher score.
fn sort_rank(scores: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| (a == target).cmp(&(b == target)))
    });
    order.iter().position(|&i| i == target).unwrap() + 1
}

#[test]
fn metrics_oracle() {
    let mut rng = derive(12, Stream::Verify, &[]);
    let mut mismatches = 0;
    let mut ranks = Vec::new();
    for i in 0..10_000 {
        let n = rng.random_range(1..40);
        let scores: Vec<f64> = match i % 4 {
            0 => vec![0.25; n],
            1 => (0..n).map(|_| rng.random_range(0..3) as f64).collect(),
            _ => (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let target = rng.random_range(0..n);
        let rank = rank_target(&scores, target as u32 + 1);
        let oracle = sort_rank(&scores, target);
        if rank != oracle {
            mismatches += 1;
        }
        for k in [1, 5, 10] {
            let (hr, ndcg) = metrics_at_k(&[rank], k).unwrap();
            let (ohr, ondcg) = if oracle <= k {
                (1.0, 1.0 / (oracle as f64 + 1.0).log2())
            } else {
                (0.0, 0.0)
            };
            if hr != ohr || ndcg != ondcg {
                mismatches += 1;
            }
        }
        ranks.push(oracle);
    }
    let (_, ndcg_all) = metrics_at_k(&ranks, 10).unwrap();
    let oracle_all = ranks
        .iter()
        .map(|&r| if r <= 10 { 1.0 / (r as f64 + 1.0).log2() } else { 0.0 })
        .sum::<f64>()
        / ranks.len() as f64;
    if (ndcg_all - oracle_all).abs() > 1e-12 {
        mismatches += 1;
    }
    let (_, hand) = metrics_at_k(&[3], 5).unwrap();
    let pass = mismatches == 0 && hand == 0.5;
    assert_all(&[report(
        "metrics oracle",
        pass,
        format!("{mismatches} mismatches over 10^4 vectors, hand NDCG@5 = {hand}"),
    )]);
}

fn causal_model() -> Model {
    Model::new(ModelConfig {
        num_items: 12,
        max_len: 8,
        hidden_dim: 8,
        num_heads: 2,
        enc_layers: 2,
        dec_layers: 2,
        dropout: 0.0,
        seed: 9,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn causality_and_padding() {
    let mut model = causal_model();
    let seq = vec![0, 0, 3, 5, 7, 2, 9, 4];
    let base = encode(&model, &seq, &mut Dropout::off()).unwrap();
    let mut violations = Vec::new();

    // future items
    for t in 2..7 {
        let mut s = seq.clone();
        for v in s.iter_mut().skip(t + 1) {
            *v = (*v % 12) + 1;
        }
        let h = encode(&model, &s, &mut Dropout::off()).unwrap();
        if (0..=t).any(|i| h.states.row(i) != base.states.row(i)) {
            violations.push(format!("encoder future t={t}"));
        }
    }

    // decoder: future latent rows
    let mut rng = derive(13, Stream::Verify, &[]);
    let z = Array2::from_shape_fn((8, 8), |_| rng.random_range(-1.0..1.0));
    let valid: Vec<bool> = seq.iter().map(|&v| v != 0).collect();
    let dec = decode(&model, &z, &valid, &mut Dropout::off()).unwrap();
    for t in 2..7 {
        let mut z2 = z.clone();
        for i in t + 1..8 {
            z2.row_mut(i).fill(5.0);
        }
        let h = decode(&model, &z2, &valid, &mut Dropout::off()).unwrap();
        if (0..=t).any(|i| h.states.row(i) != dec.states.row(i)) {
            violations.push(format!("decoder future t={t}"));
        }
    }

    // decoder: padded latent rows
    let mut z3 = z.clone();
    z3.row_mut(0).fill(-4.0);
    z3.row_mut(1).fill(9.0);
    let h = decode(&model, &z3, &valid, &mut Dropout::off()).unwrap();
    if (2..8).any(|i| h.states.row(i) != dec.states.row(i)) {
        violations.push("decoder padding".into());
    }

    // padding embedding and padded positions' position embeddings
    let scores = predict_scores(&model, std::slice::from_ref(&seq)).unwrap();
    model.params.value_mut(model.ids.item_embedding).row_mut(0).fill(3.0);
    let pos = model.ids.position_embedding;
    model.params.value_mut(pos).row_mut(0).fill(-2.0);
    model.params.value_mut(pos).row_mut(1).fill(0.7);
    let h = encode(&model, &seq, &mut Dropout::off()).unwrap();
    if (2..8).any(|i| h.states.row(i) != base.states.row(i)) {
        violations.push("encoder padding".into());
    }
    if predict_scores(&model, std::slice::from_ref(&seq)).unwrap() != scores {
        violations.push("scores padding".into());
    }
    let pass = violations.is_empty();
    assert_all(&[report(
        "causality & padding",
        pass,
        format!("violations {violations:?}"),
    )]);
}

fn group_values(store: &ParamStore, group: ParamGroup) -> Vec<Array2<f64>> {
    store
        .ids()
        .filter(|&id| store.group(id) == group)
        .map(|id| store.value(id).clone())
        .collect()
}

#[test]
fn stage_isolation() {
    let ds = synth_markov_dataset(40, 12, 10, 3.0, 21).unwrap();
    let pairs = meta_sgcl::trainer::training_pairs(&ds);
    let cfg = ModelConfig {
        num_items: 12,
        max_len: ds.max_len,
        hidden_dim: 8,
        num_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        dropout: 0.1,
        alpha: 0.5,
        beta: 0.2,
        seed: 4,
        ..Default::default()
    };
    let mut s = TrainState::new(
        cfg,
        TrainConfig {
            lr: 0.01,
            ..Default::default()
        },
    )
    .unwrap();
    let mut broken = Vec::new();
    for step in 0..100u64 {
        let rows: Vec<usize> = (0..8).map(|i| (step as usize * 8 + i) % pairs.len()).collect();
        let batch = TrainBatch {
            inputs: rows.iter().map(|&r| pairs[r].0.clone()).collect(),
            targets: rows.iter().map(|&r| pairs[r].1.clone()).collect(),
        };
        let prime = group_values(&s.model.params, ParamGroup::SigmaPrime);
        s.stage1_step(&batch, &mut ForwardMode::train(0.1, 4, &[step, 1]))
            .unwrap();
        if group_values(&s.model.params, ParamGroup::SigmaPrime) != prime {
            broken.push(format!("stage 1 step {step}"));
        }
        let main = group_values(&s.model.params, ParamGroup::Main);
        let prime = group_values(&s.model.params, ParamGroup::SigmaPrime);
        s.stage2_step(&batch.inputs, &mut ForwardMode::train(0.1, 4, &[step, 2]))
            .unwrap();
        if group_values(&s.model.params, ParamGroup::Main) != main {
            broken.push(format!("stage 2 step {step}"));
        }
        if group_values(&s.model.params, ParamGroup::SigmaPrime) == prime {
            broken.push(format!("stage 2 idle at step {step}"));
        }
    }
    assert_all(&[report(
        "stage isolation",
        broken.is_empty(),
        format!("100 meta steps, violations {broken:?}"),
    )]);
}

#[test]
fn learning_signal() {
    let start = Instant::now();
    let ds = synth_markov_dataset(100, 20, 30, 5.0, 7).unwrap();
    let mc = ModelConfig {
        num_items: 20,
        max_len: ds.max_len,
        hidden_dim: 32,
        num_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        dropout: 0.1,
        ..Default::default()
    };
    let tc = TrainConfig {
        lr: 0.005,
        batch_size: 32,
        max_epochs: 200,
        patience: 200,
        ..Default::default()
    };
    let (state, _) = fit(&ds, mc, tc).unwrap();
    let model = state.best_model();
    let hr1 = evaluate_at(&model, &ds, SplitKind::Test, &[1]).unwrap().hr_at(1);
    let pop = popularity_report(&ds, SplitKind::Test, &[1]).unwrap().hr_at(1);
    let took = start.elapsed();
    let signal = report(
        "learning signal (HR@1 over popularity)",
        hr1 - pop >= HR1_MARGIN && took < Duration::from_secs(300),
        format!(
            "model {hr1:.3} vs popularity {pop:.3} after {} epochs, {took:.1?}",
            state.epoch
        ),
    );

    let toy = synth_markov_dataset(30, 20, 12, 0.0, 11).unwrap();
    let base = ModelConfig {
        num_items: 20,
        max_len: toy.max_len,
        hidden_dim: 32,
        num_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        dropout: 0.0,
        ..Default::default()
    };
    let mc = Variant::NoClKl.apply(&base);
    let tc = TrainConfig {
        lr: 0.01,
        batch_size: 32,
        max_epochs: 300,
        patience: 300,
        ..Default::default()
    };
    let mut state = TrainState::new(mc, tc).unwrap();
    train_epochs(&mut state, &toy, None, &mut |_| Ok(())).unwrap();
    let rec = training_loss(&state.model, &toy).unwrap().l_rs1;
    let memo = report(
        "memorization (-clkl training rec_loss)",
        rec < MEMORIZE_LOSS,
        format!("rec_loss {rec:.4} after 300 epochs on 30 users"),
    );
    assert_all(&[signal, memo]);
}

fn json_log(log: &[LogRecord]) -> String {
    log.iter().map(|r| r.to_json_line()).collect::<Vec<_>>().join("\n")
}

#[test]
fn determinism_and_resume() {
    let ds = synth_markov_dataset(40, 12, 12, 3.0, 5).unwrap();
    let mc = ModelConfig {
        num_items: 12,
        max_len: ds.max_len,
        hidden_dim: 8,
        num_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        ..Default::default()
    };
    let tc = TrainConfig {
        lr: 0.01,
        batch_size: 16,
        max_epochs: 6,
        ..Default::default()
    };
    let (a, la) = fit(&ds, mc.clone(), tc.clone()).unwrap();
    let (b, lb) = fit(&ds, mc.clone(), tc.clone()).unwrap();
    let repro = report(
        "determinism",
        json_log(&la) == json_log(&lb) && a.model.params == b.model.params,
        format!("{} log records compared byte for byte", la.len()),
    );

    let mut first = TrainState::new(mc, tc).unwrap();
    let mut log = Vec::new();
    train_epochs(&mut first, &ds, Some(3), &mut |r| {
        log.push(r);
        Ok(())
    })
    .unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&first, &mut buf).unwrap();
    let mut resumed = read_checkpoint(&mut buf.as_slice()).unwrap();
    train_epochs(&mut resumed, &ds, None, &mut |r| {
        log.push(r);
        Ok(())
    })
    .unwrap();
    let same = json_log(&log) == json_log(&la)
        && resumed.model.params == a.model.params
        && evaluate(&resumed.best_model(), &ds, SplitKind::Test).unwrap()
            == evaluate(&a.best_model(), &ds, SplitKind::Test).unwrap();
    let resume = report(
        "resume",
        same,
        format!("3 + {} epochs vs {} uninterrupted", resumed.epoch - 3, a.epoch),
    );
    assert_all(&[repro, resume]);
}

#[test]
fn directional_ablation() {
    let start = Instant::now();
    let seeds = 0..3u64;
    let mut per_variant: Vec<Vec<f64>> = vec![Vec::new(); Variant::ALL.len()];
    for seed in seeds {
        let ds = synth_preference_dataset(200, 30, 20, 3, 3.0, 100 + seed).unwrap();
        let mc = ModelConfig {
            num_items: 30,
            max_len: ds.max_len,
            hidden_dim: 32,
            num_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            dropout: 0.1,
            alpha: 0.1,
            beta: 0.2,
            seed,
            ..Default::default()
        };
        let tc = TrainConfig {
            lr: 0.005,
            batch_size: 64,
            max_epochs: 60,
            patience: 60,
            seed,
            ..Default::default()
        };
        for (i, row) in run_ablation(&ds, &mc, &tc).unwrap().iter().enumerate() {
            per_variant[i].push(row.report.ndcg_at(10));
        }
    }
    let idx = |v: Variant| Variant::ALL.iter().position(|&x| x == v).unwrap();
    let mean = |v: Variant| mean_se(&per_variant[idx(v)]).0;
    let diff_se = |a: Variant, b: Variant| {
        let d: Vec<f64> = per_variant[idx(a)]
            .iter()
            .zip(&per_variant[idx(b)])
            .map(|(x, y)| x - y)
            .collect();
        mean_se(&d)
    };
    let (full, cl, kl, clkl) = (
        mean(Variant::Full),
        mean(Variant::NoCl),
        mean(Variant::NoKl),
        mean(Variant::NoClKl),
    );
    let best_single = if cl >= kl { Variant::NoCl } else { Variant::NoKl };
    let (d_top, se_top) = diff_se(Variant::Full, best_single);
    let (d_mid, se_mid) = diff_se(best_single, Variant::NoClKl);
    let (d_gap, se_gap) = diff_se(Variant::Full, Variant::NoClKl);
    let pass =
        d_top >= -ABLATION_SE_MULT * se_top && d_mid >= -ABLATION_SE_MULT * se_mid && d_gap > ABLATION_SE_MULT * se_gap;
    assert_all(&[report(
        "directional ablation",
        pass,
        format!(
            "NDCG@10 full {full:.4}, -cl {cl:.4}, -kl {kl:.4}, -clkl {clkl:.4}; full - (-clkl) = {d_gap:.4} (SE {se_gap:.4}), {:.1?}",
            start.elapsed()
        ),
    )]);
}

/// Set `ML1M_RATINGS` to a `ratings.dat` path to run.
#[test]
#[ignore]
fn ml1m_recipe() {
    let Ok(path) = std::env::var("ML1M_RATINGS") else {
        println!("SKIP ML-1M recipe: ML1M_RATINGS not set");
        return;
    };
    let opts = IngestOptions {
        delimiter: Delimiter::DoubleColon,
        min_user_len: 5,
        min_item_len: 5,
        ..Default::default()
    };
    let (records, _) = ingest_with(path.as_ref(), &opts).unwrap();
    let (ds, _) = build_sequences(&records, 200).unwrap();
    let mc = ModelConfig {
        num_items: ds.num_items(),
        max_len: 200,
        ..Default::default()
    };
    let (state, _) = fit(&ds, mc, TrainConfig::default()).unwrap();
    let r = evaluate(&state.best_model(), &ds, SplitKind::Test).unwrap();
    let (hr, ndcg) = (r.hr_at(10), r.ndcg_at(10));
    // Aspirational only: +-20% relative around the reference numbers.
    let near = |x: f64, t: f64| (x - t).abs() <= 0.2 * t;
    report(
        "ML-1M recipe (non-gating)",
        near(hr, 0.3560) && near(ndcg, 0.1953),
        format!("HR@10 {hr:.4} (0.3560), NDCG@10 {ndcg:.4} (0.1953)"),
    );
}
