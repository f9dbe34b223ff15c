//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! to stderr (uncaptured), and the test fails if any criterion fails.
//!
//! The training criteria share runs: the mode ablation's global-association
//! runs are the λ_T = 0.1 point of the sweep, and its proposed-mode runs
//! feed the grounding and text retrieval checks.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lingrid::association::{
    attention_weights, decode_phrase_nll, id_loss, joint_rep, loss_dis, AttentionHead, Decoder, Mode, ScoreHead,
};
use lingrid::config::RunConfig;
use lingrid::datagen::{compose_batch, gen_dataset, BatchConfig, Dataset};
use lingrid::diffcore::{Graph, ParamStore, Tensor};
use lingrid::encoders::pool_neighbors;
use lingrid::evalkit::metrics_from_distances;
use lingrid::gradsuite::{run_suite, SuiteConfig};
use lingrid::pipeline::{
    ablate, load_trained, shirt_grounding, summarize, summary_table, sweep_lambda_t, text_retrieval, train_to_dir,
    RunResult, CHECKPOINT_FILE, METRICS_FILE,
};
use lingrid::textpipe::{extract_phrases, Lexicon};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ABLATION_BUDGET_SECS: f64 = 30.0 * 60.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, outcome: &Outcome) {
    let status = if outcome.pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "[{status}] criterion {id:>2} {name}: {}", outcome.detail);
}

fn gradient_correctness() -> Outcome {
    let report = run_suite(&SuiteConfig::default()).expect("gradient suite runs");
    let worst = report
        .ops
        .iter()
        .chain(&report.losses)
        .map(|c| c.worst)
        .fold(0.0f64, f64::max);
    let losses_ok = report.losses.len() == 5 && report.losses.iter().all(|c| c.checks >= 10);
    Outcome {
        pass: report.passed() && losses_ok && report.seconds < 60.0,
        detail: format!(
            "{} ops, {} losses, worst relative error {worst:.2e} (limit 1e-4), {:.1}s (limit 60s)",
            report.ops.len(),
            report.losses.len(),
            report.seconds
        ),
    }
}

fn analytic_fixed_points() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();

    let identities = 64;
    let classifier = store.add_zeros("cls", &[identities, 16]).unwrap();
    let mut g = Graph::<f64>::new();
    let feats: Vec<_> = (0..8)
        .map(|_| {
            let v: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            g.constant(Tensor::from_f64(&[16], &v))
        })
        .collect();
    let labels: Vec<usize> = (0..8).map(|i| i * 7).collect();
    let l_id = id_loss(&mut g, &store, classifier, &feats, &labels).unwrap();
    let id_err = (g.item(l_id) - (identities as f64).ln()).abs();

    let score = ScoreHead::new(&mut store, &mut rng, "score", 16).unwrap();
    store.value_mut(score.w).data_mut().fill(0.0);
    let pairs: Vec<_> = (0..8).map(|i| (feats[i], feats[(i + 3) % 8], i % 2 == 0)).collect();
    let l_dis = loss_dis(&mut g, &store, &score, &pairs).unwrap();
    let dis_err = (g.item(l_dis) - 2f64.ln()).abs();

    let vocab = 40;
    let embed = store.add_glorot("embed", &[vocab, 6], vocab, 6, &mut rng).unwrap();
    let decoder = Decoder::new(&mut store, &mut rng, vocab, 16, 6, 8).unwrap();
    let (w_oh, w_oe) = decoder.output_maps();
    store.value_mut(w_oh).data_mut().fill(0.0);
    store.value_mut(w_oe).data_mut().fill(0.0);
    let targets = [1, 5, 9, 33, 2];
    let nll = decode_phrase_nll(&mut g, &store, &decoder, embed, feats[0], &targets).unwrap();
    let per_word = g.item(nll) / (targets.len() - 1) as f64;
    let nll_err = (per_word - (vocab as f64).ln()).abs();

    let head = AttentionHead::new(&mut store, &mut rng, "att", 16).unwrap();
    let mut att_err = 0.0f64;
    for _ in 0..1000 {
        for w in store.value_mut(head.w).data_mut() {
            *w = rng.gen_range(-3.0..3.0);
        }
        let pooled: Vec<f64> = (0..8 * 16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let phrase: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64(&[8, 16], &pooled));
        let t = g.constant(Tensor::from_f64(&[16], &phrase));
        let r = attention_weights(&mut g, &store, &head, p, t);
        att_err = att_err.max((g.value(r).data().iter().sum::<f64>() - 1.0).abs());
    }

    let worst = id_err.max(dis_err).max(nll_err).max(att_err);
    Outcome {
        pass: worst <= 1e-9,
        detail: format!(
            "|L_I - ln I| {id_err:.1e}, |L_dis - ln 2| {dis_err:.1e}, |NLL/word - ln D| {nll_err:.1e}, \
             max |sum r - 1| over 1000 inputs {att_err:.1e} (limit 1e-9)"
        ),
    }
}

fn structural_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut notes = Vec::new();
    let mut pass = true;

    let mut swap_exact = true;
    for _ in 0..200 {
        let a: Vec<f64> = (0..32).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..32).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut g = Graph::<f64>::new();
        let (an, bn) = (g.constant(Tensor::from_f64(&[32], &a)), g.constant(Tensor::from_f64(&[32], &b)));
        let ab = joint_rep(&mut g, an, bn);
        let ba = joint_rep(&mut g, bn, an);
        swap_exact &= g.value(ab).data() == g.value(ba).data();
    }
    pass &= swap_exact;
    notes.push(format!("joint_rep swap exact: {swap_exact}"));

    // A constant shift of every logit at every step: each embedding row has a
    // unit first coordinate, so adding `c` to the first column of the
    // embedding output map adds `c` to all logits.
    let (vocab, d_e) = (30, 5);
    let mut store = ParamStore::<f64>::new();
    let embed = store.add_glorot("embed", &[vocab, d_e], vocab, d_e, &mut rng).unwrap();
    for row in store.value_mut(embed).data_mut().chunks_mut(d_e) {
        row[0] = 1.0;
    }
    let decoder = Decoder::new(&mut store, &mut rng, vocab, 8, d_e, 6).unwrap();
    let visual: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let nll = |store: &ParamStore<f64>| {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::from_f64(&[8], &visual));
        let n = decode_phrase_nll(&mut g, store, &decoder, embed, v, &[1, 7, 12, 2]).unwrap();
        g.item(n)
    };
    let base = nll(&store);
    let mut shift_err = 0.0f64;
    for shift in [-25.0, -1.5, 0.3, 4.0, 40.0] {
        let mut shifted = store.clone();
        let (_, w_oe) = decoder.output_maps();
        for row in shifted.value_mut(w_oe).data_mut().chunks_mut(d_e) {
            row[0] += shift;
        }
        shift_err = shift_err.max((nll(&shifted) - base).abs());
    }
    pass &= shift_err <= 1e-9;
    notes.push(format!("decoder NLL shift error {shift_err:.1e}"));

    let mut monotone_exact = true;
    for _ in 0..50 {
        let dist: Vec<Vec<f64>> = (0..6).map(|_| (0..18).map(|_| rng.gen_range(0.0..5.0)).collect()).collect();
        let q_ids: Vec<usize> = (100..106).collect();
        let q_labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let g_ids: Vec<usize> = (0..18).collect();
        let g_labels: Vec<usize> = (0..18).map(|i| i % 3).collect();
        let base = metrics_from_distances(&dist, &q_ids, &q_labels, &g_ids, &g_labels);
        for f in [|d: f64| d.exp(), |d: f64| d.sqrt(), |d: f64| 10.0 * d - 3.0] {
            let t: Vec<Vec<f64>> = dist.iter().map(|r| r.iter().map(|&d| f(d)).collect()).collect();
            monotone_exact &= metrics_from_distances(&t, &q_ids, &q_labels, &g_ids, &g_labels) == base;
        }
    }
    pass &= monotone_exact;
    notes.push(format!("mAP/CMC monotone invariance exact: {monotone_exact}"));

    let mut pool_err = 0.0f64;
    for _ in 0..100 {
        let (rows, cols, d) = (8, 4, 16);
        let psi: Vec<f64> = (0..rows * cols * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut g = Graph::<f64>::new();
        let node = g.constant(Tensor::from_f64(&[rows * cols, d], &psi));
        let (pooled, grid) = pool_neighbors(&mut g, node, (rows, cols), (2, 2)).unwrap();
        let pooled = g.value(pooled).to_f64();
        for c in 0..d {
            let before = (0..rows * cols).map(|k| psi[k * d + c]).sum::<f64>() / (rows * cols) as f64;
            let kp = grid.0 * grid.1;
            let after = (0..kp).map(|k| pooled[k * d + c]).sum::<f64>() / kp as f64;
            pool_err = pool_err.max((before - after).abs());
        }
    }
    pass &= pool_err <= 1e-6;
    notes.push(format!("pooling mean error {pool_err:.1e}"));

    Outcome { pass, detail: notes.join(", ") }
}

fn mean_map(results: &[RunResult], variant: &str) -> Option<f64> {
    summarize(results)
        .into_iter()
        .find(|r| r.variant == variant && r.failed == 0)
        .map(|r| r.mean.map * 100.0)
}

fn ablation_trend(results: &[RunResult], seconds: f64) -> Outcome {
    let get = |m: Mode| mean_map(results, m.as_str());
    let (Some(basel), Some(gda), Some(lra), Some(proposed)) =
        (get(Mode::Basel), get(Mode::Gda), get(Mode::Lra), get(Mode::Proposed))
    else {
        return Outcome {
            pass: false,
            detail: "some runs failed".into(),
        };
    };
    let pass = proposed >= basel + 2.0 && gda > basel && lra > basel && proposed >= gda.max(lra) && seconds <= ABLATION_BUDGET_SECS;
    Outcome {
        pass,
        detail: format!(
            "mean mAP basel {basel:.2}, GDA {gda:.2}, LRA {lra:.2}, proposed {proposed:.2} \
             (need proposed >= basel + 2, GDA and LRA > basel, proposed >= both); {seconds:.0}s of {ABLATION_BUDGET_SECS:.0}s"
        ),
    }
}

fn lambda_t_trend(ablation: &[RunResult], sweep: &[RunResult]) -> Outcome {
    let at = |v: &str| mean_map(sweep, v);
    let (Some(zero), Some(mid), Some(one)) = (at("lambda_t=0"), mean_map(ablation, Mode::Gda.as_str()), at("lambda_t=1"))
    else {
        return Outcome {
            pass: false,
            detail: "some runs failed".into(),
        };
    };
    let strict = mid >= zero && mid >= one;
    let pass = mid + 0.5 >= zero && mid + 0.5 >= one;
    Outcome {
        pass,
        detail: format!(
            "mean mAP at lambda_T 0: {zero:.2}, 0.1: {mid:.2}, 1: {one:.2}; 0.1 is {} (ties within 0.5 points allowed)",
            if strict { "the best" } else if pass { "tied with the best" } else { "not the best" }
        ),
    }
}

fn grounding_and_retrieval(ds: &Dataset, runs_dir: &Path) -> (Outcome, Outcome) {
    let (mut phrases, mut grounded, mut mass, mut chance_g) = (0usize, 0usize, 0.0, 0.0);
    let (mut queries, mut top1, mut chance_t) = (0usize, 0.0, 0.0);
    for seed in SEEDS {
        let run = load_trained(&runs_dir.join(format!("{}_s{seed}", Mode::Proposed))).expect("proposed run");
        let g = shirt_grounding(&run, ds, 0.6).expect("grounding");
        phrases += g.phrases;
        grounded += g.grounded;
        mass += g.mean_mass * g.phrases as f64;
        chance_g = g.chance;
        let t = text_retrieval(&run, ds).expect("retrieval");
        queries += t.queries;
        top1 += t.top1 * t.queries as f64;
        chance_t = t.chance;
    }
    let frac = grounded as f64 / phrases.max(1) as f64;
    let grounding = Outcome {
        pass: phrases > 0 && frac >= 0.7,
        detail: format!(
            "{grounded}/{phrases} shirt phrases over {} runs have torso mass >= 0.6 ({:.1}%, need 70%); \
             mean torso mass {:.3}, chance {chance_g:.3}",
            SEEDS.len(),
            100.0 * frac,
            mass / phrases.max(1) as f64
        ),
    };
    let acc = top1 / queries.max(1) as f64;
    let retrieval = Outcome {
        pass: acc >= 3.0 * chance_t,
        detail: format!(
            "text-to-image top-1 {acc:.4} over {queries} queries; chance {chance_t:.4}, need >= {:.4}",
            3.0 * chance_t
        ),
    };
    (grounding, retrieval)
}

fn chunker_golden() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/chunker_golden.tsv");
    let text = fs::read_to_string(path).expect("golden file");
    let lexicon = Lexicon::default();
    let (mut total, mut agree, mut kinds) = (0, 0, std::collections::BTreeSet::new());
    let mut mismatches = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let (sentence, expected) = line.split_once('\t').unwrap_or((line, ""));
        let got: Vec<String> = extract_phrases(sentence, &lexicon)
            .iter()
            .map(|p| {
                kinds.insert(p.kind.to_string());
                format!("{}/{}", p.text(), p.kind)
            })
            .collect();
        total += 1;
        if got.join(" | ") == expected {
            agree += 1;
        } else {
            mismatches.push(sentence.to_string());
        }
    }
    Outcome {
        pass: total == 50 && agree == total && kinds.len() == 2,
        detail: format!(
            "{agree}/{total} sentences agree, phrase kinds seen {kinds:?}{}",
            if mismatches.is_empty() { String::new() } else { format!("; mismatches {mismatches:?}") }
        ),
    }
}

fn determinism(ds: &Dataset) -> Outcome {
    let cfg = RunConfig {
        epochs: 2,
        ..RunConfig::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut outputs = Vec::new();
    for dir in &dirs {
        let run = train_to_dir(&cfg, ds, dir.path()).expect("training");
        let m = lingrid::pipeline::evaluate(&run, ds).expect("evaluation");
        let metrics = dir.path().join(METRICS_FILE);
        lingrid::pipeline::write_metrics(&metrics, &[(cfg.mode.to_string(), cfg.seed, m)]).unwrap();
        outputs.push((
            fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap(),
            fs::read(metrics).unwrap(),
        ));
    }
    let ckpt = outputs[0].0 == outputs[1].0;
    let csv = outputs[0].1 == outputs[1].1;
    Outcome {
        pass: ckpt && csv,
        detail: format!(
            "checkpoint identical: {ckpt} ({} bytes), metrics CSV identical: {csv}",
            outputs[0].0.len()
        ),
    }
}

fn batch_counts(ds: &Dataset) -> Outcome {
    let labels: Vec<usize> = ds.train.iter().map(|t| t.label).collect();
    let cfg = BatchConfig {
        persons: 32,
        tuples_per_person: 2,
        negs_per_image: 6,
    };
    let plan = compose_batch(&labels, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).expect("batch");
    let (pos, neg) = (plan.num_positives(), plan.num_negatives());
    Outcome {
        pass: pos == 128 && neg == 384,
        detail: format!("{pos} positives, {neg} negatives (need 128 and 384)"),
    }
}

#[test]
fn acceptance_criteria() {
    let mut outcomes: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id, name, o: Outcome| {
        report(id, name, &o);
        outcomes.push((id, name, o));
    };

    record(1, "gradient correctness", gradient_correctness());
    record(2, "analytic fixed points", analytic_fixed_points());
    record(3, "structural invariants", structural_invariants());

    let base = RunConfig::default();
    let ds = gen_dataset(&base.data, &Lexicon::default()).expect("default dataset");
    record(8, "chunker golden file", chunker_golden());
    record(10, "batch composition counts", batch_counts(&ds));
    record(9, "determinism", determinism(&ds));

    let runs = tempfile::tempdir().unwrap();
    let modes = [Mode::Basel, Mode::Gda, Mode::Lra, Mode::Proposed];
    let start = Instant::now();
    let ablation = ablate(&base, &ds, &modes, &SEEDS, Some(runs.path()));
    let seconds = start.elapsed().as_secs_f64();
    let _ = write!(std::io::stderr().lock(), "{}", summary_table(&summarize(&ablation)));
    record(4, "ablation trend", ablation_trend(&ablation, seconds));

    let sweep = sweep_lambda_t(&base, &ds, &[0.0, 1.0], &SEEDS);
    record(5, "lambda_T sweep trend", lambda_t_trend(&ablation, &sweep));

    let (grounding, retrieval) = grounding_and_retrieval(&ds, runs.path());
    record(6, "phrase grounding", grounding);
    record(7, "text-to-image retrieval", retrieval);

    outcomes.sort_by_key(|(id, _, _)| *id);
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "\nacceptance summary:");
    for (id, name, o) in &outcomes {
        let _ = writeln!(err, "  {:>2} {:<28} {}", id, name, if o.pass { "PASS" } else { "FAIL" });
    }
    drop(err);
    let failed: Vec<_> = outcomes.iter().filter(|(_, _, o)| !o.pass).map(|(id, _, _)| *id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
