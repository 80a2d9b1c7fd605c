//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Oracle criteria (1-4, 11) and determinism (12) fail the process. The
//! scaled-trend criteria (5-10) report their outcome honestly but only fail
//! the process when `LAE_ACCEPTANCE_STRICT=1`, because they are empirical
//! results of a desk-scale experiment rather than correctness properties.

mod common;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{labeling_probs, random_grid};
use lae_core::config::ExperimentConfig;
use lae_core::ctc::{ctc_loss, min_frames, prefix_beam_search};
use lae_core::eval::fmt_rate;
use lae_core::experiment::{
    report_files, run_experiment, ExperimentReport, LAE, LAE_MONO, LAE_MONO_SIMU, SIG_LAE_VS_VANILLA, SIG_SIMU, VANILLA,
};
use lae_core::model::{combine_tensors, Architecture, LaeModel, ModelConfig};
use lae_core::nnet::gradcheck::{check, op_suite};
use lae_core::nnet::{Graph, Mode, ParamId, Tensor};
use lae_core::sim::{gen_corpus, CorpusSpec, Partition, SimConfig, Utterance};
use lae_core::train::{combine_objective, mask_targets, train, utterance_loss, TrainConfig};
use lae_core::vocab::{Lang, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STOCK_CONFIG: &str = include_str!("../../../configs/stock.cfg");

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn line(id: usize, name: &'static str, pass: bool, detail: String) -> Line {
    let l = Line { id, name, pass, detail };
    println!(
        "[{}] criterion {:>2} {}: {}",
        if l.pass { "PASS" } else { "FAIL" },
        l.id,
        l.name,
        l.detail
    );
    l
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn ctc_oracle() -> Line {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut grids, mut checked, mut worst, mut worst_total) = (0, 0, 0.0f64, 0.0f64);
    while grids < 250 {
        let t = rng.gen_range(1..=6);
        let v = rng.gen_range(2..=4);
        let grid = random_grid(&mut rng, t, v);
        for (label, p) in labeling_probs(&grid, t, v) {
            let r = ctc_loss(&grid, t, v, &label);
            worst = worst.max(if r.feasible { ((-r.loss).exp() - p).abs() } else { f64::INFINITY });
            checked += 1;
        }
        // Partition: every target the frames can carry, enumerated directly.
        let total: f64 = all_targets(v, t)
            .iter()
            .filter(|y| min_frames(y) <= t)
            .map(|y| (-ctc_loss(&grid, t, v, y).loss).exp())
            .sum();
        worst_total = worst_total.max((total - 1.0).abs());
        grids += 1;
    }
    let elapsed = start.elapsed();
    line(
        1,
        "CTC oracle",
        worst < 1e-9 && worst_total < 1e-9 && elapsed < Duration::from_secs(10),
        format!(
            "{grids} grids, {checked} labelings, max |p-brute| {worst:.1e}, max |sum-1| {worst_total:.1e}, {}",
            secs(elapsed)
        ),
    )
}

/// Every label sequence over `1..v` of length at most `max_len`.
fn all_targets(v: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|p| (1..v).map(move |k| [p.as_slice(), &[k]].concat()))
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

fn tiny_corpus(seed: u64) -> lae_core::sim::Corpus {
    let sim = SimConfig {
        tokens_per_lang: 3,
        utt_tokens_min: 2,
        utt_tokens_max: 3,
        switch_max: 1,
        ..SimConfig::default()
    };
    let spec = CorpusSpec {
        counts: vec![(Partition::TrainMonoA, 6), (Partition::TrainMonoB, 6), (Partition::TrainCs, 6)],
    };
    gen_corpus(&spec, &sim, seed).unwrap()
}

fn tiny_model_config(feat_dim: usize, vocab: usize) -> ModelConfig {
    let mut c = ModelConfig::stock(Architecture::Lae, feat_dim, vocab, 7);
    c.d_model = 8;
    c.d_ff = 16;
    c.heads = 2;
    c.subsample_channels = 4;
    c.shared_layers = 1;
    c.branch_layers = 1;
    c.dropout = 0.0;
    c
}

fn to_f64(u: &Utterance) -> Tensor<f64> {
    Tensor::matrix(u.frames, u.feat_dim, u.features.iter().map(|&x| x as f64).collect()).unwrap()
}

fn gradient_suite() -> Line {
    let start = Instant::now();
    let ops = op_suite(100, 0xfeed).unwrap();
    let corpus = tiny_corpus(4);
    let u = corpus.partition(Partition::TrainCs).next().unwrap();
    let targets = mask_targets(&u.utt_id, &u.ids, &corpus.vocab).unwrap();
    let features = to_f64(u);
    // The subsampler's ReLU has a kink; take the first model seed whose
    // ReLU inputs all sit outside the finite-difference stencil's reach.
    let (tried, model) = (0..)
        .map(|seed| {
            let mut c = tiny_model_config(u.feat_dim, corpus.vocab.len());
            c.seed = seed;
            LaeModel::<f64>::build(c).unwrap()
        })
        .enumerate()
        .find(|(_, m)| {
            let mut g = Graph::new(&m.params, Mode::Train, 0);
            utterance_loss(m, &mut g, &features, &targets, true, None).unwrap().is_some() && g.relu_margin() >= 1e-2
        })
        .unwrap();
    let mut store = model.params.clone();
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| !p.name.starts_with("probe."))
        .map(|(id, _)| id)
        .collect();
    let n_params: usize = ids.iter().map(|&id| store.get(id).tensor.numel()).sum();
    let full = check(&mut store, &ids, 1e-3, |g| {
        Ok(utterance_loss(&model, g, &features, &targets, true, None)?.expect("feasible").root)
    })
    .unwrap();
    let full = full.rel_err;
    let elapsed = start.elapsed();
    let worst_op = ops.iter().map(|o| o.1).fold(0.0, f64::max);
    let failing: Vec<&str> = ops.iter().filter(|o| !(o.1 <= 1e-6)).map(|o| o.0).collect();
    line(
        2,
        "gradient suite",
        failing.is_empty() && full <= 1e-6 && elapsed < Duration::from_secs(60),
        format!(
            "{} ops worst {worst_op:.1e}{}, full LAE loss ({n_params} params, D=8, model seed {tried}) {full:.1e}, {}",
            ops.len(),
            if failing.is_empty() { String::new() } else { format!(" failing {failing:?}") },
            secs(elapsed)
        ),
    )
}

fn masking() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut violations = 0;
    for _ in 0..1000 {
        let (na, nb) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let vocab = Vocabulary::synthetic(na, nb);
        let lang_ids: Vec<usize> = vocab.lang_ids(Lang::A).into_iter().chain(vocab.lang_ids(Lang::B)).collect();
        let len = rng.gen_range(0..12);
        let y: Vec<usize> = (0..len).map(|_| lang_ids[rng.gen_range(0..lang_ids.len())]).collect();
        let m = mask_targets("u", &y, &vocab).unwrap();
        if m.y_a.len() != y.len() || m.y_b.len() != y.len() {
            violations += 1;
        }
        for (i, &tok) in y.iter().enumerate() {
            let lang = vocab.lang(tok).unwrap();
            let (own, other) = (m.side(lang)[i], m.side(lang.other())[i]);
            if own != tok || other != lang.mask() {
                violations += 1;
            }
        }
        if m.reconstruct() != y {
            violations += 1;
        }
    }
    line(3, "masking invariants", violations == 0, format!("1000 random targets, {violations} violations"))
}

fn objective_exactness() -> Line {
    let corpus = tiny_corpus(5);
    let utts: Vec<&Utterance> = corpus.utterances.iter().collect();
    let mut violations = 0;
    let mut checks = 0;
    // Logged epoch means.
    let mut model = LaeModel::<f32>::build(tiny_model_config(16, corpus.vocab.len())).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        warmup: 4,
        average_last: 1,
        ..TrainConfig::default()
    };
    let out = train(&mut model, &utts, &corpus.vocab, &cfg, None).unwrap();
    for r in &out.metrics {
        checks += 1;
        let rebuilt = r.j_ori + (r.j_a + r.j_b) / 2.0;
        if (r.j - rebuilt).abs() > 4.0 * f64::EPSILON * r.j.abs() {
            violations += 1;
        }
    }
    // Per-utterance terms, the backward root, and the frame-level combination.
    let m64 = model.cast::<f64>();
    for u in &utts {
        let targets = mask_targets(&u.utt_id, &u.ids, &corpus.vocab).unwrap();
        let mut g = Graph::new(&m64.params, Mode::Train, 0);
        let Some(l) = utterance_loss(&m64, &mut g, &to_f64(u), &targets, true, None).unwrap() else {
            continue;
        };
        checks += 3;
        if l.j != combine_objective(l.j_ori, l.j_a, l.j_b, true) {
            violations += 1;
        }
        if (g.scalar(l.root) - l.j).abs() > 4.0 * f64::EPSILON * l.j.abs() {
            violations += 1;
        }
        let mut g = Graph::new(&m64.params, Mode::Eval, 0);
        let enc = m64.encode_features(&mut g, &to_f64(u)).unwrap();
        let (a, b) = (g.to_tensor(enc.h_a.unwrap()), g.to_tensor(enc.h_b.unwrap()));
        if combine_tensors(&a, &b).unwrap() != g.to_tensor(enc.h_bil) {
            violations += 1;
        }
    }
    // combine(h, 0) == h and commutativity on random tensors.
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for _ in 0..200 {
        let (t, d) = (rng.gen_range(1..10), rng.gen_range(1..10));
        let rand = |rng: &mut ChaCha8Rng| Tensor::matrix(t, d, (0..t * d).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
        let (h, k) = (rand(&mut rng), rand(&mut rng));
        let zero = Tensor::<f64>::matrix(t, d, vec![0.0; t * d]).unwrap();
        checks += 2;
        if combine_tensors(&h, &zero).unwrap() != h {
            violations += 1;
        }
        if combine_tensors(&h, &k).unwrap() != combine_tensors(&k, &h).unwrap() {
            violations += 1;
        }
    }
    line(4, "objective and combination exactness", violations == 0, format!("{checks} checks, {violations} violations"))
}

fn beam_oracle() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut mismatches = 0;
    for _ in 0..100 {
        let t = rng.gen_range(1..=5);
        let v = rng.gen_range(2..=4);
        let grid = random_grid(&mut rng, t, v);
        let probs = labeling_probs(&grid, t, v);
        let mut best: Option<(&Vec<usize>, f64)> = None;
        for (lab, &p) in &probs {
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((lab, p));
            }
        }
        let hyps = prefix_beam_search(&grid, v, probs.len(), None, 0.0).unwrap();
        if &hyps[0].tokens != best.unwrap().0 {
            mismatches += 1;
        }
    }
    line(11, "beam search oracle", mismatches == 0, format!("100 grids, {mismatches} mismatches"))
}

fn rel(a: Option<f64>, b: Option<f64>) -> String {
    format!("{} vs {}", fmt_rate(a), fmt_rate(b))
}

fn scaled_trends(r: &ExperimentReport, out: &Path, elapsed: Duration) -> Vec<Line> {
    let mut lines = Vec::new();
    let score = |s: &str, p| r.score(s, p).copied().unwrap_or_default();
    let (lae_p, van_p) = (r.param_counts[LAE] as f64, r.param_counts[VANILLA] as f64);
    let matched = ((lae_p - van_p) / van_p).abs() <= 0.10;
    let (lae_cs, van_cs) = (score(LAE, Partition::EvalCs).mer(), score(VANILLA, Partition::EvalCs).mer());
    let sig = r.sig(SIG_LAE_VS_VANILLA).unwrap();
    let mono_ok = |p: Partition, lang: Lang| {
        let (a, b) = (score(LAE, p).er(lang).unwrap_or(f64::NAN), score(VANILLA, p).er(lang).unwrap_or(f64::NAN));
        a <= b * 1.05
    };
    let lower = lae_cs.zip(van_cs).is_some_and(|(a, b)| a < b);
    let monos = mono_ok(Partition::EvalMonoA, Lang::A) && mono_ok(Partition::EvalMonoB, Lang::B);
    lines.push(line(
        5,
        "LAE vs Vanilla on code-switch MER",
        matched && lower && sig.p_normal < 0.05 && monos && elapsed <= Duration::from_secs(45 * 60),
        format!(
            "params {lae_p} vs {van_p}; CS MER {}; p={:.3} (perm {:.3}); mono-A ER {}; mono-B ER {}; experiment {}",
            rel(lae_cs, van_cs),
            sig.p_normal,
            sig.p_permutation,
            rel(score(LAE, Partition::EvalMonoA).er(Lang::A), score(VANILLA, Partition::EvalMonoA).er(Lang::A)),
            rel(score(LAE, Partition::EvalMonoB).er(Lang::B), score(VANILLA, Partition::EvalMonoB).er(Lang::B)),
            secs(elapsed)
        ),
    ));

    let (simu, mono) = (score(LAE_MONO_SIMU, Partition::EvalCs).mer(), score(LAE_MONO, Partition::EvalCs).mer());
    let s = r.sig(SIG_SIMU).unwrap();
    lines.push(line(
        6,
        "spliced code-switch augmentation",
        simu.zip(mono).is_some_and(|(a, b)| a < b) && s.p_normal < 0.05,
        format!("CS MER mono+simu {}; p={:.3} (perm {:.3})", rel(simu, mono), s.p_normal, s.p_permutation),
    ));

    let accs: Vec<(Partition, f64)> = [Partition::EvalMonoA, Partition::EvalMonoB, Partition::EvalCs]
        .iter()
        .map(|&p| (p, r.probe.accuracy(p.name()).unwrap_or(0.0)))
        .collect();
    lines.push(line(
        7,
        "language probe",
        accs.iter().all(|a| a.1 >= 0.95),
        accs.iter().map(|(p, a)| format!("{} {:.2}%", p.name(), 100.0 * a)).collect::<Vec<_>>().join(", "),
    ));

    let aux = |which: Lang, p: Partition| {
        r.aux.iter().find(|(name, a)| name == p.name() && a.which == which).map(|x| &x.1).unwrap()
    };
    let on_b = aux(Lang::A, Partition::EvalMonoB);
    let on_a = aux(Lang::A, Partition::EvalMonoA);
    let aux_er = on_a.full.er(Lang::A);
    let global_er = score(LAE, Partition::EvalMonoA).er(Lang::A);
    let within = aux_er.zip(global_er).is_some_and(|(x, g)| x <= g * 1.2);
    lines.push(line(
        8,
        "language-specific decoder",
        on_b.other_lang_tokens == 0 && within,
        format!(
            "auxA on mono-B: {} B tokens emitted, ER_B {}; auxA on mono-A ER_A {} vs global {}",
            on_b.other_lang_tokens,
            fmt_rate(on_b.full.er(Lang::B)),
            fmt_rate(aux_er),
            fmt_rate(global_er)
        ),
    ));

    let csvs = r.spike_utts.iter().filter(|u| out.join("spikes").join(format!("{u}.csv")).is_file()).count();
    let rate = r.spikes.rate();
    lines.push(line(
        9,
        "mask spikes",
        rate.is_some_and(|x| x >= 0.90) && csvs == 5,
        format!(
            "{}/{} non-target spikes are the mask ({}), {csvs} spike CSVs",
            r.spikes.masked,
            r.spikes.spikes,
            rate.map_or("NA".into(), |x| format!("{:.2}%", 100.0 * x))
        ),
    ));

    let (plain, fused) = (r.fusion.0.mer(), r.fusion.1.mer());
    let degrade = fused.zip(plain).map(|(f, p)| 100.0 * (f - p));
    lines.push(line(
        10,
        "LM fusion sanity",
        degrade.is_some_and(|d| d <= 0.2) && out.join("fusion.csv").is_file(),
        format!(
            "CS MER lambda=0 {} lambda={} {} (change {} points)",
            fmt_rate(plain),
            r.lm_weight,
            fmt_rate(fused),
            degrade.map_or("NA".into(), |d| format!("{d:+.3}"))
        ),
    ));
    lines
}

fn determinism(first: &Path, second: &Path) -> Line {
    let (a, b) = (report_files(first).unwrap(), report_files(second).unwrap());
    let mut differing: Vec<String> = Vec::new();
    if a != b {
        differing.push("file lists differ".into());
    }
    for f in a.iter().filter(|f| b.contains(f)) {
        if fs::read(first.join(f)).unwrap() != fs::read(second.join(f)).unwrap() {
            differing.push(f.display().to_string());
        }
    }
    line(
        12,
        "determinism",
        differing.is_empty(),
        format!("{} files compared, {} differ {:?}", a.len(), differing.len(), &differing[..differing.len().min(5)]),
    )
}

fn main() -> ExitCode {
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().unwrap();
    let strict = std::env::var("LAE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut hard = vec![ctc_oracle(), gradient_suite(), masking(), objective_exactness(), beam_oracle()];

    let cfg = ExperimentConfig::parse(STOCK_CONFIG).unwrap();
    let keep = std::env::var_os("LAE_ACCEPTANCE_OUT");
    let tmp = tempfile::tempdir().unwrap();
    let root = keep.as_deref().map(Path::new).unwrap_or(tmp.path());
    let (first, second) = (root.join("run1"), root.join("run2"));
    let start = Instant::now();
    let report = run_experiment(&cfg, &first).unwrap();
    let elapsed = start.elapsed();
    let soft = scaled_trends(&report, &first, elapsed);
    run_experiment(&cfg, &second).unwrap();
    hard.push(determinism(&first, &second));

    let failed_hard = hard.iter().filter(|l| !l.pass).count();
    let failed_soft = soft.iter().filter(|l| !l.pass).count();
    println!(
        "acceptance: {} of 12 criteria pass (oracle/determinism failures {failed_hard}, scaled-trend failures {failed_soft}{})",
        12 - failed_hard - failed_soft,
        if strict { ", strict" } else { "" }
    );
    if failed_hard > 0 || (strict && failed_soft > 0) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
