use super::*;
use crate::model::{Architecture, ModelConfig};
use crate::sim::{gen_corpus, Corpus, CorpusSpec, Partition, SimConfig};

fn tiny_corpus() -> Corpus {
    let sim = SimConfig {
        tokens_per_lang: 4,
        utt_tokens_min: 2,
        utt_tokens_max: 4,
        switch_max: 1,
        ..SimConfig::default()
    };
    let spec = CorpusSpec {
        counts: vec![(Partition::TrainMonoA, 6), (Partition::TrainMonoB, 6), (Partition::TrainCs, 4)],
    };
    gen_corpus(&spec, &sim, 5).unwrap()
}

fn tiny_model(arch: Architecture, vocab: usize) -> LaeModel<f32> {
    let mut c = ModelConfig::stock(arch, 16, vocab, 3);
    c.d_model = 16;
    c.d_ff = 32;
    c.heads = 2;
    c.subsample_channels = 8;
    if arch == Architecture::Lae {
        c.shared_layers = 1;
    }
    LaeModel::build(c).unwrap()
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        warmup: 4,
        average_last: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_runs_give_identical_checkpoints() {
    let corpus = tiny_corpus();
    let utts: Vec<&Utterance> = corpus.utterances.iter().take(2).collect();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let sink = TrainSink {
            dir: dir.path().to_path_buf(),
            digest: [7; 32],
        };
        let mut m = tiny_model(Architecture::Lae, corpus.vocab.len());
        train(&mut m, &utts, &corpus.vocab, &cfg(1), Some(&sink)).unwrap();
        (
            fs::read(sink.checkpoint_path(1)).unwrap(),
            fs::read_to_string(dir.path().join("metrics.csv")).unwrap(),
        )
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.1.starts_with("epoch,step,J,J_ori,J_A,J_B,lr,skipped_count\n1,1,"));
}

#[test]
fn aux_switch_keeps_initial_j_ori() {
    let corpus = tiny_corpus();
    let utts: Vec<&Utterance> = corpus.utterances.iter().collect();
    let mut on = tiny_model(Architecture::Lae, corpus.vocab.len());
    let mut off = on.clone();
    let a = train(&mut on, &utts, &corpus.vocab, &cfg(1), None).unwrap();
    let b = train(&mut off, &utts, &corpus.vocab, &TrainConfig { aux_loss: false, ..cfg(1) }, None).unwrap();
    assert_eq!(a.initial_j_ori, b.initial_j_ori);
    assert_eq!(b.metrics[0].j, b.metrics[0].j_ori);
    assert_eq!((b.metrics[0].j_a, b.metrics[0].j_b), (0.0, 0.0));
}

#[test]
fn logged_objective_decomposes() {
    let corpus = tiny_corpus();
    let utts: Vec<&Utterance> = corpus.utterances.iter().collect();
    let mut m = tiny_model(Architecture::Lae, corpus.vocab.len());
    let out = train(&mut m, &utts, &corpus.vocab, &cfg(3), None).unwrap();
    for r in &out.metrics {
        let rebuilt = r.j_ori + (r.j_a + r.j_b) / 2.0;
        assert!((r.j - rebuilt).abs() <= 4.0 * f64::EPSILON * r.j.abs(), "{r:?}");
        assert!(r.j_a > 0.0 && r.j_b > 0.0);
    }
    assert_eq!(out.recent.len(), 1);
    assert_eq!(out.step, 12);
}

#[test]
fn probe_loss_leaves_encoder_untouched() {
    let corpus = tiny_corpus();
    let utts: Vec<&Utterance> = corpus.utterances.iter().collect();
    let mut with = tiny_model(Architecture::Lae, corpus.vocab.len());
    let mut without = with.clone();
    train(&mut with, &utts, &corpus.vocab, &cfg(2), None).unwrap();
    train(&mut without, &utts, &corpus.vocab, &TrainConfig { probe_loss: false, ..cfg(2) }, None).unwrap();
    for ((_, a), (_, b)) in with.params.iter().zip(without.params.iter()) {
        if a.name.starts_with("probe.") {
            assert_ne!(a.tensor, b.tensor);
        } else {
            assert_eq!(a.tensor, b.tensor, "{}", a.name);
        }
    }
}

#[test]
fn aux_terms_alone_reach_the_shared_block() {
    let corpus = tiny_corpus();
    let m = tiny_model(Architecture::Lae, corpus.vocab.len());
    let u = &corpus.utterances[12];
    let t = mask_targets(&u.utt_id, &u.ids, &corpus.vocab).unwrap();
    let mut g = Graph::new(&m.params, Mode::Train, 0);
    let enc = m.encode_features(&mut g, &u.to_tensor().unwrap()).unwrap();
    let mut side = |h: Var, y: &[usize]| {
        let l = m.aux_logits(&mut g, h).unwrap();
        let lp = g.log_softmax(l);
        ctc_node(&mut g, lp, y).unwrap().unwrap().0
    };
    let a = side(enc.h_a.unwrap(), &t.y_a);
    let b = side(enc.h_b.unwrap(), &t.y_b);
    let s = g.add(a, b).unwrap();
    let root = g.scale(s, 0.5);
    let grads = g.backward(root).unwrap();
    let shared_norm: f64 = m
        .params
        .iter()
        .filter(|(_, p)| p.name.starts_with("shared."))
        .flat_map(|(id, _)| grads.get(id).unwrap().iter().map(|&x| (x as f64).abs()).collect::<Vec<_>>())
        .sum();
    assert!(shared_norm > 0.0);
    let global_norm: f64 = ["dec.global.w", "dec.global.b"]
        .iter()
        .flat_map(|n| grads.get(m.params.id(n).unwrap()).unwrap().iter().map(|&x| (x as f64).abs()).collect::<Vec<_>>())
        .sum();
    assert_eq!(global_norm, 0.0);
}

#[test]
fn branches_diverge_after_training() {
    let corpus = tiny_corpus();
    let utts: Vec<&Utterance> = corpus.utterances.iter().collect();
    let mut m = tiny_model(Architecture::Lae, corpus.vocab.len());
    train(&mut m, &utts, &corpus.vocab, &cfg(2), None).unwrap();
    let mut max_diff = 0f32;
    for (_, p) in m.params.iter().filter(|(_, p)| p.name.starts_with("blockA.")) {
        let q = m.params.by_name(&p.name.replacen("blockA.", "blockB.", 1)).unwrap();
        for (x, y) in p.tensor.data().iter().zip(q.tensor.data()) {
            max_diff = max_diff.max((x - y).abs());
        }
    }
    assert!(max_diff > 0.0);
}

#[test]
fn infeasible_utterances_are_skipped_and_counted() {
    let mut corpus = tiny_corpus();
    // Six frames fall below the subsampler's minimum.
    let u = &mut corpus.utterances[0];
    u.frames = 6;
    u.features.truncate(6 * 16);
    u.boundaries = vec![(0, 6); u.ids.len()];
    let utts: Vec<&Utterance> = corpus.utterances.iter().collect();
    let mut m = tiny_model(Architecture::Vanilla, corpus.vocab.len());
    let out = train(&mut m, &utts, &corpus.vocab, &cfg(1), None).unwrap();
    assert_eq!(out.metrics[0].skipped, 1);
}

#[test]
fn special_ids_in_targets_are_rejected() {
    let mut corpus = tiny_corpus();
    corpus.utterances[3].ids[0] = crate::vocab::MASK_B;
    let utts: Vec<&Utterance> = corpus.utterances.iter().collect();
    let mut m = tiny_model(Architecture::Lae, corpus.vocab.len());
    let err = train(&mut m, &utts, &corpus.vocab, &cfg(1), None).unwrap_err();
    assert!(matches!(&err, Error::Data(msg) if msg.contains(&corpus.utterances[3].utt_id)));
}

#[test]
fn averaging_files() {
    let corpus = tiny_corpus();
    let utts: Vec<&Utterance> = corpus.utterances.iter().collect();
    let dir = tempfile::tempdir().unwrap();
    let sink = TrainSink {
        dir: dir.path().to_path_buf(),
        digest: [1; 32],
    };
    let mut m = tiny_model(Architecture::Lae, corpus.vocab.len());
    train(&mut m, &utts, &corpus.vocab, &TrainConfig { average_last: 2, ..cfg(3) }, Some(&sink)).unwrap();
    let last = last_epoch_checkpoints(dir.path(), 2).unwrap();
    assert_eq!(last, vec![sink.checkpoint_path(2), sink.checkpoint_path(3)]);
    let (one, steps) = average_checkpoints(&last[1..]).unwrap();
    assert_eq!(one, Checkpoint::load(&last[1]).unwrap());
    assert_eq!(steps, vec![12]);
    let (avg, steps) = average_checkpoints(&last).unwrap();
    assert_eq!(steps, vec![8, 12]);
    let (a, b) = (Checkpoint::load(&last[0]).unwrap(), Checkpoint::load(&last[1]).unwrap());
    let (x, y, z) = (a.get("dec.aux.b").unwrap(), b.get("dec.aux.b").unwrap(), avg.get("dec.aux.b").unwrap());
    for i in 0..x.numel() {
        let want = ((x.data()[i] as f64 + y.data()[i] as f64) / 2.0) as f32;
        assert_eq!(z.data()[i], want);
    }
    assert!(last_epoch_checkpoints(dir.path(), 4).is_err());
}
