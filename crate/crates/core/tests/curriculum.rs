use vsu::curriculum::{
    accuracy_csv, encode_corpus, evaluate_visual, feature_examples, finetune, pretrain, read_metrics,
    transfer_pretrain, unit_examples, write_metrics, CurriculumSchedule, Example, Strategy, TrainRunConfig,
};
use vsu::model::{is_frontend_param, Model, ModelConfig};
use vsu::quantizer::train_kmeans;
use vsu::synth::{generate_corpus, Corpus, WorldSpec};
use vsu::tokenizer::{train_bpe, Vocabulary};
use vsu::units::Modality;

struct Toy {
    corpus: Corpus,
    vocab: Vocabulary,
    units: Vec<Example>,
}

fn toy(n: usize, seed: u64) -> Toy {
    let world = WorldSpec::default_world(seed);
    let corpus = generate_corpus(&world, n).unwrap();
    let texts: Vec<&str> = corpus.utterances.iter().map(|u| u.text.as_str()).collect();
    let vocab = train_bpe(&texts, 128).unwrap();
    let cba = train_kmeans(&corpus.stacked(Modality::Audio), 32, 20, seed).unwrap();
    let cbv = train_kmeans(&corpus.stacked(Modality::Visual), 32, 20, seed).unwrap();
    let a = encode_corpus(&corpus, &cba, Modality::Audio).unwrap();
    let v = encode_corpus(&corpus, &cbv, Modality::Visual).unwrap();
    let units = unit_examples(&corpus, &a, &v, &vocab).unwrap();
    Toy { corpus, vocab, units }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        k_units: 32,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        vocab_size: 128,
        ..ModelConfig::default()
    }
}

fn run_cfg(epochs: usize, strategy: Strategy) -> TrainRunConfig {
    TrainRunConfig {
        epochs,
        batch_frames: 512,
        strategy,
        seed: 3,
        ..TrainRunConfig::default()
    }
}

#[test]
fn toy_corpus_is_memorized() {
    let t = toy(50, 1);
    let out = pretrain(&t.units, &run_cfg(200, Strategy::Curriculum), &ModelConfig::default()).unwrap();
    let (_, acc) = evaluate_visual(&out.model, &t.units, 1024).unwrap();
    assert!(acc > 0.9, "teacher-forced accuracy {acc}");
}

#[test]
fn same_seed_same_metrics() {
    let t = toy(30, 2);
    let a = pretrain(&t.units, &run_cfg(3, Strategy::Curriculum), &small_model()).unwrap();
    let b = pretrain(&t.units, &run_cfg(3, Strategy::Curriculum), &small_model()).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.model, b.model);
    let c = pretrain(&t.units, &TrainRunConfig { seed: 4, ..run_cfg(3, Strategy::Curriculum) }, &small_model()).unwrap();
    assert_ne!(a.metrics, c.metrics);
}

#[test]
fn scratch_visual_is_degenerate_curriculum() {
    let t = toy(30, 3);
    let scratch = pretrain(&t.units, &run_cfg(3, Strategy::ScratchVisual), &small_model()).unwrap();
    let cfg = TrainRunConfig {
        schedule: CurriculumSchedule {
            start_frac: 0.0,
            end_frac: 0.0,
        },
        ..run_cfg(3, Strategy::Curriculum)
    };
    let degenerate = pretrain(&t.units, &cfg, &small_model()).unwrap();
    assert_eq!(scratch.metrics, degenerate.metrics);
}

#[test]
fn loss_decreases_for_every_strategy() {
    let t = toy(40, 4);
    for s in [
        Strategy::Curriculum,
        Strategy::ScratchVisual,
        Strategy::TransferTwoStage,
        Strategy::NoMaskAv,
    ] {
        let m = pretrain(&t.units, &run_cfg(15, s), &small_model()).unwrap().metrics;
        let head: f64 = m[..3].iter().map(|x| x.loss).sum::<f64>() / 3.0;
        let tail: f64 = m[m.len() - 3..].iter().map(|x| x.loss).sum::<f64>() / 3.0;
        assert!(tail < head, "{s:?}: {head} -> {tail}");
    }
}

#[test]
fn mask_ratio_follows_the_policy() {
    let t = toy(30, 5);
    let cur = pretrain(&t.units, &run_cfg(6, Strategy::Curriculum), &small_model()).unwrap().metrics;
    assert_eq!(cur[0].p, 0.0);
    assert_eq!(cur.last().unwrap().p, 100.0);
    assert!(cur.windows(2).all(|w| w[1].p >= w[0].p));

    let tr = transfer_pretrain(&t.units, &run_cfg(6, Strategy::Curriculum), &small_model()).unwrap().metrics;
    let total = tr.len() as f64;
    for m in &tr {
        let expect = if (m.step as f64 / total) < 0.5 { 0.0 } else { 100.0 };
        assert_eq!(m.p, expect);
    }
    assert!(tr.iter().any(|m| m.p == 0.0) && tr.iter().any(|m| m.p == 100.0));
}

#[test]
fn batches_per_epoch_are_fixed() {
    let t = toy(30, 6);
    let m = pretrain(&t.units, &run_cfg(4, Strategy::Curriculum), &small_model()).unwrap().metrics;
    let per_epoch: Vec<usize> = (0..4).map(|e| m.iter().filter(|x| x.epoch == e).count()).collect();
    assert!(per_epoch.iter().all(|&c| c == per_epoch[0] && c > 0));
    assert!(m.iter().enumerate().all(|(i, x)| x.step == i));
}

fn pretrained(t: &Toy) -> Model {
    pretrain(&t.units, &run_cfg(4, Strategy::Curriculum), &small_model()).unwrap().model
}

#[test]
fn frozen_phase_keeps_the_body() {
    let t = toy(30, 7);
    let ckpt = pretrained(&t);
    let fex = feature_examples(&t.corpus, &t.vocab);
    let cfg = TrainRunConfig {
        frozen_steps: 1000,
        ..run_cfg(2, Strategy::Curriculum)
    };
    let out = finetune(&ckpt, &fex, &cfg).unwrap();
    assert!(out.metrics.len() < 1000);
    let swapped = ckpt.swap_frontend(t.corpus.world.feature_dim).unwrap();
    let mut frontend_moved = false;
    for (_, name, value) in out.model.params.iter() {
        if is_frontend_param(name) {
            frontend_moved |= value != swapped.param(name);
        } else {
            assert_eq!(value, ckpt.param(name), "{name} changed while frozen");
        }
    }
    assert!(frontend_moved);
}

#[test]
fn body_trains_after_frozen_steps() {
    let t = toy(30, 8);
    let ckpt = pretrained(&t);
    let fex = feature_examples(&t.corpus, &t.vocab);
    let cfg = TrainRunConfig {
        frozen_steps: 2,
        ..run_cfg(2, Strategy::Curriculum)
    };
    let out = finetune(&ckpt, &fex, &cfg).unwrap();
    assert!(out.metrics.len() > 2);
    assert_ne!(out.model.param("enc.0.attn.q.w"), ckpt.param("enc.0.attn.q.w"));
    assert!(out.metrics.iter().all(|m| m.p == 100.0));
}

#[test]
fn zero_finetune_steps_return_the_swapped_model() {
    let t = toy(20, 9);
    let ckpt = pretrained(&t);
    let fex = feature_examples(&t.corpus, &t.vocab);
    let out = finetune(&ckpt, &fex, &run_cfg(0, Strategy::Curriculum)).unwrap();
    assert!(out.metrics.is_empty());
    assert_eq!(out.model, ckpt.swap_frontend(t.corpus.world.feature_dim).unwrap());
}

#[test]
fn finetuning_improves_on_the_fresh_frontend() {
    let t = toy(40, 10);
    let ckpt = pretrained(&t);
    let fex = feature_examples(&t.corpus, &t.vocab);
    let fresh = ckpt.swap_frontend(t.corpus.world.feature_dim).unwrap();
    let (before, _) = evaluate_visual(&fresh, &fex, 1024).unwrap();
    let out = finetune(&ckpt, &fex, &run_cfg(5, Strategy::Curriculum)).unwrap();
    let (after, _) = evaluate_visual(&out.model, &fex, 1024).unwrap();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn finetune_rejects_bad_inputs() {
    let t = toy(20, 11);
    let ckpt = pretrained(&t);
    assert!(finetune(&ckpt, &t.units, &run_cfg(1, Strategy::Curriculum)).is_err());
    let fex = feature_examples(&t.corpus, &t.vocab);
    let continuous = ckpt.swap_frontend(t.corpus.world.feature_dim).unwrap();
    assert!(finetune(&continuous, &fex, &run_cfg(1, Strategy::Curriculum)).is_err());
    assert!(pretrain(&[], &run_cfg(1, Strategy::Curriculum), &small_model()).is_err());
}

#[test]
fn metrics_round_trip_and_export() {
    let t = toy(20, 12);
    let m = pretrain(&t.units, &run_cfg(2, Strategy::Curriculum), &small_model()).unwrap().metrics;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    write_metrics(&path, &m).unwrap();
    assert_eq!(read_metrics(&path).unwrap(), m);
    let mut csv = Vec::new();
    accuracy_csv(&m, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), m.len() + 1);
}
