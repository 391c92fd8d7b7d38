use candle_core::DType;
use diffgan_tts::corpus::{generate_synthetic_corpus, CorpusSpec, Utterance};
use diffgan_tts::discriminator::DiscriminatorConfig;
use diffgan_tts::engine::{
    build_vocab, checkpoint_dir, fit, load_checkpoint, Model, ModelConfig, StepMetrics, TrainConfig, TrainState,
};

fn data() -> Vec<Utterance> {
    generate_synthetic_corpus(&CorpusSpec {
        n_utterances: 5,
        seed: 21,
        min_phonemes: 2,
        max_phonemes: 5,
        ..Default::default()
    })
    .unwrap()
}

fn state(data: &[Utterance], max_steps: u64, checkpoint_every: u64) -> TrainState {
    let mut cfg = ModelConfig::micro();
    cfg.generator.mel_bins = 80;
    cfg.discriminator = DiscriminatorConfig { mel_bins: 80, ..DiscriminatorConfig::micro() };
    cfg.calibrate(data);
    let model = Model::new(&cfg, build_vocab(data), 21, DType::F32).unwrap();
    TrainState::new(model, TrainConfig { seed: 21, batch_size: 2, max_steps, checkpoint_every, ..Default::default() })
        .unwrap()
}

fn read_log(dir: &std::path::Path) -> Vec<StepMetrics> {
    std::fs::read_to_string(dir.join("metrics.log"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn checkpoints_follow_the_schedule_and_the_final_step() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let out = fit(state(&d, 25, 10), &d, Some(dir.path())).unwrap();
    assert_eq!(out.state.step, 25);
    let mut written: Vec<String> = std::fs::read_dir(dir.path().join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    written.sort();
    assert_eq!(written, ["step-00000010", "step-00000020", "step-00000025"]);
    let log = read_log(dir.path());
    assert_eq!(log.iter().map(|m| m.step).collect::<Vec<_>>(), (1..=25).collect::<Vec<_>>());
    assert_eq!(log, out.metrics);
}

#[test]
fn resumed_run_reproduces_the_uninterrupted_metrics() {
    let d = data();
    let full = fit(state(&d, 12, 100), &d, None).unwrap().metrics;

    let dir = tempfile::tempdir().unwrap();
    fit(state(&d, 5, 5), &d, Some(dir.path())).unwrap();
    let mut resumed = load_checkpoint(&checkpoint_dir(dir.path(), 5)).unwrap();
    assert_eq!(resumed.step, 5);
    resumed.train.max_steps = 12;
    let rest = fit(resumed, &d, None).unwrap().metrics;
    assert_eq!(rest, full[5..]);
}

#[test]
fn fit_rejects_empty_data_and_unwritable_run_dirs() {
    let d = data();
    assert!(fit(state(&d, 2, 1), &[], None).is_err());
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    assert!(fit(state(&d, 2, 1), &d, Some(&blocker)).is_err());
}
