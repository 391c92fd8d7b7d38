//! Finite-difference gradient checks shared by the gradcheck and acceptance targets.
//!
//! Coordinates are spread evenly over every parameter tensor. The error
//! measure is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`, so
//! gradients below 1e-3 are held to an absolute bound instead of a relative one.

use candle_core::{DType, Device, Tensor, Var};
use diffgan_tts::corpus::{generate_synthetic_corpus, CorpusSpec, Utterance};
use diffgan_tts::discriminator::DiscriminatorConfig;
use diffgan_tts::engine::{build_vocab, Batch, Model, ModelConfig};
use diffgan_tts::nn::{Ctx, ParamStore};
use diffgan_tts::norm::Cpln;
use diffgan_tts::objectives::{
    adversarial_loss, discriminator_loss, feature_matching_loss, generator_total_loss, masked_mel_loss, variance_loss,
    GeneratorLossParts, LossWeights,
};
use diffgan_tts::rng::{randn, stream_rng, Stream};
use diffgan_tts::schedule::{sample_posterior_batch, sample_training_pair_batch};
use diffgan_tts::Result;

const H: f64 = 1e-5;
pub const TOL: f64 = 1e-5;

fn values(v: &Var) -> Vec<f64> {
    v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn set(v: &Var, data: Vec<f64>) {
    v.set(&Tensor::from_vec(data, v.dims(), &Device::Cpu).unwrap()).unwrap();
}

/// Worst error over up to `per_var` coordinates of every variable.
pub fn check(vars: &[(String, Var)], per_var: usize, loss: impl Fn() -> Result<Tensor>) -> (f64, String, usize) {
    let l = loss().unwrap();
    let grads = l.backward().unwrap();
    let mut worst = (0.0, String::new(), 0usize);
    let mut checked = 0;
    for (name, var) in vars {
        let Some(g) = grads.get(var.as_tensor()) else { continue };
        let analytic = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = values(var);
        let n = base.len();
        let picks: Vec<usize> =
            if n <= per_var { (0..n).collect() } else { (0..per_var).map(|k| k * n / per_var + (k % 3)).collect() };
        for i in picks.into_iter().filter(|&i| i < n) {
            let mut p = base.clone();
            p[i] += H;
            set(var, p.clone());
            let up = loss().unwrap().to_scalar::<f64>().unwrap();
            p[i] -= 2.0 * H;
            set(var, p);
            let down = loss().unwrap().to_scalar::<f64>().unwrap();
            set(var, base.clone());
            let numeric = (up - down) / (2.0 * H);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            checked += 1;
            if err > worst.0 {
                worst = (err, format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}"), 0);
            }
        }
    }
    worst.2 = checked;
    worst
}

fn vars_of(store: &ParamStore) -> Vec<(String, Var)> {
    store.iter().map(|(n, v)| (n.clone(), v.clone())).collect()
}

fn micro_model(data: &[Utterance]) -> Model {
    let mut cfg = ModelConfig::micro();
    cfg.generator.mel_bins = 80;
    cfg.discriminator = DiscriminatorConfig { mel_bins: 80, ..DiscriminatorConfig::micro() };
    cfg.calibrate(data);
    Model::new(&cfg, build_vocab(data), 5, DType::F64).unwrap()
}

fn corpus() -> Vec<Utterance> {
    generate_synthetic_corpus(&CorpusSpec {
        n_utterances: 2,
        seed: 3,
        min_phonemes: 3,
        max_phonemes: 5,
        ..Default::default()
    })
    .unwrap()
}

/// `(worst error, where, coordinates checked)`.
pub type CheckResult = (f64, String, usize);

pub fn cpln_gradcheck() -> CheckResult {
    let mut store = ParamStore::new(DType::F64, Device::Cpu);
    let mut rng = stream_rng(1, Stream::Init);
    let cpln = Cpln::new(&mut store.builder(&mut rng).pp("cpln"), 6, 5).unwrap();
    cpln.set_rho(0.3).unwrap();
    let x = Var::from_tensor(&randn(&mut rng, &[2, 3, 6], DType::F64, &Device::Cpu).unwrap()).unwrap();
    let s = Var::from_tensor(&randn(&mut rng, &[2, 5], DType::F64, &Device::Cpu).unwrap()).unwrap();
    let w = randn(&mut rng, &[2, 3, 6], DType::F64, &Device::Cpu).unwrap();
    let mut vars = vars_of(&store);
    vars.push(("x".into(), x.clone()));
    vars.push(("s".into(), s.clone()));
    let (err, at, n) = check(&vars, 12, || Ok((cpln.forward(x.as_tensor(), s.as_tensor())? * &w)?.sum_all()?));
    (err, at, n)
}

pub fn generator_gradcheck() -> CheckResult {
    let data = corpus();
    let model = micro_model(&data);
    let utts: Vec<&Utterance> = data.iter().collect();
    let batch = Batch::new(&model, &utts).unwrap();
    let dims = batch.x0.dims().to_vec();
    let mut rng = stream_rng(8, Stream::Training);
    let mask = &batch.frame_mask;
    let noise: Vec<Tensor> = (0..3)
        .map(|_| randn(&mut rng, &dims, DType::F64, &Device::Cpu).unwrap().broadcast_mul(mask).unwrap())
        .collect();
    let ts = vec![3, 2];
    let (x_prev, x_t) = sample_training_pair_batch(&batch.x0, &ts, &model.schedule, &noise[0], &noise[1]).unwrap();
    let prompts: Vec<&str> = batch.prompts.iter().map(String::as_str).collect();
    let weights = LossWeights::default();
    // D sees the embedding as a constant, as in training
    let s_disc = model.style_embeddings(&prompts).unwrap().detach();
    let loss = || -> Result<Tensor> {
        let s = model.style_embeddings(&prompts)?;
        let (x0, cond) = model.generator.forward(&x_t, &batch.ys, &s, &ts, Some(&batch.targets), &mut Ctx::eval())?;
        let fake_prev = sample_posterior_batch(&x0, &x_t, &ts, &model.schedule, &noise[2])?.broadcast_mul(mask)?;
        let real = model.discriminator.forward(&x_prev, &x_t, &batch.frame_lengths, &ts, &s_disc)?;
        let fake = model.discriminator.forward(&fake_prev, &x_t, &batch.frame_lengths, &ts, &s_disc)?;
        let real_feats: Vec<Tensor> = real.features.iter().map(Tensor::detach).collect();
        let (duration, pitch, energy) = variance_loss(
            &cond.predicted.log_duration,
            &batch.log_duration,
            &batch.phoneme_mask,
            &cond.frame_pitch,
            &batch.pitch,
            &cond.frame_energy,
            &batch.energy,
            &mask.squeeze(2)?,
        )?;
        let parts = GeneratorLossParts {
            adv: adversarial_loss(&fake.score)?,
            duration,
            pitch,
            energy,
            fm: feature_matching_loss(&real_feats, &fake.features)?,
            mel: masked_mel_loss(&x0, &batch.x0, mask)?,
        };
        generator_total_loss(&parts, &weights)
    };
    let (err, at, n) = check(&vars_of(&model.gen_params), 3, loss);
    (err, at, n)
}

pub fn discriminator_gradcheck() -> CheckResult {
    let data = corpus();
    let model = micro_model(&data);
    let utts: Vec<&Utterance> = data.iter().collect();
    let batch = Batch::new(&model, &utts).unwrap();
    let dims = batch.x0.dims().to_vec();
    let mut rng = stream_rng(9, Stream::Training);
    let fake_prev = randn(&mut rng, &dims, DType::F64, &Device::Cpu).unwrap().broadcast_mul(&batch.frame_mask).unwrap();
    let x_t = randn(&mut rng, &dims, DType::F64, &Device::Cpu).unwrap().broadcast_mul(&batch.frame_mask).unwrap();
    let ts = vec![1, 4];
    let prompts: Vec<&str> = batch.prompts.iter().map(String::as_str).collect();
    let s = model.style_embeddings(&prompts).unwrap();
    let loss = || -> Result<Tensor> {
        let real = model.discriminator.forward(&batch.x0, &x_t, &batch.frame_lengths, &ts, &s)?;
        let fake = model.discriminator.forward(&fake_prev, &x_t, &batch.frame_lengths, &ts, &s)?;
        discriminator_loss(&real.score, &fake.score)
    };
    let (err, at, n) = check(&vars_of(&model.disc_params), 8, loss);
    (err, at, n)
}
