use hrtf_latent::autoencoder::{
    AutoencoderConfig, ConditionedAutoencoder, PrototypeArchive, TokenGrid,
};
use hrtf_latent::data::synth::{synth_generate, SynthSpec};
use hrtf_latent::data::{fit_magnitude_stats, MergedTrainingSet};
use hrtf_latent::diffusion::{
    ddim_sample, denoising_loss, prototype_batch, sample_prototypes, train_diffusion, DdimSchedule,
    DiffusionTrainConfig, Guidance, NoisePredictor, PrototypeUnet, SamplerConfig, UnetConfig,
    UnetInputs,
};
use hrtf_latent::estimators::PrototypeTargets;
use hrtf_latent::numerics::gradcheck::max_relative_error_with_params;
use hrtf_latent::numerics::{Graph, Tensor};
use hrtf_latent::training::TrainConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn schedule() -> DdimSchedule {
    SamplerConfig::default().schedule().unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn freqs(l: usize) -> Vec<f64> {
    (0..l).map(|i| i as f64 / (l - 1) as f64).collect()
}

/// Returns the exact noise that turns a planted clean sample into `z_t`, counting calls.
struct Oracle {
    clean: Tensor,
    schedule: DdimSchedule,
    calls: [usize; 2],
}

impl NoisePredictor for Oracle {
    fn predict_noise(
        &mut self,
        z_t: &Tensor,
        t: usize,
        conditioned: bool,
    ) -> hrtf_latent::Result<Tensor> {
        self.calls[conditioned as usize] += 1;
        let a = self.schedule.alpha_bar(t);
        let data = z_t
            .data()
            .iter()
            .zip(self.clean.data())
            .map(|(z, c)| (z - a.sqrt() * c) / (1.0 - a).sqrt())
            .collect();
        Tensor::new(z_t.shape(), data)
    }
}

fn oracle(clean: Tensor) -> Oracle {
    Oracle {
        clean,
        schedule: schedule(),
        calls: [0, 0],
    }
}

#[test]
fn eta_zero_ignores_fresh_noise() {
    let s = schedule();
    let z = randn(&[4, 8], 1);
    let eps = randn(&[4, 8], 2);
    let a = s
        .ddim_step(&z, &eps, 600, 598, 0.0, &randn(&[4, 8], 3), 3.0)
        .unwrap();
    let b = s
        .ddim_step(&z, &eps, 600, 598, 0.0, &randn(&[4, 8], 4), 3.0)
        .unwrap();
    assert_eq!(a, b);
    let c = s
        .ddim_step(&z, &eps, 600, 598, 0.2, &randn(&[4, 8], 4), 3.0)
        .unwrap();
    assert_ne!(a, c);
}

#[test]
fn final_step_returns_clamped_clean_estimate() {
    let s = schedule();
    let t = 40;
    let a = s.alpha_bar(t);
    let eps = randn(&[10], 5);
    let z = Tensor::from_vec(
        eps.data()
            .iter()
            .enumerate()
            .map(|(i, e)| a.sqrt() * (i as f64 - 4.5) + (1.0 - a).sqrt() * e)
            .collect(),
    );
    let out = s
        .ddim_step(&z, &eps, t, 0, 0.2, &randn(&[10], 6), 3.0)
        .unwrap();
    for (i, v) in out.data().iter().enumerate() {
        let expected = (i as f64 - 4.5).clamp(-3.0, 3.0);
        assert!((v - expected).abs() < 1e-9, "{v} vs {expected}");
    }
}

#[test]
fn exact_noise_inverts_forward_process() {
    let s = schedule();
    let clean = randn(&[64], 7).map(|v| v.clamp(-3.0, 3.0));
    let eps = randn(&[64], 8);
    for t in [1, 2, 100, 500, 999, 1000] {
        let z_t = s.q_sample(&clean, t, &eps).unwrap();
        let back = s.ddim_step(&z_t, &eps, t, 0, 0.0, &eps, 3.0).unwrap();
        assert!(back.max_abs_diff(&clean) < 1e-5, "t = {t}");
    }
}

#[test]
fn sampler_recovers_planted_sample() {
    let clean = randn(&[3, 4, 8], 9).map(|v| v.clamp(-3.0, 3.0));
    let mut stub = oracle(clean.clone());
    let out = ddim_sample(
        &mut stub,
        &schedule(),
        &SamplerConfig::default(),
        &[3, 4, 8],
        11,
    )
    .unwrap();
    assert!(out.max_abs_diff(&clean) < 1e-4);
}

#[test]
fn guidance_doubles_network_calls() {
    let clean = randn(&[2, 4], 12);
    let cfg = SamplerConfig::default();
    let mut stub = oracle(clean.clone());
    ddim_sample(&mut stub, &schedule(), &cfg, &[2, 4], 0).unwrap();
    assert_eq!(stub.calls, [500, 500]);

    let mut stub = oracle(clean);
    let unguided = SamplerConfig {
        guidance: 0.0,
        ..cfg
    };
    ddim_sample(&mut stub, &schedule(), &unguided, &[2, 4], 0).unwrap();
    assert_eq!(stub.calls, [0, 500]);
}

#[test]
fn seeded_sampling_is_reproducible() {
    let clean = randn(&[2, 8], 13);
    let cfg = SamplerConfig {
        eta: 0.0,
        ..SamplerConfig::default()
    };
    let run =
        |seed| ddim_sample(&mut oracle(clean.clone()), &schedule(), &cfg, &[2, 8], seed).unwrap();
    assert_eq!(run(3).data(), run(3).data());
    assert!(ddim_sample(
        &mut oracle(clean.clone()),
        &schedule(),
        &SamplerConfig {
            infer_steps: 1001,
            ..cfg
        },
        &[2, 8],
        0
    )
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn deterministic_step_depends_only_on_state(
        z in proptest::collection::vec(-4.0f64..4.0, 6),
        e in proptest::collection::vec(-3.0f64..3.0, 6),
        noise in proptest::collection::vec(-3.0f64..3.0, 6),
        t in 2usize..=1000,
        back in 1usize..=50,
    ) {
        let s = schedule();
        let t_prev = t.saturating_sub(back);
        let (z, e) = (Tensor::from_vec(z), Tensor::from_vec(e));
        let a = s.ddim_step(&z, &e, t, t_prev, 0.0, &Tensor::from_vec(noise), 3.0).unwrap();
        let b = s.ddim_step(&z, &e, t, t_prev, 0.0, &Tensor::zeros(&[6]), 3.0).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn small_unet(channels: usize, seed: u64) -> PrototypeUnet {
    PrototypeUnet::new(UnetConfig {
        channels,
        widths: [8, 16, 16],
        embed_dim: 12,
        time_freqs: 4,
        ffm_freqs: 3,
        anthro_dim: 8,
        heads: 2,
        init_seed: seed,
        ..UnetConfig::default()
    })
    .unwrap()
}

fn run_unet(
    net: &PrototypeUnet,
    z: &Tensor,
    t: usize,
    anthro: &Tensor,
    guidance: Guidance<'_>,
) -> (Tensor, Vec<usize>) {
    let mut g = Graph::inference();
    let n = z.shape()[0];
    let noisy = g.constant(z.clone());
    let a = g.constant(anthro.clone());
    let mut trace = Vec::new();
    let f = freqs(z.shape()[2]);
    let y = net
        .forward_traced(
            &mut g,
            &net.store,
            UnetInputs {
                noisy,
                timesteps: &vec![t; n],
                frequencies_norm: &f,
                anthro: a,
                guidance,
            },
            &mut trace,
        )
        .unwrap();
    (g.value(y).clone(), trace)
}

#[test]
fn default_unet_preserves_shape_and_halves_tokens() {
    let net = PrototypeUnet::new(UnetConfig::default()).unwrap();
    let (y, trace) = run_unet(
        &net,
        &randn(&[1, 64, 128], 14),
        500,
        &randn(&[1, 23], 15),
        Guidance::Conditional,
    );
    assert_eq!(y.shape(), &[1, 64, 128]);
    assert_eq!(trace, vec![128, 64, 32, 64, 128]);
    assert!(y.is_finite());
}

#[test]
fn shape_round_trip_over_lengths() {
    let net = small_unet(6, 0);
    for l in [32, 64, 128] {
        let (y, trace) = run_unet(
            &net,
            &randn(&[2, 6, l], 16),
            10,
            &randn(&[2, 23], 17),
            Guidance::Conditional,
        );
        assert_eq!(y.shape(), &[2, 6, l]);
        assert_eq!(trace, vec![l, l / 2, l / 4, l / 2, l]);
    }
    let mut g = Graph::inference();
    let noisy = g.constant(randn(&[1, 6, 30], 0));
    let anthro = g.constant(randn(&[1, 23], 0));
    let f = freqs(30);
    let bad = UnetInputs {
        noisy,
        timesteps: &[1],
        frequencies_norm: &f,
        anthro,
        guidance: Guidance::Conditional,
    };
    assert!(net.forward(&mut g, &net.store, bad).is_err());
}

#[test]
fn anthropometry_steers_conditional_branch_only() {
    let net = small_unet(4, 1);
    let z = randn(&[1, 4, 16], 18);
    let a1 = randn(&[1, 23], 19);
    let a2 = randn(&[1, 23], 20);
    let (y1, _) = run_unet(&net, &z, 300, &a1, Guidance::Conditional);
    let (y2, _) = run_unet(&net, &z, 300, &a2, Guidance::Conditional);
    assert!(y1.max_abs_diff(&y2) > 0.0);
    let (u1, _) = run_unet(&net, &z, 300, &a1, Guidance::Unconditional);
    let (u2, _) = run_unet(&net, &z, 300, &a2, Guidance::Unconditional);
    assert_eq!(u1, u2);
    let (m, _) = run_unet(&net, &z, 300, &a1, Guidance::Mixed(&[false]));
    assert!(m.max_abs_diff(&u1) < 1e-12);
}

#[test]
fn miniature_unet_gradient_matches_finite_differences() {
    let net = PrototypeUnet::new(UnetConfig {
        channels: 2,
        widths: [2, 2, 2],
        embed_dim: 3,
        time_freqs: 2,
        ffm_freqs: 2,
        num_anthro: 3,
        anthro_dim: 2,
        heads: 1,
        dropout: 0.0,
        init_seed: 21,
    })
    .unwrap();
    let z = randn(&[1, 2, 8], 22);
    let a = randn(&[1, 3], 23);
    let target = randn(&[1, 2, 8], 24);
    let f = freqs(8);
    let err = max_relative_error_with_params(&net.store, &[z, a], 1e-5, |g, store, v| {
        let y = net
            .forward(
                g,
                store,
                UnetInputs {
                    noisy: v[0],
                    timesteps: &[137],
                    frequencies_norm: &f,
                    anthro: v[1],
                    guidance: Guidance::Conditional,
                },
            )
            .unwrap();
        let t = g.constant(target.clone());
        let d = g.sub(y, t);
        let sq = g.square(d);
        g.mean(sq)
    });
    assert!(err < 1e-3, "relative error {err:e}");
}

#[test]
fn initial_loss_near_one_on_unit_variance_targets() {
    let net = PrototypeUnet::new(UnetConfig {
        channels: 16,
        ..UnetConfig::default()
    })
    .unwrap();
    let s = schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let f = freqs(32);
    let mut total = 0.0;
    let (chunks, per) = (32, 32);
    for _ in 0..chunks {
        let clean = Tensor::randn(&[per, 16, 32], &mut rng);
        let a = Tensor::randn(&[per, 23], &mut rng);
        let mut g = Graph::inference();
        let loss = denoising_loss(
            &net,
            &mut g,
            &net.store,
            &s,
            &clean,
            &a,
            &f,
            &[true; 32],
            &mut rng,
        )
        .unwrap();
        total += g.value(loss).item();
    }
    let mean = total / chunks as f64;
    assert!((0.5..=2.0).contains(&mean), "initial loss {mean}");
}

fn two_subject_targets(latent: usize) -> PrototypeTargets {
    let ds = synth_generate(1, &SynthSpec::simple("pair", 2, 8, 16)).unwrap();
    let set = MergedTrainingSet::single(ds.clone(), &[0, 1]);
    let mut ae = ConditionedAutoencoder::new(AutoencoderConfig {
        latent_dim: latent,
        hidden: 4,
        generator_hidden: 6,
        ffm_freqs: 2,
        init_seed: 3,
    })
    .unwrap();
    ae.freeze();
    let stats = fit_magnitude_stats(&ds, &[0, 1]).unwrap();
    let grid = TokenGrid::from_dataset(&ds).unwrap();
    let mut archive = PrototypeArchive::new(latent, 16);
    for s in 0..2 {
        let raw: Vec<f64> = ds.subjects[s]
            .magnitudes_db
            .iter()
            .map(|&v| v as f64)
            .collect();
        let p = ae
            .prototypes(&[&stats.apply(&raw, false).unwrap()], &grid)
            .unwrap()
            .pop()
            .unwrap();
        archive
            .push("pair", &ds.subjects[s].subject_id, &p)
            .unwrap();
    }
    PrototypeTargets::fit(&set, &archive).unwrap()
}

#[test]
fn prototype_batch_is_channel_major() {
    let targets = two_subject_targets(4);
    let (z, a) = prototype_batch(&targets, &[2]).unwrap();
    assert_eq!(z.shape(), &[1, 4, 16]);
    assert_eq!(a.row(0), targets.examples[2].anthro_norm.as_slice());
    // channel 3, bin 5
    assert_eq!(z.data()[3 * 16 + 5], targets.examples[2].target[5 * 4 + 3]);
}

#[test]
fn never_dropping_conditioning_warns() {
    let targets = two_subject_targets(4);
    let sched = schedule();
    let quick = |cond_drop| DiffusionTrainConfig {
        train: TrainConfig {
            max_steps: Some(2),
            batch_size: 2,
            validation_fraction: 0.0,
            ..DiffusionTrainConfig::default().train
        },
        cond_drop,
        ..DiffusionTrainConfig::default()
    };
    let mut net = small_unet(4, 2);
    let out = train_diffusion(&mut net, &sched, &targets, None, &quick(0.0)).unwrap();
    assert_eq!(out.history.steps, 2);
    assert_eq!(out.warnings.len(), 1);
    assert!(out.warnings[0].contains("unconditional"));
    let out = train_diffusion(&mut net, &sched, &targets, Some(&targets), &quick(0.1)).unwrap();
    assert!(out.warnings.is_empty());
    assert!(out.history.epochs[0].val_loss.is_some());

    let mut wrong = small_unet(6, 2);
    assert!(train_diffusion(&mut wrong, &sched, &targets, None, &quick(0.1)).is_err());
}

#[test]
fn sampled_prototypes_respect_clamp() {
    let targets = two_subject_targets(4);
    let net = small_unet(4, 3);
    let cfg = SamplerConfig {
        infer_steps: 20,
        clamp: 0.5,
        ..SamplerConfig::default()
    };
    let a: Vec<&[f64]> = targets
        .examples
        .iter()
        .map(|e| e.anthro_norm.as_slice())
        .collect();
    let protos =
        sample_prototypes(&net, &schedule(), &cfg, &a, &targets.frequencies_norm, 5).unwrap();
    assert_eq!(protos.len(), 4);
    for p in &protos {
        assert_eq!(p.shape(), &[16, 4]);
        assert!(p.data().iter().all(|v| v.abs() <= 0.5));
    }
    let again =
        sample_prototypes(&net, &schedule(), &cfg, &a, &targets.frequencies_norm, 5).unwrap();
    assert_eq!(protos, again);
    let other =
        sample_prototypes(&net, &schedule(), &cfg, &a, &targets.frequencies_norm, 6).unwrap();
    assert_ne!(protos, other);
}
