//! Distractor anthropometry: inert in the generator, and without a measurable effect on a
//! trained prototype DNN's test error.

use hrtf_latent::autoencoder::{AutoencoderConfig, PretrainConfig};
use hrtf_latent::data::synth::{synth_generate, synth_subject_magnitudes, SynthSpec};
use hrtf_latent::data::AnthropometricVector;
use hrtf_latent::pipeline::*;
use hrtf_latent::training::TrainConfig;
use proptest::prelude::*;

const INFORMATIVE: [usize; 2] = [0, 20];

fn shuffle_distractors(v: &AnthropometricVector, rotate: usize) -> AnthropometricVector {
    let values = v.values();
    let slots: Vec<usize> = (0..values.len())
        .filter(|i| !INFORMATIVE.contains(i))
        .collect();
    let mut out = *values;
    for (k, &slot) in slots.iter().enumerate() {
        out[slot] = values[slots[(k + rotate) % slots.len()]];
    }
    AnthropometricVector::new(out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn synthetic_magnitudes_ignore_distractors(seed in 0u64..1000, rotate in 1usize..21) {
        let spec = SynthSpec::simple("d", 3, 9, 6);
        let ds = synth_generate(seed, &spec).unwrap();
        for s in &ds.subjects {
            let alpha = shuffle_distractors(s.anthropometry_left.as_ref().unwrap(), rotate);
            let v = alpha.values();
            let again = synth_subject_magnitudes(
                &ds.positions, &ds.frequencies_hz, ds.source_distance_m, ds.f_max_hz, v[0], v[20],
            );
            prop_assert_eq!(&again, &s.magnitudes_db);
        }
    }
}

/// Two-sided 5% critical value of Student's t with 7 degrees of freedom.
const T_CRIT_DF7: f64 = 2.365;

#[test]
fn trained_dnn_is_indifferent_to_distractors() {
    let id = |s: usize| format!("p-{s:03}");
    let cfg = ExperimentConfig {
        datasets: vec![DatasetSource {
            synth: Some(SynthSource {
                dataset_id: "p".into(),
                num_subjects: 48,
                num_without_anthropometry: 0,
                num_positions: 32,
                num_freq_bins: 32,
            }),
            train_ids: (0..40).map(id).collect(),
            test_ids: (40..48).map(id).collect(),
            ..DatasetSource::default()
        }],
        autoencoder: AutoencoderConfig {
            latent_dim: 16,
            ..AutoencoderConfig::default()
        },
        pretrain: PretrainConfig {
            train: TrainConfig {
                weight_decay: 0.0,
                batch_size: 8,
                validation_fraction: 0.0,
                max_steps: Some(200),
                max_epochs: usize::MAX,
                patience: usize::MAX,
                ..TrainConfig::default()
            },
            positions_per_step: Some(8),
        },
        ..ExperimentConfig::default()
    };
    let mut data = LoadedData::load(&cfg).unwrap();
    let (ae, pre) = run_pretraining(&cfg, &data).unwrap();
    let trained = run_estimator_training(
        &cfg,
        cfg.hyperparameters(),
        &data,
        &pre.archive,
        pre.magnitude_stats.clone(),
    )
    .unwrap();
    let base =
        evaluate_estimator(&cfg, &data, &trained.estimator, &trained.normalizers, &ae).unwrap();

    // The informative inputs do move the prediction.
    let ind = Individualizer::new(
        trained.estimator.clone(),
        ae.clone(),
        trained.normalizers.clone(),
        0,
    )
    .unwrap();
    let grid = TargetGrid::of_dataset(&data.datasets[0]);
    let alpha = data.datasets[0].subjects[40].anthropometry_left.unwrap();
    let mut wider = *alpha.values();
    wider[0] += 3.0;
    wider[20] += 0.5;
    let wider = AnthropometricVector::new(wider).unwrap();
    let a = ind.individualize([&alpha, &alpha], &grid, "p", 0).unwrap();
    let b = ind.individualize([&wider, &wider], &grid, "p", 0).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-3);

    for s in &mut data.datasets[0].subjects[40..] {
        for ear in [&mut s.anthropometry_left, &mut s.anthropometry_right] {
            *ear = ear.as_ref().map(|v| shuffle_distractors(v, 7));
        }
    }
    let shuffled =
        evaluate_estimator(&cfg, &data, &trained.estimator, &trained.normalizers, &ae).unwrap();
    let diffs: Vec<f64> = base
        .subjects
        .iter()
        .zip(&shuffled.subjects)
        .map(|(x, y)| y.lsd_db - x.lsd_db)
        .collect();
    let n = diffs.len() as f64;
    assert_eq!(diffs.len(), 8);
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = mean / (sd / n.sqrt());
    assert!(
        t.abs() < T_CRIT_DF7,
        "paired t = {t:.3} (mean diff {mean:.4} dB)"
    );
}
