use hrtf_latent::autoencoder::{
    lsd_loss, lsd_terms, pool_prototype, pretrain_autoencoder, AutoencoderConfig,
    ConditionedAutoencoder, PretrainConfig, PrototypeArchive, TokenGrid,
};
use hrtf_latent::checkpoint::Checkpoint;
use hrtf_latent::data::synth::{synth_generate, SynthSpec};
use hrtf_latent::data::{fibonacci_sphere, linear_frequency_grid, Ear, MergedTrainingSet};
use hrtf_latent::numerics::gradcheck::max_relative_error_with_params;
use hrtf_latent::numerics::Tensor;
use hrtf_latent::training::{StopReason, TrainConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(seed: u64) -> ConditionedAutoencoder {
    ConditionedAutoencoder::new(AutoencoderConfig {
        latent_dim: 3,
        hidden: 4,
        generator_hidden: 5,
        ffm_freqs: 2,
        init_seed: seed,
    })
    .unwrap()
}

fn grid(b: usize, l: usize) -> TokenGrid {
    TokenGrid::from_positions(
        &fibonacci_sphere(b, 1.0),
        1.0,
        &linear_frequency_grid(l, 20000.0),
        20000.0,
    )
    .unwrap()
}

fn magnitudes(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[len], &mut rng).into_data()
}

#[test]
fn duplicated_position_duplicates_latents() {
    let ae = tiny(0);
    let dirs: Vec<[f64; 3]> = fibonacci_sphere(3, 1.0)
        .iter()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    let with_copy = vec![dirs[0], dirs[1], dirs[2], dirs[1]];
    let g = TokenGrid::new(&with_copy, &linear_frequency_grid(4, 20000.0), 20000.0).unwrap();
    let mut m = magnitudes(3 * 8, 1);
    m.extend_from_slice(&m[8..16].to_vec());
    let z = ae.encode(&m, &g).unwrap();
    assert_eq!(z.shape(), &[4, 8, 3]);
    assert_eq!(z.row(1), z.row(3));
}

#[test]
fn latent_depends_only_on_its_own_token() {
    let ae = tiny(2);
    let g = grid(3, 2);
    let m = magnitudes(12, 3);
    let base = ae.encode(&m, &g).unwrap();
    let h = 1e-4;
    // Perturb the token (position 1, right ear, bin 0) = flat index 1·4 + 2.
    let probe = 6;
    let mut bumped = m.clone();
    bumped[probe] += h;
    let moved = ae.encode(&bumped, &g).unwrap();
    let d = 3;
    for token in 0..12 {
        let delta: f64 = (0..d)
            .map(|k| (moved.data()[token * d + k] - base.data()[token * d + k]).abs())
            .sum();
        if token == probe {
            assert!(delta / h > 1e-6, "own latent did not respond");
        } else {
            assert_eq!(delta, 0.0, "token {token} responded to another token");
        }
    }
}

#[test]
fn prototype_invariant_to_position_permutation() {
    let ae = tiny(4);
    let b = 6;
    let l = 3;
    let g = grid(b, l);
    let m = magnitudes(b * 2 * l, 5);
    let proto = pool_prototype(&ae.encode(&m, &g).unwrap()).unwrap();

    let perm = [4, 0, 5, 2, 1, 3];
    let permuted_grid = g.positions(&perm);
    let rows = 2 * l;
    let pm: Vec<f64> = perm
        .iter()
        .flat_map(|&p| m[p * rows..(p + 1) * rows].to_vec())
        .collect();
    let permuted = pool_prototype(&ae.encode(&pm, &permuted_grid).unwrap()).unwrap();
    assert!(proto.max_abs_diff(&permuted) < 1e-6);
}

#[test]
fn decoder_accepts_foreign_grid() {
    let ae = tiny(6);
    let m = magnitudes(5 * 8, 7);
    let proto = pool_prototype(&ae.encode(&m, &grid(5, 4)).unwrap()).unwrap();
    let y = ae.decode(&proto, &grid(7, 4)).unwrap();
    assert_eq!(y.shape(), &[7, 8]);
    assert!(y.is_finite());
    assert_eq!(ae.decode(&proto, &grid(5, 4)).unwrap().shape(), &[5, 8]);
}

proptest! {
    #[test]
    fn lsd_terms_scale_with_error(
        truth in proptest::collection::vec(-40.0f64..10.0, 12),
        err in proptest::collection::vec(-5.0f64..5.0, 12),
        s in -4.0f64..4.0,
    ) {
        let pred: Vec<f64> = truth.iter().zip(&err).map(|(t, e)| t + e).collect();
        let scaled: Vec<f64> = truth.iter().zip(&err).map(|(t, e)| t + s * e).collect();
        let base = lsd_terms(&pred, &truth, 4).unwrap();
        let after = lsd_terms(&scaled, &truth, 4).unwrap();
        for (a, b) in base.iter().zip(&after) {
            prop_assert!((b - s.abs() * a).abs() < 1e-9 * (1.0 + a));
        }
    }
}

#[test]
fn reconstruction_loss_gradient_matches_finite_differences() {
    let ae = tiny(8);
    let (b, l) = (2, 3);
    let g = grid(b, l);
    let x = magnitudes(b * 2 * l, 9);
    let truth = magnitudes(b * 2 * l, 10)
        .iter()
        .map(|v| 3.0 * v - 5.0)
        .collect::<Vec<_>>();
    let cond = g.conditioning.clone();
    let err = max_relative_error_with_params(&ae.store, &[], 1e-5, |gr, store, _| {
        let mut model = ae.clone();
        model.store = store.clone();
        let c = gr.constant(cond.clone());
        let xv = gr.constant(Tensor::new(&[b * 2 * l, 1, 1], x.clone()).unwrap());
        let z = model.encode_tokens(gr, c, xv);
        let p = model.pool_tokens(gr, z, b);
        let y = model.decode_tokens(gr, c, p, b);
        let y = gr.scale(y, 4.0);
        let y = gr.reshape(y, &[b, 2, l, 1]);
        let t = gr.constant(Tensor::new(&[b, 2, l, 1], truth.clone()).unwrap());
        lsd_loss(gr, y, t, 2)
    });
    assert!(err < 1e-4, "relative error {err:e}");
}

fn synth(
    id: &str,
    subjects: usize,
    b: usize,
    l: usize,
    seed: u64,
) -> hrtf_latent::data::HrtfDataset {
    synth_generate(seed, &SynthSpec::simple(id, subjects, b, l)).unwrap()
}

#[test]
fn early_stopping_halts_flat_validation() {
    let ds = synth("flat", 4, 8, 4, 1);
    let set = MergedTrainingSet::single(ds, &[0, 1, 2, 3]);
    let mut ae = tiny(10);
    let cfg = PretrainConfig {
        train: TrainConfig {
            learning_rate: 1e-300,
            weight_decay: 0.0,
            patience: 3,
            validation_fraction: 0.25,
            batch_size: 4,
            ..TrainConfig::default()
        },
        positions_per_step: None,
    };
    let out = pretrain_autoencoder(&mut ae, &set, &cfg).unwrap();
    assert_eq!(out.history.stop_reason, StopReason::EarlyStopping);
    assert_eq!(out.history.epochs.len(), 4);
    assert!(out.history.epochs.len() < 300);
    assert_eq!(out.validation_members.len(), 1);
    let best: Vec<f64> = out.history.epochs.iter().map(|e| e.best_loss).collect();
    assert!(best.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn pretraining_freezes_and_archives_every_member() {
    let ds = synth("arch", 3, 6, 4, 2);
    let set = MergedTrainingSet::single(ds.clone(), &[0, 1, 2]);
    let mut ae = tiny(11);
    let cfg = PretrainConfig {
        train: TrainConfig {
            max_steps: Some(3),
            batch_size: 3,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        },
        positions_per_step: Some(4),
    };
    let before = ae.decoder_fingerprint();
    let out = pretrain_autoencoder(&mut ae, &set, &cfg).unwrap();
    assert_eq!(out.history.stop_reason, StopReason::MaxSteps);
    assert_ne!(before, ae.decoder_fingerprint());
    assert!(ae.is_frozen());
    assert!(pretrain_autoencoder(&mut ae, &set, &cfg).is_err());
    assert_eq!(out.archive.entries.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("protos.bin");
    out.archive.save(&path).unwrap();
    let back = PrototypeArchive::load(&path).unwrap();
    let id = &ds.subjects[1].subject_id;
    let proto = back.prototype("arch", id).unwrap();
    assert_eq!(proto.shape(), &[8, 3]);
    let right = back.ear_prototype("arch", id, Ear::Right).unwrap();
    assert_eq!(right.data(), &proto.data()[12..]);

    let ck = Checkpoint::capture(
        "autoencoder",
        &ae.config,
        serde_json::Value::Null,
        &ae.store,
    )
    .unwrap();
    let ck_path = dir.path().join("ae.ckpt");
    ck.save(&ck_path).unwrap();
    let loaded = Checkpoint::load(&ck_path).unwrap();
    let mut restored = ConditionedAutoencoder::new(loaded.config().unwrap()).unwrap();
    loaded.restore_into(&mut restored.store).unwrap();
    let g = TokenGrid::from_dataset(&ds).unwrap();
    let a = ae.decode(&proto, &g).unwrap();
    let b = restored.decode(&proto, &g).unwrap();
    // Parameters pass through 32-bit storage.
    assert!(a.max_abs_diff(&b) < 1e-4);
}

#[test]
fn joint_pretraining_over_two_grids_has_no_grid_parameters() {
    let a = synth("grid-a", 2, 10, 4, 3);
    let b = synth("grid-b", 2, 7, 4, 4);
    let set = MergedTrainingSet::from_parts(vec![(a, vec![0, 1]), (b, vec![0, 1])]).unwrap();
    assert!(!set.single_grid());
    let mut ae = tiny(12);
    let count = ae.parameter_count();
    let cfg = PretrainConfig {
        train: TrainConfig {
            max_steps: Some(4),
            batch_size: 2,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        },
        positions_per_step: None,
    };
    let out = pretrain_autoencoder(&mut ae, &set, &cfg).unwrap();
    assert_eq!(ae.parameter_count(), count);
    assert_eq!(out.magnitude_stats.len(), 2);
    assert_eq!(out.archive.entries.len(), 4);
    assert!(out.train_lsd.is_finite());
}
