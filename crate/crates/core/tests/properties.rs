use layerwise::circuits::{CircuitTemplate, DataEncoding, LayerStreams, Prefix};
use layerwise::data::{encode_dataset, EncodeConfig, RawDataset};
use layerwise::experiments::{expected_repetitions, group_by_config, read_runs_csv, write_runs_csv};
use layerwise::gradients::{batch_loss_grad, fd_grad, shift_grad, Estimator, LabeledInput};
use layerwise::sim::{run_circuit, StateVector};
use layerwise::training::{
    cdl_schedule, ll_schedule, mean_loss, train, InitMode, LlConfig, ParameterStore, RunRecord,
    Strategy as TrainStrategy, TrainOptions, TrainingData, TrainingSchedule,
};
use layerwise::Exec;
use proptest::prelude::*;
use std::f64::consts::TAU;

fn angles(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-TAU..TAU, n)
}

fn tiny_data(n_qubits: usize, n_train: usize, seed: u64) -> TrainingData {
    let sample = |i: usize, salt: u64| {
        let features: Vec<f64> = (0..n_qubits)
            .map(|q| ((i as u64 * 37 + q as u64 * 11 + seed % 97 * 7 + salt) % 97) as f64 / 97.0 * TAU)
            .collect();
        LabeledInput {
            state: DataEncoding::HalfAngle.encode(&features).unwrap(),
            label: (i % 2) as u8,
        }
    };
    TrainingData {
        train: (0..n_train).map(|i| sample(i, 0)).collect(),
        test: (0..4).map(|i| sample(i, 5)).collect(),
    }
}

fn options(n_qubits: usize, seed: u64, estimator: Estimator, batch_size: usize) -> TrainOptions {
    TrainOptions {
        n_qubits,
        circuit_seed: seed ^ 0x5eed,
        seed,
        estimator,
        eta: 0.05,
        batch_size,
        sample_rate_hz: 1e4,
        exec: Exec::Sequential,
    }
}

fn run(schedule: &TrainingSchedule, data: &TrainingData, opts: &TrainOptions) -> RunRecord {
    train(
        schedule,
        data,
        opts,
        TrainStrategy::Ll,
        "ll_eta0.05",
        serde_json::Value::Null,
    )
    .unwrap()
}

fn ll_config() -> impl Strategy<Value = LlConfig> {
    (
        1..4usize,
        1..3usize,
        0..3usize,
        1..4usize,
        1..4usize,
        0..3usize,
        any::<bool>(),
    )
        .prop_map(
            |(s, p, extra_q, steps, blocks, sweeps, initial_always_active)| LlConfig {
                total_layers: s + p * steps,
                start_layers: s,
                layers_per_step: p,
                freeze_window: p + extra_q,
                epochs_per_segment: 1,
                phase_two_fraction: 1.0 / blocks as f64,
                sweeps,
                initial_always_active,
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn slots_stay_contiguous_under_growth(n in 1..5usize, steps in prop::collection::vec(1..4usize, 1..5), seed in any::<u64>()) {
        let streams = LayerStreams::new(seed);
        let mut t = CircuitTemplate::new(n, Prefix::None).unwrap();
        for p in steps {
            t.grow(p, &streams).unwrap();
        }
        prop_assert_eq!(t.n_params(), n * t.n_layers());
        for (k, layer) in t.layers().iter().enumerate() {
            let slots: Vec<usize> = layer.rotations.iter().map(|r| r.slot).collect();
            prop_assert_eq!(slots, (k * n..(k + 1) * n).collect::<Vec<_>>());
            prop_assert_eq!(t.slots_of_layer(k), k * n..(k + 1) * n);
        }
    }

    #[test]
    fn zero_angles_fix_the_zero_state(n in 1..6usize, layers in 1..6usize, seed in any::<u64>()) {
        let t = CircuitTemplate::random(n, layers, Prefix::None, &LayerStreams::new(seed)).unwrap();
        let out = run_circuit(&t, &ParameterStore::zeros(t.n_params()), &StateVector::zero(n).unwrap()).unwrap();
        prop_assert!((out.amplitudes()[0].re - 1.0).abs() < 1e-12);
        prop_assert!(out.amplitudes()[1..].iter().all(|a| a.norm() < 1e-12));
    }

    #[test]
    fn shift_rule_matches_finite_differences(n in 1..5usize, layers in 1..4usize, seed in any::<u64>(), xs in angles(16), hadamard in any::<bool>()) {
        let prefix = if hadamard { Prefix::HadamardWall } else { Prefix::None };
        let t = CircuitTemplate::random(n, layers, prefix, &LayerStreams::new(seed)).unwrap();
        let p = ParameterStore::from_values(xs[..t.n_params()].to_vec());
        let input = StateVector::zero(n).unwrap();
        for slot in 0..t.n_params() {
            let exact = shift_grad(&t, &p, slot, &input, &Estimator::Exact).unwrap();
            let fd = fd_grad(&t, &p, slot, &input, 1e-5).unwrap();
            prop_assert!((exact - fd).abs() < 1e-6, "slot {}: {} vs {}", slot, exact, fd);
        }
    }

    #[test]
    fn batch_gradient_charges_closed_form_shots(n in 1..4usize, layers in 1..4usize, m in 1..20u32, b in 1..6usize, seed in any::<u64>(), pick in prop::collection::vec(any::<bool>(), 12)) {
        let t = CircuitTemplate::random(n, layers, Prefix::None, &LayerStreams::new(seed)).unwrap();
        let p = ParameterStore::zeros(t.n_params());
        let trainable: Vec<usize> = (0..t.n_params()).filter(|&s| pick[s]).collect();
        prop_assume!(!trainable.is_empty());
        let data = tiny_data(n, b, seed);
        let bg = batch_loss_grad(&t, &p, &trainable, &data.train, &Estimator::Shots { shots: m, seed }, Exec::Sequential).unwrap();
        prop_assert_eq!(bg.gradient_measurements, 2 * trainable.len() as u64 * u64::from(m) * b as u64);
        prop_assert_eq!(bg.forward_measurements, u64::from(m) * b as u64);
        prop_assert_eq!(bg.grads.len(), trainable.len());
    }

    #[test]
    fn encoding_is_deterministic_and_in_range(seed in 0..1000u64, per_class in 2..6usize) {
        let raw = synthetic_digits(seed, 20);
        let cfg = EncodeConfig { n_components: 3, classes: [1, 2], per_class_train: per_class, per_class_test: 2, seed, ..Default::default() };
        let a = encode_dataset(&raw, &cfg).unwrap();
        let b = encode_dataset(&raw, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        for f in a.train.features.iter().chain(&a.test.features) {
            prop_assert!(f.iter().all(|x| (0.0..TAU).contains(x)));
        }
        for (s, f) in a.split.train.iter().zip(&a.train.features) {
            prop_assert_eq!(&a.model.encode(&raw.pixels(s.index)), f);
        }
    }

    #[test]
    fn pca_ignores_test_images(seed in 0..1000u64, noise in any::<u8>()) {
        let raw = synthetic_digits(seed, 20);
        let cfg = EncodeConfig { n_components: 3, classes: [1, 2], per_class_train: 4, per_class_test: 3, seed, ..Default::default() };
        let base = encode_dataset(&raw, &cfg).unwrap();
        let mut altered = raw.clone();
        for s in &base.split.test {
            for px in altered.images[s.index].iter_mut() {
                *px = px.wrapping_add(noise);
            }
        }
        let other = encode_dataset(&altered, &cfg).unwrap();
        prop_assert_eq!(base.model, other.model);
        prop_assert_eq!(base.train, other.train);
    }

    #[test]
    fn repetitions_invert_success_probability(p in 1e-6..=1.0f64) {
        prop_assert!((expected_repetitions(p) * p - 1.0).abs() < 1e-12);
    }
}

fn synthetic_digits(seed: u64, per_digit: usize) -> RawDataset {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for digit in 0..4u8 {
        for i in 0..per_digit {
            images.push(
                (0..36)
                    .map(|px| {
                        let mut h = seed ^ (u64::from(digit) << 48) ^ ((i as u64) << 32) ^ px as u64;
                        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
                        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
                        (h ^ (h >> 31)) as u8
                    })
                    .collect(),
            );
            labels.push(digit);
        }
    }
    RawDataset {
        rows: 6,
        cols: 6,
        images,
        labels,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn frozen_slots_keep_their_values(cfg in ll_config(), seed in 0..1000u64, shots in any::<bool>()) {
        let schedule = ll_schedule(&cfg).unwrap();
        let est = if shots { Estimator::Shots { shots: 5, seed: 0 } } else { Estimator::Exact };
        let data = tiny_data(2, 4, seed);
        let opts = options(2, seed, est, 2);
        let mut before: Vec<f64> = Vec::new();
        for k in 1..=schedule.segments.len() {
            let prefix = TrainingSchedule { segments: schedule.segments[..k].to_vec(), ..schedule.clone() };
            let after = run(&prefix, &data, &opts).final_params;
            let trainable = schedule.segments[k - 1].trainable_slots(2);
            for (slot, (x, y)) in before.iter().zip(&after).enumerate() {
                if !trainable.contains(&slot) {
                    prop_assert_eq!(x.to_bits(), y.to_bits(), "segment {} moved frozen slot {}", k - 1, slot);
                }
            }
            prop_assert!((before.len()..after.len()).all(|slot| trainable.contains(&slot)));
            before = after;
        }
    }

    #[test]
    fn runs_are_deterministic_and_ledgers_close(cfg in ll_config(), seed in 0..1000u64, m in 1..8u32, cdl in any::<bool>()) {
        let schedule = if cdl { cdl_schedule(cfg.total_layers, 3, InitMode::Uniform).unwrap() } else { ll_schedule(&cfg).unwrap() };
        let data = tiny_data(2, 6, seed);
        let opts = options(2, seed, Estimator::Shots { shots: m, seed: 0 }, 3);
        let a = run(&schedule, &data, &opts);
        let b = run(&schedule, &data, &TrainOptions { exec: Exec::Parallel, ..opts.clone() });
        prop_assert_eq!(&a, &b);

        let mut expected = 0u64;
        let mut epochs = a.epochs.iter();
        for seg in &schedule.segments {
            let n_p = seg.trainable_slots(2).len() as u64;
            for _ in 0..seg.epochs {
                expected += 2 * n_p * u64::from(m) * 6;
                let e = epochs.next().unwrap();
                prop_assert_eq!(e.cumulative_measurements, expected);
                prop_assert_eq!(e.wall_seconds_estimate, expected as f64 / 1e4);
            }
        }

        let b = RunRecord { run_id: format!("{}-copy", a.run_id), ..b };
        let mut csv = Vec::new();
        write_runs_csv([&a, &b], &mut csv).unwrap();
        let back = read_runs_csv(csv.as_slice()).unwrap();
        let direct = group_by_config(vec![a.clone(), b.clone()]);
        let reread = group_by_config(back);
        prop_assert_eq!(direct[0].runtime_curve(), reread[0].runtime_curve());
        prop_assert_eq!(direct[0].success_curve(&[0.5, 0.65]), reread[0].success_curve(&[0.5, 0.65]));
    }
}

#[test]
fn zero_layers_leave_the_loss_of_one_qubit_unchanged() {
    let data = tiny_data(1, 6, 3);
    let streams = LayerStreams::new(9);
    let mut t = CircuitTemplate::new(1, Prefix::None).unwrap();
    t.grow(2, &streams).unwrap();
    let p = ParameterStore::from_values(vec![0.7, -1.3]);
    let before = mean_loss(&t, &p, &data.train).unwrap();
    t.grow(3, &streams).unwrap();
    let mut grown = p.clone();
    grown.extend([0.0; 3]);
    let after = mean_loss(&t, &grown, &data.train).unwrap();
    assert!((before - after).abs() < 1e-9, "{before} vs {after}");
}

#[test]
fn post_growth_loss_is_deterministic() {
    let data = tiny_data(3, 6, 4);
    let loss = || {
        let streams = LayerStreams::new(21);
        let mut t = CircuitTemplate::new(3, Prefix::None).unwrap();
        t.grow(2, &streams).unwrap();
        t.grow(2, &streams).unwrap();
        let mut p = ParameterStore::from_values((0..6).map(|i| 0.3 * i as f64).collect());
        p.extend([0.0; 6]);
        mean_loss(&t, &p, &data.train).unwrap()
    };
    assert_eq!(loss().to_bits(), loss().to_bits());
}
