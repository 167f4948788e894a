use std::sync::Mutex;

use longiseg_core::input::channel;
use longiseg_core::preprocess::AffineBackend;
use longiseg_core::synth::{Split, SynthConfig};
use longiseg_core::{InputScheme, InputStack, Plane, ProbSlice};
use longiseg_model::{BackboneConfig, Network, Tensor};
use longiseg_train::*;
use proptest::prelude::*;

fn small(split: Split) -> Vec<PatientVolumes<f64>> {
    let cfg = SynthConfig {
        shape: [32, 32, 32],
        splits: [2, 1, 2],
        ..SynthConfig::default()
    };
    synthetic_split(&cfg, split, &AffineBackend, [16, 16, 16]).unwrap()
}

fn tiny_net(seed: u64) -> Network<f64> {
    Network::new(BackboneConfig::tiny(seed)).unwrap()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        epochs: 2,
        samples_per_epoch: Some(16),
        val_samples: Some(8),
        ..TrainConfig::default()
    }
}

#[test]
fn oracle_backend_is_perfect_every_round() {
    let test = small(Split::Test);
    let ev = evaluate_rounds(&GroundTruthSegmenter, &test, 2, 20).unwrap();
    assert_eq!(ev.rounds(), 3);
    for p in &ev.patients {
        for r in &p.rounds {
            assert_eq!(r.edit_count, 0);
            for m in [r.ggo, r.cons] {
                assert_eq!((m.dsc, m.ppv, m.tpr, m.vd), (1.0, 1.0, 1.0, Some(0.0)));
            }
        }
    }
    assert_eq!(ev.mean_dice_by_round(), vec![1.0; 3]);
}

#[test]
fn zero_rounds_gives_one_report() {
    let test = small(Split::Test);
    let ev = evaluate_rounds(&GroundTruthSegmenter, &test, 0, 20).unwrap();
    for p in &ev.patients {
        assert_eq!(p.rounds.len(), 1);
        assert_eq!(p.rounds[0].round, 0);
    }
    let lines: Vec<serde_json::Value> = ev
        .to_jsonl()
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    // 2 classes x 4 metrics + the foreground mean
    assert_eq!(lines.len(), 9);
    assert!(lines.iter().all(|l| l["round"] == 0 && l["n"] == 2));
    assert!(ev.dice_csv().starts_with("round,dice_ggo,dice_cons,dice_mean\n0,1.0"));
}

#[test]
fn empty_test_set_rejected() {
    let none: Vec<PatientVolumes<f64>> = Vec::new();
    assert!(matches!(
        evaluate_rounds(&GroundTruthSegmenter, &none, 1, 20),
        Err(TrainError::EmptyDataset(_))
    ));
}

/// Records every stack it is given and answers with uniform probabilities.
struct Spy(Mutex<Vec<(Plane, Pass, InputStack<f64>)>>);

impl SliceSegmenter<f64> for Spy {
    fn scheme(&self) -> InputScheme {
        InputScheme::Proposed
    }

    fn segment(
        &self,
        _patient: &PatientVolumes<f64>,
        plane: Plane,
        pass: Pass,
        _indices: &[usize],
        stacks: &[InputStack<f64>],
    ) -> longiseg_train::Result<Vec<ProbSlice<f64>>> {
        let mut seen = self.0.lock().unwrap();
        seen.extend(stacks.iter().map(|s| (plane, pass, s.clone())));
        Ok(stacks.iter().map(|s| ProbSlice::uniform(s.shape())).collect())
    }
}

#[test]
fn first_round_uses_empty_refinement_channels() {
    let p = &small(Split::Test)[0];
    let spy = Spy(Mutex::new(Vec::new()));
    let pred = predict_volume(&spy, p, None, None).unwrap();
    let seen = spy.0.into_inner().unwrap();
    assert_eq!(seen.len(), 48);
    for (_, pass, s) in &seen {
        assert_eq!(*pass, Pass::Initial);
        for c in [channel::PREV_MAX_PROB, channel::PREV_LABELS, channel::EDITS[0], channel::EDITS[1]] {
            assert!(s.channel(c).iter().all(|&v| v == 0.0));
        }
    }
    // uniform everywhere: ties go to background
    assert!(pred.labels.as_slice().iter().all(|&l| l == 0));
}

#[test]
fn refinement_rounds_feed_previous_output_and_edits() {
    let p = &small(Split::Test)[0];
    let spy = Spy(Mutex::new(Vec::new()));
    let first = predict_volume(&spy, p, None, None).unwrap();
    let (edits, count) = scripted_edits(&first.labels, p.ground_truth().unwrap(), 20).unwrap();
    assert!(count > 0);
    spy.0.lock().unwrap().clear();
    predict_volume(&spy, p, Some(&first), Some(&edits)).unwrap();
    let seen = spy.0.into_inner().unwrap();
    let third = 1.0 / 3.0;
    let mut nonzero_edits = 0;
    for (_, pass, s) in &seen {
        assert_eq!(*pass, Pass::Refine);
        assert!(s.channel(channel::PREV_MAX_PROB).iter().all(|&v| (v - third).abs() < 1e-12));
        nonzero_edits += s.channel(channel::EDITS[0]).iter().filter(|&&v| v != 0.0).count();
        nonzero_edits += s.channel(channel::EDITS[1]).iter().filter(|&&v| v != 0.0).count();
    }
    // every edited voxel shows up once per plane
    assert_eq!(nonzero_edits, 3 * edits.nonzero_count());
}

#[test]
fn mismatched_previous_round_rejected() {
    let test = small(Split::Test);
    let prev = predict_volume(&GroundTruthSegmenter, &test[0], None, None).unwrap();
    assert!(predict_volume(&GroundTruthSegmenter, &test[1], Some(&prev), None).is_ok());
    let cfg = SynthConfig {
        shape: [32, 32, 32],
        splits: [1, 0, 0],
        ..SynthConfig::default()
    };
    let q = &synthetic_split::<f64>(&cfg, Split::Train, &AffineBackend, [16, 16, 20]).unwrap()[0];
    assert!(predict_volume(&GroundTruthSegmenter, q, Some(&prev), None).is_err());
}

fn param_snapshot(net: &Network<f64>) -> Vec<Vec<f64>> {
    net.params().iter().map(|t| t.as_slice().to_vec()).collect()
}

#[test]
fn evaluation_pass_leaves_weights_untouched() {
    let train = small(Split::Train);
    let net = tiny_net(3);
    let before = param_snapshot(&net);
    let running = net.running_stats().to_vec();
    let slices: Vec<SliceRef> = all_slices(&train).into_iter().step_by(7).take(6).collect();
    let batch = build_batch(&net, &train, &slices, true, InputScheme::Proposed, 20).unwrap();
    assert!(batch.first.is_some());
    assert_eq!(param_snapshot(&net), before);
    assert_eq!(net.running_stats(), running.as_slice());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn input2_carries_first_pass_of_same_sample(seed in 0u64..1000, start in 0usize..90) {
        let train = small(Split::Train);
        let net = tiny_net(seed);
        let all = all_slices(&train);
        let slices: Vec<SliceRef> = all.iter().copied().skip(start).step_by(11).take(3).collect();
        let batch = build_batch(&net, &train, &slices, true, InputScheme::Proposed, 20).unwrap();
        let first = batch.first.as_ref().unwrap();
        let alone: Vec<Tensor<f64>> = slices
            .iter()
            .map(|r| {
                let b = build_batch(&net, &train, std::slice::from_ref(r), false, InputScheme::Proposed, 20).unwrap();
                net.predict(&b.input).unwrap()
            })
            .collect();
        for (n, pass) in first.iter().enumerate() {
            let maxp = pass.prob.max_prob();
            prop_assert_eq!(batch.input.plane(n, channel::PREV_MAX_PROB), maxp.as_slice());
            let halves: Vec<f64> = pass.labels.as_slice().iter().map(|&l| l as f64 / 2.0).collect();
            prop_assert_eq!(batch.input.plane(n, channel::PREV_LABELS), halves.as_slice());
            // the first pass of sample n is that sample's own Input-1 prediction
            for c in 0..3 {
                let solo = alone[n].plane(0, c);
                let batched = pass.prob.class(c).as_slice();
                for (a, b) in solo.iter().zip(batched) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn refine_probability_extremes() {
    let train = small(Split::Train);
    let val = small(Split::Val);
    for (p, expect_all) in [(0.0, false), (1.0, true)] {
        let cfg = TrainConfig {
            refine_probability: p,
            epochs: 1,
            ..quick_config()
        };
        let initial = tiny_net(0);
        let untouched = initial.bank_stats(0).to_vec();
        let out = longiseg_train::train(initial, &train, &val, &cfg).unwrap();
        assert_eq!(out.total_batches, 4);
        assert_eq!(out.refined_batches, if expect_all { 4 } else { 0 });
        // each kind of batch moves only its own statistics
        let net = &out.network;
        assert_eq!(net.stat_banks(), PASS_BANKS);
        let (moved, kept) = if expect_all { (Pass::Refine, Pass::Initial) } else { (Pass::Initial, Pass::Refine) };
        assert_eq!(net.bank_stats(kept.bank()), untouched.as_slice());
        assert_ne!(net.bank_stats(moved.bank()), untouched.as_slice());
    }
}

#[test]
fn training_is_deterministic_and_logs_every_epoch() {
    let train = small(Split::Train);
    let val = small(Split::Val);
    let a = longiseg_train::train(tiny_net(5), &train, &val, &quick_config()).unwrap();
    let b = longiseg_train::train(tiny_net(5), &train, &val, &quick_config()).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(param_snapshot(&a.network), param_snapshot(&b.network));
    let csv = a.log_csv();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "epoch,split,loss,dice_ggo,dice_cons");
    assert_eq!(rows.len(), 1 + 2 * 2);
    assert!(rows[1].starts_with("1,train,") && rows[2].starts_with("1,val,"));
    assert!(a.history.iter().all(|e| e.loss.is_finite() && e.loss >= 0.0));
    let best = a.history.iter().filter(|e| e.split == "val").map(|e| e.mean_dice()).fold(f64::MIN, f64::max);
    assert_eq!(a.best_val_dice, best);
}

#[test]
fn training_changes_weights() {
    let train = small(Split::Train);
    let val = small(Split::Val);
    let net = tiny_net(9);
    let before = param_snapshot(&net);
    let out = longiseg_train::train(net, &train, &val, &TrainConfig { epochs: 1, ..quick_config() }).unwrap();
    assert_ne!(param_snapshot(&out.network), before);
}

#[test]
fn non_finite_loss_aborts() {
    let train = small(Split::Train);
    let val = small(Split::Val);
    let mut net = tiny_net(1);
    let head = net.params().len() - 1;
    net.params_mut()[head].as_mut_slice().fill(f64::NAN);
    let cfg = TrainConfig {
        refine_probability: 0.0,
        ..quick_config()
    };
    let err = longiseg_train::train(net, &train, &val, &cfg).unwrap_err();
    assert!(err.to_string().contains("epoch 1, step 0"), "{err}");
}

#[test]
fn dataset_errors() {
    let train = small(Split::Train);
    let none: Vec<PatientVolumes<f64>> = Vec::new();
    assert!(matches!(
        longiseg_train::train(tiny_net(0), &none, &train, &quick_config()),
        Err(TrainError::EmptyDataset(_))
    ));
    assert!(matches!(
        longiseg_train::train(tiny_net(0), &train, &train[..1], &quick_config()),
        Err(TrainError::SplitOverlap(_))
    ));
    let mut unlabeled = small(Split::Val);
    unlabeled[0].target_seg = None;
    assert!(matches!(
        longiseg_train::train(tiny_net(0), &train, &unlabeled, &quick_config()),
        Err(TrainError::MissingGroundTruth(_))
    ));
}

#[test]
fn splits_are_patient_disjoint() {
    let (a, b, c) = (small(Split::Train), small(Split::Val), small(Split::Test));
    ensure_disjoint(&[&a, &b, &c]).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (2, 1, 2));
}
