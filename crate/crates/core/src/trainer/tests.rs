use std::path::PathBuf;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::degrade::resolution_of;
use crate::masks::gaussian_mask;
use crate::rife::{rife_loss, RifeConfig};

fn tiny_config(stage: Stage) -> TrainConfig {
    TrainConfig {
        stage,
        epochs_per_stage: 4,
        batch_size: 4,
        canonical_size: (16, 8),
        ffsr_channels: 4,
        rife_widths: vec![4, 4, 8, 8],
        stem_channels: 4,
        embedding_dim: 8,
        weight_hidden: 4,
        units_per_block: 1,
        seed: 5,
        ..TrainConfig::default()
    }
}

/// Identity-coloured blobs with noise; the input is a blurred copy.
fn tiny_set(n_ids: u32, per_id: usize, seed: u64) -> TrainingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for id in 0..n_ids {
        for k in 0..per_id {
            let base = [0.2 + 0.15 * id as f64, 0.8 - 0.1 * id as f64, 0.5];
            let hr = Array3::from_shape_fn((3, 16, 8), |(c, y, x)| {
                let stripe = if (y + x + id as usize) % 3 == 0 { 0.2 } else { 0.0 };
                (base[c] + stripe + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)
            });
            let r = [0.25, 0.5, 1.0][k % 3];
            let small = resize_array(&hr, (16.0 * r) as usize, (8.0 * r) as usize);
            samples.push(Preprocessed {
                input: resize_array(&small, 16, 8),
                hr,
                resolution: r,
                person_id: 10 + id,
            });
        }
    }
    TrainingSet::from_samples(samples).unwrap()
}

fn bits(m: &Model) -> Vec<u8> {
    m.to_checkpoint().to_bytes().unwrap()
}

fn ffsr_bits(m: &Model) -> Vec<(String, Vec<u32>)> {
    m.store
        .iter()
        .filter(|(_, n, _)| n.starts_with(ffsr::PREFIX))
        .map(|(_, n, v)| (n.to_string(), v.iter().map(|x| x.to_bits()).collect()))
        .collect()
}

fn three_stages(data: &TrainingSet) -> (StageOutcome, StageOutcome, StageOutcome) {
    let s1 = run_stage(&tiny_config(Stage::FfsrPretrain), data, None, false).unwrap();
    let s2 = run_stage(&tiny_config(Stage::RifeTrain), data, Some(s1.model.clone()), false).unwrap();
    let s3 = run_stage(&tiny_config(Stage::Joint), data, Some(s2.model.clone()), false).unwrap();
    (s1, s2, s3)
}

#[test]
fn preprocess_keeps_canonical_inputs_and_the_recorded_resolution() {
    let img = ImageTensor::new(Array3::from_shape_fn((3, 16, 8), |(c, y, x)| ((c + y * x) % 7) as f64 / 7.0)).unwrap();
    let sample = LabeledSample {
        image: img.clone(),
        hr_target: img.clone(),
        person_id: 3,
        resolution: 1.0,
        source_path: PathBuf::from("x.png"),
    };
    let p = preprocess(&sample, (16, 8)).unwrap();
    assert_eq!(&p.input, img.pixels());
    assert_eq!(p.resolution, 1.0);

    let narrow = ImageTensor::filled(64, 24, 0.3).unwrap();
    let sample = LabeledSample {
        image: narrow,
        hr_target: ImageTensor::filled(256, 96, 0.3).unwrap(),
        person_id: 1,
        resolution: resolution_of(24, 96).unwrap(),
        source_path: PathBuf::from("n.png"),
    };
    let a = preprocess(&sample, (128, 64)).unwrap();
    assert_eq!(a.resolution, 0.25);
    assert_eq!(a.input.dim(), (3, 128, 64));
    assert!(a.input.iter().chain(a.hr.iter()).all(|v| (0.0..=1.0).contains(v)));
    let b = preprocess(&sample, (128, 64)).unwrap();
    assert_eq!(a, b);
    assert!(preprocess(&sample, (4, 4)).is_err());
}

#[test]
fn joint_objective_examples() {
    assert!((joint_objective(0.625, 0.3653, 1.0) - 0.9903).abs() < 1e-12);
    assert_eq!(joint_objective(0.625, 0.3653, 0.0), 0.625);
    // Perfect restoration plus a saturated, correctly weighted extractor.
    let rife = rife_loss(&[60.0, 0.0, 0.0], 0, &[(0.5, 0.5); 4], 0.5, 0.1).unwrap();
    assert!(joint_objective(0.0, rife, 1.0) < 1e-6);
}

#[test]
fn total_loss_is_additive() {
    let data = tiny_set(3, 3, 1);
    let (_, _, s3) = three_stages(&data);
    let mask = gaussian_mask(16, 8, 0.5).unwrap();
    for sample in &data.samples {
        for alpha in [0.0, 0.3, 1.0] {
            let t = total_loss(&s3.model, sample, &mask, alpha).unwrap();
            assert!((t.total - alpha * t.rife - t.ffsr).abs() < 1e-9);
            assert!((t.rife - t.xent - 0.1 * t.rw.unwrap()).abs() < 1e-9);
        }
        let t = total_loss(&s3.model, sample, &mask, 0.0).unwrap();
        assert_eq!(t.total, t.ffsr);
    }
}

#[test]
fn stages_isolate_learn_and_repeat_bitwise() {
    let data = tiny_set(4, 4, 2);
    let (s1, s2, s3) = three_stages(&data);
    assert_eq!(ffsr_bits(&s1.model), ffsr_bits(&s2.model), "stage 2 touched the restoration network");
    assert_ne!(ffsr_bits(&s2.model), ffsr_bits(&s3.model));
    for s in [&s1, &s2] {
        assert_eq!(s.log.len(), 4);
        assert!(s.log[3].mean_total < s.log[0].mean_total, "{:?}", s.log);
    }
    // Four-sample batch norm makes the small joint learning rate noisy
    // epoch to epoch, so compare the ends of a longer run.
    let long = TrainConfig {
        epochs_per_stage: 30,
        ..tiny_config(Stage::Joint)
    };
    let l = run_stage(&long, &data, Some(s2.model.clone()), false).unwrap().log;
    let mean = |r: &[EpochLog]| r.iter().map(|e| e.mean_total).sum::<f64>() / r.len() as f64;
    assert!(mean(&l[25..]) < mean(&l[..5]));
    let stages: Vec<u8> = s3.model.provenance.iter().map(|p| p.stage).collect();
    assert_eq!(stages, vec![1, 2, 3]);

    let (_, _, again) = three_stages(&data);
    assert_eq!(bits(&s3.model), bits(&again.model));
    assert_eq!(loss_log_csv(&s3.log), loss_log_csv(&again.log));
}

#[test]
fn joint_stage_sends_extractor_gradient_into_restoration() {
    let data = tiny_set(3, 2, 3);
    let (_, s2, _) = three_stages(&data);
    let m = &s2.model;
    let batch = Batch {
        inputs: stack_chw::<f32>(&data.samples.iter().map(|s| &s.input).collect::<Vec<_>>()),
        targets: stack_chw::<f32>(&data.samples.iter().map(|s| &s.hr).collect::<Vec<_>>()),
        mask: BatchMask::Shared(Array2::ones((16, 8))),
        labels: data.samples.iter().map(|s| m.identities.as_ref().unwrap().dense(s.person_id).unwrap()).collect(),
        resolutions: data.samples.iter().map(|s| s.resolution as f32).collect(),
    };
    let mut tape = Tape::new(Mode::Train);
    let v = stage_loss(&mut tape, Stage::Joint, m.ffsr.as_ref(), m.rife.as_ref(), &m.store, &batch, 1.0).unwrap();
    let g = tape.backward(v.rife.unwrap());
    assert!(g.sq_norm_prefix(&m.store, ffsr::PREFIX) > 0.0);
}

#[test]
fn loss_log_and_schedule() {
    let data = tiny_set(2, 2, 4);
    let s1 = run_stage(&tiny_config(Stage::FfsrPretrain), &data, None, false).unwrap();
    let lrs: Vec<f64> = s1.log.iter().map(|l| l.lr).collect();
    assert_eq!(lrs[..2], [0.01, 0.01]);
    assert!(lrs[2..].iter().all(|&l| (l - 0.001).abs() < 1e-15));
    let csv = loss_log_csv(&s1.log);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(LOSS_LOG_HEADER));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 7);
    assert_eq!(row[3], row[2]);
    assert_eq!((row[4], row[5]), ("", ""));

    let single = TrainConfig {
        variant: Variant::Single,
        ..tiny_config(Stage::RifeTrain)
    };
    let base = run_stage(&single, &data, None, true).unwrap();
    assert!(base.model.ffsr.is_none());
    let csv = loss_log_csv(&base.log);
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[3], row[5]), ("", ""));
    assert_eq!(row[2], row[4]);
}

#[test]
fn prerequisites_are_enforced() {
    let data = tiny_set(2, 2, 5);
    let err = run_stage(&tiny_config(Stage::RifeTrain), &data, None, false).unwrap_err();
    assert!(matches!(err, Error::Prerequisite(_)), "{err}");
    let s1 = run_stage(&tiny_config(Stage::FfsrPretrain), &data, None, false).unwrap();
    let err = run_stage(&tiny_config(Stage::Joint), &data, Some(s1.model.clone()), false).unwrap_err();
    assert!(matches!(err, Error::Prerequisite(_)), "{err}");
    assert!(run_stage(&tiny_config(Stage::RifeTrain), &data, Some(s1.model), true).is_err());
    assert!(TrainingSet::from_samples(Vec::new()).is_err());

    let other = tiny_set(3, 2, 6);
    let s2 = run_stage(&tiny_config(Stage::RifeTrain), &data, None, true).unwrap();
    assert!(run_stage(&tiny_config(Stage::RifeTrain), &other, Some(s2.model), false).is_err());
}

#[test]
fn checkpoints_restore_the_same_model() {
    let data = tiny_set(2, 3, 7);
    let (_, _, s3) = three_stages(&data);
    let back = Model::from_checkpoint(crate::checkpoint::Checkpoint::from_bytes(&bits(&s3.model), "m".as_ref()).unwrap()).unwrap();
    let inputs: Vec<&Array3<f64>> = data.samples.iter().map(|s| &s.input).collect();
    assert_eq!(s3.model.infer(&inputs).unwrap(), back.infer(&inputs).unwrap());
    let out = back.infer(&inputs).unwrap();
    assert_eq!(out.embeddings.len(), 6);
    assert_eq!(out.block_weights.len(), 4);
    assert_eq!(out.block_weights[0].0.len(), 6);
    assert_eq!(back.restore(&inputs).unwrap().len(), 6);
    assert_eq!(
        back.rife.as_ref().unwrap().config,
        RifeConfig {
            n_classes: 2,
            ..tiny_config(Stage::Joint).rife_config(2)
        }
    );
}

#[test]
fn inference_is_chunk_invariant() {
    let data = tiny_set(5, 8, 8);
    let s2 = run_stage(&tiny_config(Stage::RifeTrain), &data, None, true).unwrap();
    let inputs: Vec<&Array3<f64>> = data.samples.iter().map(|s| &s.input).collect();
    let all = s2.model.infer(&inputs).unwrap();
    let one = s2.model.infer(&inputs[33..34]).unwrap();
    assert_eq!(all.embeddings[33], one.embeddings[0]);
}

#[test]
fn region_mse_counts_only_the_region() {
    let t = Array3::zeros((3, 2, 2));
    let mut p = Array3::zeros((3, 2, 2));
    p[[0, 0, 0]] = 1.0;
    p[[1, 1, 1]] = 5.0;
    let mut region = Array2::from_elem((2, 2), false);
    region[[0, 0]] = true;
    assert!((region_mse(&p, &t, &region).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!(region_mse(&p, &t, &Array2::from_elem((2, 2), false)).is_err());
}

