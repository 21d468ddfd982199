use super::*;
use crate::data::{gen_sample, DatasetSpec};
use crate::model::{ParamStore, SkipMode, Variant};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_resolution: 16,
        base_width: 4,
        n_stages: 2,
        latent_channels: 8,
        ..ModelConfig::default()
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        steps: 6,
        batch_size: 2,
        seed: 5,
        model: tiny_model(),
        ..TrainConfig::default()
    }
}

fn samples(paired: usize, image_only: usize, normal_only: usize) -> Vec<Sample> {
    DatasetSpec {
        seed: 1,
        resolution: 16,
        n_bumps: 3,
        paired,
        image_only,
        normal_only,
        ..DatasetSpec::default()
    }
    .generate()
    .unwrap()
}

fn snapshot(params: &ParamStore, prefix: &str) -> Vec<(String, Vec<u32>)> {
    params
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn fresh(config: &ModelConfig) -> (CrossModalModel, Adam) {
    let model = CrossModalModel::new(config.clone()).unwrap();
    let opt = Adam::new(&model.params, 1e-3, [0.9, 0.999], 1e-8);
    (model, opt)
}

fn one_param(value: f32) -> ParamStore {
    let mut map = std::collections::BTreeMap::new();
    map.insert("w".to_string(), Tensor::full(&[1], value));
    ParamStore::from_map(map)
}

#[test]
fn adam_first_step_by_hand() {
    let mut params = one_param(0.0);
    let mut opt = Adam::new(&params, 0.1, [0.9, 0.999], 1e-8);
    params.get_mut("w").unwrap().accumulate_grad(&[1.0]).unwrap();
    opt.step(&mut params, ["w"]).unwrap();
    assert_eq!(opt.t, 1);
    // m_hat = v_hat = 1, so the step is lr / (1 + eps)
    let expected = -0.1 / (1.0 + 1e-8);
    assert!((params.get("w").unwrap().data()[0] as f64 - expected).abs() < 1e-7);
    assert!(params.get("w").unwrap().grad().is_none());
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut params = one_param(0.375);
    let mut opt = Adam::new(&params, 0.1, [0.9, 0.999], 1e-8);
    for _ in 0..3 {
        params.get_mut("w").unwrap().accumulate_grad(&[0.0]).unwrap();
        opt.step(&mut params, ["w"]).unwrap();
    }
    assert_eq!(params.get("w").unwrap().data()[0], 0.375);
}

#[test]
fn adam_requires_gradients() {
    let mut params = one_param(1.0);
    let mut opt = Adam::new(&params, 0.1, [0.9, 0.999], 1e-8);
    assert!(matches!(opt.step(&mut params, ["w"]), Err(Error::MissingGradient(n)) if n == "w"));
    assert_eq!(opt.t, 0);
    assert!(matches!(opt.step(&mut params, ["nope"]), Err(Error::UnknownParameter(_))));
}

#[test]
fn paired_batch_runs_two_phases_and_two_updates() {
    let data = samples(2, 0, 0);
    let (mut model, mut opt) = fresh(&tiny_model());
    let batch: Vec<&Sample> = data.iter().collect();
    let rec = train_iteration(&mut model, &batch, &mut opt, PairedUpdates::Two).unwrap();
    assert_eq!(rec.updates, 2);
    assert_eq!(opt.t, 2);
    assert_eq!(rec.phases[0].phase, Phase::NormalToNormal);
    assert_eq!(rec.phases[1].phase, Phase::ImageToNormalAndImage);
    match &rec.phases[1].outcome {
        PhaseOutcome::Ran { loss, parts } => {
            assert_eq!(parts.iter().map(|p| p.0).collect::<Vec<_>>(), ["i2n", "i2i"]);
            assert!((loss - (parts[0].1 + parts[1].1)).abs() < 1e-6);
        }
        other => panic!("unexpected {other:?}"),
    }

    let (mut model, mut opt) = fresh(&tiny_model());
    let rec = train_iteration(&mut model, &batch, &mut opt, PairedUpdates::One).unwrap();
    assert_eq!((rec.updates, opt.t, rec.phases.len()), (1, 1, 2));
}

#[test]
fn unpaired_batches_run_one_update() {
    let data = samples(0, 2, 2);
    let (mut model, mut opt) = fresh(&tiny_model());
    let rec = train_iteration(&mut model, &[&data[0], &data[1]], &mut opt, PairedUpdates::Two).unwrap();
    assert_eq!((rec.kind, rec.updates), (SampleKind::ImageOnly, 1));
    assert_eq!(rec.phases[0].phase, Phase::ImageToImage);
    let rec = train_iteration(&mut model, &[&data[2], &data[3]], &mut opt, PairedUpdates::Two).unwrap();
    assert_eq!((rec.kind, rec.updates), (SampleKind::NormalOnly, 1));
    assert_eq!(rec.phases[0].phase, Phase::NormalToNormal);
}

#[test]
fn mixed_batches_are_rejected() {
    let data = samples(1, 1, 0);
    let (mut model, mut opt) = fresh(&tiny_model());
    let err = train_iteration(&mut model, &[&data[0], &data[1]], &mut opt, PairedUpdates::Two);
    assert!(err.is_err());
    assert_eq!(opt.t, 0);
}

#[test]
fn ablated_networks_skip_their_phases_explicitly() {
    let mut cfg = tiny_model();
    cfg.apply_variant(Variant::NoNormalEncoder);
    let data = samples(1, 0, 1);
    let (mut model, mut opt) = fresh(&cfg);
    let before = snapshot(&model.params, "");
    let rec = train_iteration(&mut model, &[&data[1]], &mut opt, PairedUpdates::Two).unwrap();
    assert_eq!(rec.updates, 0);
    assert!(matches!(rec.phases[0].outcome, PhaseOutcome::Skipped { .. }));
    assert_eq!(snapshot(&model.params, ""), before);

    let rec = train_iteration(&mut model, &[&data[0]], &mut opt, PairedUpdates::Two).unwrap();
    assert_eq!(rec.updates, 1);
    assert!(matches!(rec.phases[0].outcome, PhaseOutcome::Skipped { .. }));

    cfg.apply_variant(Variant::EncoderDecoder);
    let (mut model, mut opt) = fresh(&cfg);
    let image_only = samples(0, 1, 0);
    let rec = train_iteration(&mut model, &[&image_only[0]], &mut opt, PairedUpdates::Two).unwrap();
    assert_eq!(rec.updates, 0);
    let rec = train_iteration(&mut model, &[&data[0]], &mut opt, PairedUpdates::Two).unwrap();
    match &rec.phases[1].outcome {
        PhaseOutcome::Ran { parts, .. } => assert_eq!(parts.len(), 1),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn unpaired_iterations_touch_only_their_networks() {
    let data = samples(0, 1, 1);
    let (mut model, mut opt) = fresh(&tiny_model());
    let (ei, di) = (snapshot(&model.params, "e_i."), snapshot(&model.params, "d_i."));
    let (en, dn) = (snapshot(&model.params, "e_n."), snapshot(&model.params, "d_n."));
    train_iteration(&mut model, &[&data[1]], &mut opt, PairedUpdates::Two).unwrap();
    assert_eq!(snapshot(&model.params, "e_i."), ei);
    assert_eq!(snapshot(&model.params, "d_i."), di);
    assert_ne!(snapshot(&model.params, "e_n."), en);
    let (en, dn2) = (snapshot(&model.params, "e_n."), snapshot(&model.params, "d_n."));
    assert_ne!(dn2, dn);
    train_iteration(&mut model, &[&data[0]], &mut opt, PairedUpdates::Two).unwrap();
    assert_eq!(snapshot(&model.params, "e_n."), en);
    assert_eq!(snapshot(&model.params, "d_n."), dn2);
    assert_ne!(snapshot(&model.params, "e_i."), ei);
}

#[test]
fn schedule_interleaves_homogeneous_batches() {
    let data = samples(4, 2, 3);
    let mut s = Schedule::new(&data, 2, 0).unwrap();
    assert_eq!(s.batches_per_epoch(), 2 + 1 + 2);
    let kinds: Vec<SampleKind> = (0..5).map(|_| data[s.next_batch()[0]].kind).collect();
    use SampleKind::*;
    assert_eq!(kinds, [Paired, ImageOnly, NormalOnly, Paired, NormalOnly]);
    let mut seen: Vec<usize> = Vec::new();
    let mut s = Schedule::new(&data, 2, 0).unwrap();
    for _ in 0..5 {
        let b = s.next_batch();
        assert!(b.iter().all(|&i| data[i].kind == data[b[0]].kind));
        seen.extend(b);
    }
    seen.sort();
    assert_eq!(seen, (0..9).collect::<Vec<_>>());
    assert!(Schedule::new(&data, 0, 0).is_err());
}

#[test]
fn epoch_update_count() {
    let data = samples(4, 2, 3);
    let mut cfg = tiny_config();
    cfg.epochs = Some(1);
    let mut t = Trainer::new(cfg, data).unwrap();
    assert_eq!(t.planned_steps(), 5);
    t.run(|_, _| {}).unwrap();
    // p = 2 paired, i = 1 image-only, n = 2 normal-only batches
    assert_eq!(t.optimizer.t, 2 * 2 + 1 + 2);
    assert_eq!(t.log.len(), 2 * 2 + 1 + 2);
}

#[test]
fn log_is_csv_with_explicit_skips() {
    let rows = [
        LogRow { step: 1, kind: SampleKind::Paired, phase: Phase::NormalToNormal, loss: Some(0.5) },
        LogRow { step: 2, kind: SampleKind::NormalOnly, phase: Phase::NormalToNormal, loss: None },
    ];
    assert_eq!(
        format_log(&rows),
        "step,kind,phase,loss\n1,paired,n2n,0.500000\n2,normal_only,n2n,skipped\n"
    );
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rat": 1e-3}"#).is_err());
    let cfg: TrainConfig = serde_json::from_str(r#"{"steps": 7, "model": {"base_width": 8}}"#).unwrap();
    assert_eq!((cfg.steps, cfg.model.base_width, cfg.batch_size), (7, 8, 4));
    let mut bad = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
    assert!(bad.validate().is_err());
    bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
    assert!(bad.validate().is_err());
    assert_eq!(TrainConfig::forty_epochs().epochs, Some(40));
}

fn trained(steps: usize) -> Trainer {
    let mut cfg = tiny_config();
    cfg.steps = steps;
    let mut t = Trainer::new(cfg, samples(3, 2, 2)).unwrap();
    t.run(|_, _| {}).unwrap();
    t
}

#[test]
fn training_is_deterministic_and_resumable() {
    let a = trained(6).checkpoint().to_bytes().unwrap();
    let b = trained(6).checkpoint().to_bytes().unwrap();
    assert_eq!(a, b);

    let half = trained(3).checkpoint();
    let mut cfg = tiny_config();
    cfg.steps = 6;
    let mut resumed = Trainer::resume(cfg, Checkpoint::from_bytes(&half.to_bytes().unwrap()).unwrap(), samples(3, 2, 2)).unwrap();
    resumed.run(|_, _| {}).unwrap();
    assert_eq!(resumed.checkpoint().to_bytes().unwrap(), a);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let t = trained(2);
    let bytes = t.checkpoint().to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"CNCK");
    assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.model.params, t.model.params);
    assert_eq!(back.optimizer, t.optimizer);

    let x = gen_sample(4, 16, 3, SampleKind::Paired).unwrap().image.unwrap();
    let a = t.model.infer(&x, Mode::ImageToNormal).unwrap();
    let b = back.model.infer(&x, Mode::ImageToNormal).unwrap();
    assert_eq!(a, b);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    back.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert!(Checkpoint::load_for(&path, &tiny_model()).is_ok());
}

#[test]
fn checkpoint_errors_are_distinct() {
    let t = trained(1);
    let bytes = t.checkpoint().to_bytes().unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic { .. })));
    assert!(matches!(Checkpoint::from_bytes(b"CN"), Err(Error::BadMagic { .. })));

    let mut newer = bytes.clone();
    newer[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&newer), Err(Error::UnsupportedVersion { found: 2, .. })));

    for cut in [10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Truncated { .. })), "cut {cut}");
    }

    let mut concat = tiny_model();
    concat.skip_mode = SkipMode::StandardConcat;
    concat.has_normal_encoder = false;
    assert!(matches!(Checkpoint::from_bytes_for(&bytes, &concat), Err(Error::ConfigMismatch(_))));
    let mut wider = tiny_model();
    wider.base_width = 8;
    assert!(matches!(Checkpoint::from_bytes_for(&bytes, &wider), Err(Error::ConfigMismatch(_))));

    let first = t.model.params.names().next().unwrap().to_string();
    let renamed = replace_once(&bytes, first.as_bytes(), &rename(&first));
    assert!(matches!(Checkpoint::from_bytes(&renamed), Err(Error::UnknownParameter(_))));

    let resized = bump_first_dim(&bytes, &first);
    assert!(matches!(Checkpoint::from_bytes(&resized), Err(Error::DimMismatch { .. })));
}

/// Same-length name that is not in the registry.
fn rename(name: &str) -> Vec<u8> {
    let mut n = name.as_bytes().to_vec();
    n[0] = b'z';
    n
}

fn replace_once(hay: &[u8], needle: &[u8], with: &[u8]) -> Vec<u8> {
    let at = find_record(hay, needle);
    let mut out = hay.to_vec();
    out[at..at + needle.len()].copy_from_slice(with);
    out
}

/// Offset of the first tensor-record name equal to `needle` (after the header).
fn find_record(hay: &[u8], needle: &[u8]) -> usize {
    let header_len = u32::from_le_bytes(hay[8..12].try_into().unwrap()) as usize;
    let start = 12 + header_len + 4;
    assert_eq!(&hay[start..start + needle.len()], needle);
    start
}

fn bump_first_dim(bytes: &[u8], name: &str) -> Vec<u8> {
    let at = find_record(bytes, name.as_bytes()) + name.len() + 4;
    let mut out = bytes.to_vec();
    let d = u32::from_le_bytes(out[at..at + 4].try_into().unwrap());
    out[at..at + 4].copy_from_slice(&(d + 1).to_le_bytes());
    out
}
