use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{finite_difference_check, AttentionConfig, Tape, Tensor};
use crate::geo::GeoPoint;

pub(crate) fn tiny_config() -> FsSinrConfig {
    FsSinrConfig {
        location: LocationEncoderConfig { hidden_dim: 16, residual_blocks: 2 },
        attention: AttentionConfig { model_dim: 16, heads: 2, ffn_dim: 24, layer_norm_eps: 1e-5 },
        encoder_layers: 2,
        text_dim: 12,
        image_dim: 8,
        adapter_hidden: 10,
        adapter_blocks: 1,
    }
}

fn pt(lat: f64, lon: f64) -> GeoPoint {
    GeoPoint::new(lat, lon).unwrap()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<GeoPoint> {
    (0..n).map(|_| pt(rng.random_range(-60.0..60.0), rng.random_range(-180.0..180.0))).collect()
}

#[test]
fn default_parameter_counts() {
    let model = FsSinr::<f32>::new(FsSinrConfig::default(), 0).unwrap();
    assert_eq!(model.count_parameters(Component::LocationEncoder), 527_616);
    assert_eq!(model.count_parameters(Component::SpeciesDecoder), 197_376);
    // adapter and transformer totals are structural, not asserted against
    // published figures
    assert_eq!(model.count_parameters(Component::TextAdapter), 3_279_616);
    assert_eq!(model.count_parameters(Component::ImageAdapter), 1_706_752);
    assert_eq!(model.count_parameters(Component::Transformer), 2_110_208);
    let parts: usize = Component::ALL[..5].iter().map(|&c| model.count_parameters(c)).sum();
    assert_eq!(parts, model.count_parameters(Component::Total));
}

#[test]
fn encoder_without_blocks_has_input_layer_only() {
    let cfg = SinrConfig { location: LocationEncoderConfig { hidden_dim: 256, residual_blocks: 0 }, n_species: 3 };
    let model = SinrModel::<f32>::new(cfg, 1);
    assert_eq!(model.store.count(model.encoder.params()), 4 * 256 + 256);
}

#[test]
fn sinr_forward_with_zero_head_is_half() {
    let cfg = SinrConfig { location: LocationEncoderConfig { hidden_dim: 32, residual_blocks: 1 }, n_species: 4 };
    let mut model = SinrModel::<f32>::new(cfg, 2);
    model.store.value_mut(model.head.weight).data_mut().fill(0.0);
    for p in model.sinr_forward(pt(12.0, -40.0)).unwrap() {
        assert_eq!(p, 0.5);
    }
}

#[test]
fn sinr_forward_column_scaling_preserves_side() {
    let cfg = SinrConfig { location: LocationEncoderConfig { hidden_dim: 32, residual_blocks: 2 }, n_species: 5 };
    let mut model = SinrModel::<f64>::new(cfg, 3);
    let x = pt(-33.0, 151.0);
    let before = model.sinr_forward(x).unwrap();
    let w = model.store.value_mut(model.head.weight);
    for r in 0..32 {
        w.data_mut()[r * 5 + 2] *= 7.5;
    }
    let after = model.sinr_forward(x).unwrap();
    assert_eq!(before[2] > 0.5, after[2] > 0.5);
    assert_eq!(before[0], after[0]);
}

#[test]
fn sinr_forward_matches_hand_computation() {
    // width-2 encoder with no residual blocks and two species
    let cfg = SinrConfig { location: LocationEncoderConfig { hidden_dim: 2, residual_blocks: 0 }, n_species: 2 };
    let mut model = SinrModel::<f64>::new(cfg, 4);
    let set = |m: &mut SinrModel<f64>, id, shape: &[usize], v: &[f64]| *m.store.value_mut(id) = Tensor::from_f64(shape, v).unwrap();
    let (wi, bi, wh) = (model.encoder.input.weight, model.encoder.input.bias, model.head.weight);
    set(&mut model, wi, &[4, 2], &[1.0, 0.0, 0.0, 1.0, 0.5, 0.0, 0.0, -1.0]);
    set(&mut model, bi, &[1, 2], &[0.1, 0.2]);
    set(&mut model, wh, &[2, 2], &[2.0, -1.0, 1.0, 3.0]);

    // (lat 45, lon 90): encoding [1, 0, 1, 0]
    let probs = model.sinr_forward(pt(45.0, 90.0)).unwrap();
    let h = [(1.0f64 + 0.5 + 0.1).max(0.0), (0.0f64 + 0.2).max(0.0)];
    let z = [2.0 * h[0] + 1.0 * h[1], -1.0 * h[0] + 3.0 * h[1]];
    for j in 0..2 {
        let expected = 1.0 / (1.0 + (-z[j]).exp());
        assert!((probs[j] - expected).abs() < 1e-12, "{} vs {expected}", probs[j]);
    }
}

#[test]
fn presence_matches_classifier_column() {
    let cfg = SinrConfig { location: LocationEncoderConfig { hidden_dim: 16, residual_blocks: 2 }, n_species: 3 };
    let sinr = SinrModel::<f64>::new(cfg, 5);
    let mut fs = FsSinr::<f64>::new(tiny_config(), 6).unwrap();
    fs.load_pretrained_encoder(&sinr).unwrap();
    let x = pt(5.0, 17.0);
    let probs = sinr.sinr_forward(x).unwrap();
    for j in 0..3 {
        let p = fs.predict_presence(&sinr.column(j), x).unwrap();
        assert!((p - probs[j]).abs() < 1e-12);
    }
    assert_eq!(fs.predict_presence(&[0.0; 16], x).unwrap(), 0.5);
}

#[test]
fn embedding_is_invariant_to_context_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = FsSinr::<f32>::new(FsSinrConfig::default(), 8).unwrap();
    let locations = random_points(&mut rng, 12);
    let mut shuffled = locations.clone();
    shuffled.reverse();
    shuffled.swap(0, 5);
    let text: Vec<f32> = (0..4096).map(|i| ((i * 37 % 101) as f32 - 50.0) / 500.0).collect();
    let a = ContextSet { locations, text_embedding: Some(text.clone()), image_embedding: None };
    let b = ContextSet { locations: shuffled, text_embedding: Some(text), image_embedding: None };
    let wa = model.species_embedding(&a).unwrap();
    let wb = model.species_embedding(&b).unwrap();
    for (x, y) in wa.iter().zip(&wb) {
        assert!((x - y).abs() <= 1e-5, "{x} vs {y}");
    }
}

#[test]
fn empty_context_is_deterministic_and_duplicates_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = FsSinr::<f32>::new(tiny_config(), 10).unwrap();
    let empty = ContextSet::default();
    assert!(empty.is_degenerate());
    let first = model.species_embedding(&empty).unwrap();
    assert_eq!(first, model.species_embedding(&empty).unwrap());
    assert_eq!(first.len(), 16);

    let locations = random_points(&mut rng, 3);
    let mut duplicated = locations.clone();
    duplicated.push(locations[0]);
    let a = model.species_embedding(&ContextSet::from_locations(locations)).unwrap();
    let b = model.species_embedding(&ContextSet::from_locations(duplicated)).unwrap();
    assert_ne!(a, b);
}

#[test]
fn batched_embeddings_match_single_calls() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = FsSinr::<f64>::new(tiny_config(), 12).unwrap();
    let contexts = vec![
        ContextSet::from_locations(random_points(&mut rng, 4)),
        ContextSet::default(),
        ContextSet { locations: random_points(&mut rng, 2), text_embedding: Some(vec![0.3; 12]), image_embedding: Some(vec![-0.2; 8]) },
        ContextSet { locations: vec![], text_embedding: Some(vec![0.1; 12]), image_embedding: None },
    ];
    let mut tape = Tape::new();
    let batch = model.embed_contexts(&mut tape, &contexts, 0.0).unwrap();
    for (i, ctx) in contexts.iter().enumerate() {
        let single = model.species_embedding(ctx).unwrap();
        for (a, b) in tape.value(batch).row(i).iter().zip(&single) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn wrong_embedding_length_is_rejected() {
    let model = FsSinr::<f32>::new(tiny_config(), 13).unwrap();
    let ctx = ContextSet { locations: vec![], text_embedding: Some(vec![0.0; 11]), image_embedding: None };
    assert!(matches!(
        model.species_embedding(&ctx),
        Err(ModelError::EmbeddingDimMismatch { kind: TokenKind::Text, expected: 12, actual: 11 })
    ));
    let ctx = ContextSet { locations: vec![], text_embedding: None, image_embedding: Some(vec![0.0; 9]) };
    assert!(matches!(model.species_embedding(&ctx), Err(ModelError::EmbeddingDimMismatch { kind: TokenKind::Image, .. })));
}

#[test]
fn embedding_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let model = FsSinr::<f64>::new(tiny_config(), 15).unwrap();
    let contexts = vec![
        ContextSet { locations: random_points(&mut rng, 3), text_embedding: Some((0..12).map(|i| i as f32 / 10.0).collect()), image_embedding: None },
        ContextSet { locations: random_points(&mut rng, 1), text_embedding: None, image_embedding: Some(vec![0.5; 8]) },
    ];
    let probe = Tensor::<f64>::matrix(2, 16, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let report = finite_difference_check(
        &model.store,
        |t, s| {
            let m = FsSinr { store: s.clone(), ..model.clone() };
            let w = m.embed_contexts(t, &contexts, 0.0).map_err(|e| match e {
                ModelError::Diff(d) => d,
                other => panic!("{other}"),
            })?;
            let p = t.constant(probe.clone());
            let y = t.mul(w, p)?;
            t.sum(y)
        },
        1e-6,
        3,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = FsSinr::<f32>::new(tiny_config(), 16).unwrap();
    let path = dir.path().join("ckpt");
    save_checkpoint(&model, &path, CheckpointMeta { seed: 16, epoch: 3 }).unwrap();

    let (loaded, meta) = load_checkpoint::<FsSinr<f32>>(&path).unwrap();
    assert_eq!(meta, CheckpointMeta { seed: 16, epoch: 3 });
    assert_eq!(loaded.store, model.store);
    let ctx = ContextSet::from_locations(vec![pt(1.0, 2.0), pt(-3.0, 4.0)]);
    assert_eq!(loaded.species_embedding(&ctx).unwrap(), model.species_embedding(&ctx).unwrap());
    assert_eq!(store_checksum(&loaded.store), store_checksum(&model.store));

    let again = dir.path().join("again");
    save_checkpoint(&loaded, &again, meta).unwrap();
    assert_eq!(std::fs::read(path.join(PAYLOAD_FILE)).unwrap(), std::fs::read(again.join(PAYLOAD_FILE)).unwrap());

    let manifest = read_manifest(&path).unwrap();
    assert_eq!(manifest.tensors[1].offset, manifest.tensors[0].shape.iter().product::<usize>() * 4);
}

#[test]
fn checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let model = FsSinr::<f32>::new(tiny_config(), 17).unwrap();
    let path = dir.path().join("ckpt");
    save_checkpoint(&model, &path, CheckpointMeta::default()).unwrap();

    let mut other_cfg = tiny_config();
    other_cfg.encoder_layers = 1;
    let mut other = FsSinr::<f32>::new(other_cfg, 0).unwrap();
    assert!(matches!(load_into(&mut other, &path), Err(ModelError::ConfigMismatch(_))));
    assert!(matches!(load_checkpoint::<SinrModel<f32>>(&path), Err(ModelError::ConfigMismatch(_))));

    let payload = std::fs::read(path.join(PAYLOAD_FILE)).unwrap();
    std::fs::write(path.join(PAYLOAD_FILE), &payload[..payload.len() - 4]).unwrap();
    assert!(matches!(load_checkpoint::<FsSinr<f32>>(&path), Err(ModelError::PayloadLengthMismatch { .. })));

    std::fs::write(path.join(MANIFEST_FILE), b"{not json").unwrap();
    assert!(matches!(load_checkpoint::<FsSinr<f32>>(&path), Err(ModelError::CorruptManifest(_))));
}

#[test]
fn sinr_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SinrConfig { location: LocationEncoderConfig { hidden_dim: 8, residual_blocks: 1 }, n_species: 3 };
    let model = SinrModel::<f32>::new(cfg, 18);
    save_checkpoint(&model, dir.path(), CheckpointMeta { seed: 1, epoch: 0 }).unwrap();
    let (loaded, _) = load_checkpoint::<SinrModel<f32>>(dir.path()).unwrap();
    assert_eq!(loaded.store, model.store);
    assert_eq!(loaded.sinr_forward(pt(3.0, 3.0)).unwrap(), model.sinr_forward(pt(3.0, 3.0)).unwrap());
}
