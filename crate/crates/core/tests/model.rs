use mosra::audio::AudioBuffer;
use mosra::frontend::{Frontend, SegmentTensor};
use mosra::model::{ModelConfig, Mosra, NormStats, SegmentBatch, Task};
use mosra::synth::speech_like;
use mosra::tensor::{Graph, Groups, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use proptest::prelude::*;

fn random_segments(n: usize, cfg: &ModelConfig, seed: u64) -> SegmentTensor {
    let (m, w) = (cfg.frontend.n_mels, cfg.frontend.segment_width_frames);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SegmentTensor {
        values: (0..n * m * w).map(|_| rng.gen_range(-80.0f32..10.0)).collect(),
        n_segments: n,
        n_mels: m,
        width: w,
    }
}

#[test]
fn parameter_budget() {
    let m = Mosra::<f32>::new(ModelConfig::default(), 0).unwrap();
    let brute: usize = m
        .params()
        .entries()
        .iter()
        .filter(|e| e.trainable)
        .map(|e| e.tensor.shape.iter().product::<usize>())
        .sum();
    assert_eq!(m.param_count(), brute);
    assert!((350_000..=470_000).contains(&m.param_count()), "{}", m.param_count());
}

#[test]
fn cnn_features_for_eight_seconds() {
    let m = Mosra::<f32>::new(ModelConfig::default(), 1).unwrap();
    let audio = speech_like(8.0, 48_000, 2).unwrap();
    let seg = Frontend::new(&m.config().frontend).unwrap().featurize(&audio).unwrap();
    let f = m.segment_features(&seg).unwrap();
    assert_eq!(f.shape, vec![197, 64]);
    assert!(f.data.iter().all(|v| v.is_finite()));
}

#[test]
fn identical_and_silent_segments() {
    let cfg = ModelConfig::default();
    let m = Mosra::<f32>::new(cfg.clone(), 1).unwrap();
    let mut seg = random_segments(3, &cfg, 5);
    let per = cfg.frontend.n_mels * cfg.frontend.segment_width_frames;
    let first = seg.values[..per].to_vec();
    seg.values[per..2 * per].copy_from_slice(&first);
    seg.values[2 * per..].fill(cfg.frontend.log_floor_db as f32);
    let f = m.segment_features(&seg).unwrap();
    assert_eq!(f.data[..64], f.data[64..128]);
    assert!(f.data[128..].iter().all(|v| v.is_finite()));
}

#[test]
fn shared_encoder_is_position_sensitive() {
    let cfg = ModelConfig::default();
    let m = Mosra::<f64>::new(cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows = 5;
    let x: Vec<f64> = (0..rows * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut swapped = x.clone();
    for j in 0..64 {
        swapped.swap(j, 64 + j);
    }
    let groups = Groups::from_lengths(&[rows]).unwrap();
    let run = |data: Vec<f64>| {
        let mut g = Graph::new(m.params(), false, 0);
        let f = g.input(Tensor::new(vec![rows, 64], data).unwrap());
        let c = m.shared(&mut g, f, &groups).unwrap();
        assert_eq!(g.shape(c), &[rows, 64]);
        g.value(c).to_vec()
    };
    let a = run(x);
    let b = run(swapped);
    // rows 0 and 1 traded inputs; without position information they would trade outputs
    let row = |v: &[f64], r: usize| v[r * 64..(r + 1) * 64].to_vec();
    assert_ne!(row(&a, 0), row(&b, 1));
}

#[test]
fn pooling_weights_normalised() {
    let cfg = ModelConfig::default();
    let m = Mosra::<f64>::new(cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let lengths = [4, 1, 7];
    let total: usize = lengths.iter().sum();
    let groups = Groups::from_lengths(&lengths).unwrap();
    let mut g = Graph::new(m.params(), false, 0);
    let ctx = g.input(Tensor::new(vec![total, 64], (0..total * 64).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap());
    for t in Task::ALL {
        let h = m.head(&mut g, ctx, &groups, t).unwrap();
        assert_eq!(g.shape(h.value), &[3, 1]);
        let w = g.value(h.pool_weights).to_vec();
        for gi in 0..groups.len() {
            let s: f64 = w[groups.range(gi)].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert_eq!(w[4], 1.0);
    }
}

#[test]
fn heads_are_independent() {
    let cfg = ModelConfig::tiny();
    let base = Mosra::<f32>::new(cfg.clone(), 7).unwrap();
    let seg = random_segments(3, &cfg, 8);
    let before = base.raw_outputs(&seg).unwrap();
    let mut changed = base.clone();
    for id in base.head_params(Task::T60) {
        for v in &mut changed.params_mut().get_mut(id).data {
            *v += 0.5;
        }
    }
    let after = changed.raw_outputs(&seg).unwrap();
    for t in Task::ALL {
        if t == Task::T60 {
            assert_ne!(before[t.index()], after[t.index()]);
        } else {
            assert_eq!(before[t.index()], after[t.index()], "{}", t.name());
        }
    }
}

#[test]
fn output_depends_on_every_segment() {
    let cfg = ModelConfig::tiny();
    let m = Mosra::<f64>::new(cfg.clone(), 9).unwrap();
    let seg = random_segments(4, &cfg, 10);
    let per = cfg.frontend.n_mels * cfg.frontend.segment_width_frames;
    let base = m.raw_outputs(&seg).unwrap();
    for k in 0..4 {
        let mut s = seg.clone();
        for v in &mut s.values[k * per..(k + 1) * per] {
            *v += 3.0;
        }
        let out = m.raw_outputs(&s).unwrap();
        assert!(Task::ALL.iter().all(|t| out[t.index()] != base[t.index()]), "segment {k}");
    }
}

#[test]
fn training_forward_matches_eval_shapes() {
    let cfg = ModelConfig::tiny();
    let m = Mosra::<f32>::new(cfg.clone(), 11).unwrap();
    let a = random_segments(2, &cfg, 1);
    let b = random_segments(3, &cfg, 2);
    let batch = SegmentBatch::<f32>::from_tensors([&a, &b]);
    let mut g = Graph::new(m.params(), true, 0);
    let outs = m.forward(&mut g, &batch, &Task::ACOUSTIC).unwrap();
    assert_eq!(outs.len(), 5);
    for o in outs {
        assert_eq!(g.shape(o), &[2, 1]);
    }
    assert!(!g.take_buffer_updates().is_empty());
}

#[test]
fn predict_is_deterministic_and_rejects_short_audio() {
    let m = Mosra::<f32>::new(ModelConfig::default(), 12).unwrap();
    let audio = speech_like(1.0, 48_000, 3).unwrap();
    assert_eq!(m.predict(&audio).unwrap(), m.predict(&audio).unwrap());
    let short = AudioBuffer::new(vec![0.1; 500], 48_000).unwrap();
    assert!(m.predict(&short).is_err());
}

#[test]
fn predict_resamples_other_rates() {
    let m = Mosra::<f32>::new(ModelConfig::default(), 12).unwrap();
    let audio = speech_like(1.0, 16_000, 3).unwrap();
    assert!(m.predict(&audio).is_ok());
}

#[test]
fn denormalisation_inverts_normalisation() {
    let norm = NormStats {
        mean: [20.0, 0.6, 0.8, 5.0, 3.0],
        std: [10.0, 0.1, 0.4, 6.0, 7.0],
    };
    for t in Task::ALL {
        for v in [-3.0, 0.0, 1.7, 42.0] {
            assert!((norm.denormalize(t, norm.normalize(t, v)) - v).abs() < 1e-12);
        }
    }
    assert_eq!(norm.normalize(Task::Mos, 3.3), 3.3);
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = Mosra::<f32>::new(ModelConfig::default(), 13).unwrap();
    m.set_norm(NormStats {
        mean: [21.5, 0.61, 0.83, 4.9, 2.7],
        std: [11.0, 0.13, 0.41, 6.2, 7.3],
    });
    let (p1, p2) = (dir.path().join("a.mosra"), dir.path().join("b.mosra"));
    m.save(&p1).unwrap();
    let loaded = Mosra::<f32>::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(loaded.params(), m.params());
    assert_eq!(loaded.norm(), m.norm());
    assert_eq!(loaded.param_count(), m.param_count());
    let audio = speech_like(1.5, 48_000, 4).unwrap();
    assert_eq!(loaded.predict(&audio).unwrap(), m.predict(&audio).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn label_statistics_survive_save_and_load(
        mean in proptest::array::uniform5(-1e3..1e3f64),
        std in proptest::array::uniform5(1e-3..1e3f64),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Mosra::<f32>::new(ModelConfig::tiny(), 1).unwrap();
        m.set_norm(NormStats { mean, std });
        let (p1, p2) = (dir.path().join("a.mosra"), dir.path().join("b.mosra"));
        m.save(&p1).unwrap();
        let loaded = Mosra::<f32>::load(&p1).unwrap();
        prop_assert_eq!(loaded.norm(), m.norm());
        loaded.save(&p2).unwrap();
        prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}

#[test]
fn load_rejects_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.mosra");
    Mosra::<f32>::new(ModelConfig::tiny(), 0).unwrap().save(&p).unwrap();
    let good = std::fs::read(&p).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    std::fs::write(&p, &bad).unwrap();
    assert!(Mosra::<f32>::load(&p).is_err());

    std::fs::write(&p, &good[..good.len() - 4]).unwrap();
    assert!(Mosra::<f32>::load(&p).is_err());

    let text = String::from_utf8_lossy(&good).into_owned();
    let version = text.replacen("\"format_version\":1", "\"format_version\":9", 1);
    std::fs::write(&p, version.as_bytes()).unwrap();
    let err = Mosra::<f32>::load(&p).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");

    // widen one channel in the config so the stored tensors no longer fit
    let header_len = u32::from_le_bytes(good[6..10].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&good[10..10 + header_len]).unwrap();
    let edited = header.replacen("\"cnn_channels\":[2,", "\"cnn_channels\":[5,", 1);
    assert_ne!(edited, header);
    let mut bytes = good[..6].to_vec();
    bytes.extend_from_slice(&(edited.len() as u32).to_le_bytes());
    bytes.extend_from_slice(edited.as_bytes());
    bytes.extend_from_slice(&good[10 + header_len..]);
    std::fs::write(&p, bytes).unwrap();
    assert!(Mosra::<f32>::load(&p).is_err());
}
