//! Finite-difference gradient checks shared by the core tests and the acceptance suite.

// each includer uses a different subset
#![allow(dead_code)]

use mosra::frontend::SegmentTensor;
use mosra::model::{ModelConfig, Mosra};
use mosra::tensor::gradcheck::{check, ParamCheck};
use mosra::tensor::{Graph, Groups, NodeId, ParamId, ParamStore, Tensor};
use mosra::train::{iteration_loss, Example, LossWeights};
use mosra::acoustics::AcousticLabels;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    // keep values away from zero so ReLU and max-pool kinks are not straddled
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Names of the failing parameters, empty when every check passes.
pub fn failures(report: &[ParamCheck]) -> Vec<String> {
    if report.is_empty() {
        return vec!["no parameters checked".into()];
    }
    report
        .iter()
        .filter(|r| !(r.rel_error < TOL))
        .map(|r| {
            format!(
                "{}: rel error {:.3e} (analytic {:.3e}, numeric {:.3e})",
                r.name, r.rel_error, r.analytic_norm, r.numeric_norm
            )
        })
        .collect()
}

struct Setup {
    params: ParamStore<f64>,
    ids: Vec<ParamId>,
    target: Tensor<f64>,
}

/// Trainable tensors of the given shapes plus a random regression target.
fn setup(seed: u64, shapes: &[&[usize]], target_shape: &[usize]) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| params.add(format!("p{i}"), random(&mut rng, s), true))
        .collect();
    let target = random(&mut rng, target_shape);
    Setup { params, ids, target }
}

fn run(s: &Setup, train: bool, f: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId) -> Vec<ParamCheck> {
    check(&s.params, train, 7, H, |g| {
        let nodes: Vec<NodeId> = s.ids.iter().map(|&id| g.param(id)).collect();
        let out = f(g, &nodes);
        let t = g.input(s.target.clone());
        g.mse(out, t)
    })
    .unwrap()
}

pub fn linear() -> Vec<ParamCheck> {
    let s = setup(1, &[&[5, 4], &[4, 3], &[3]], &[5, 3]);
    run(&s, true, |g, p| g.linear(p[0], p[1], Some(p[2])).unwrap())
}

pub fn conv2d_same_padding() -> Vec<ParamCheck> {
    let s = setup(2, &[&[2, 3, 5, 4], &[4, 3, 3, 3], &[4]], &[2, 4, 5, 4]);
    run(&s, true, |g, p| g.conv2d(p[0], p[1], Some(p[2]), 1, 1).unwrap())
}

pub fn conv2d_strided() -> Vec<ParamCheck> {
    let s = setup(3, &[&[2, 2, 7, 6], &[3, 2, 3, 3]], &[2, 3, 3, 2]);
    run(&s, true, |g, p| g.conv2d(p[0], p[1], None, 2, 0).unwrap())
}

fn bn_setup(seed: u64) -> (Setup, ParamId, ParamId) {
    let mut s = setup(seed, &[&[3, 2, 3, 2], &[2], &[2]], &[3, 2, 3, 2]);
    let rm = s.params.add("rm", Tensor::new(vec![2], vec![0.3, -0.2]).unwrap(), false);
    let rv = s.params.add("rv", Tensor::new(vec![2], vec![1.5, 0.7]).unwrap(), false);
    (s, rm, rv)
}

pub fn batch_norm_train() -> Vec<ParamCheck> {
    let (s, rm, rv) = bn_setup(4);
    run(&s, true, |g, p| g.batch_norm(p[0], p[1], p[2], rm, rv, 0.1, 1e-5).unwrap())
}

pub fn batch_norm_eval() -> Vec<ParamCheck> {
    let (s, rm, rv) = bn_setup(5);
    run(&s, false, |g, p| g.batch_norm(p[0], p[1], p[2], rm, rv, 0.1, 1e-5).unwrap())
}

pub fn relu_maxpool_gap() -> Vec<ParamCheck> {
    let s = setup(6, &[&[2, 3, 4, 5]], &[2, 3]);
    run(&s, true, |g, p| {
        let r = g.relu(p[0]);
        let m = g.max_pool2(r).unwrap();
        g.global_avg_pool(m).unwrap()
    })
}

pub fn layer_norm() -> Vec<ParamCheck> {
    let s = setup(7, &[&[4, 6], &[6], &[6]], &[4, 6]);
    run(&s, true, |g, p| g.layer_norm(p[0], p[1], p[2], 1e-5).unwrap())
}

pub fn softmax() -> Vec<ParamCheck> {
    let s = setup(8, &[&[3, 5]], &[3, 5]);
    run(&s, true, |g, p| g.softmax(p[0]))
}

pub fn grouped_attention() -> Vec<ParamCheck> {
    let s = setup(9, &[&[6, 4], &[6, 4], &[6, 4]], &[6, 4]);
    let groups = Groups::from_lengths(&[2, 3, 1]).unwrap();
    run(&s, true, |g, p| g.grouped_attention(p[0], p[1], p[2], &groups).unwrap())
}

pub fn attention_pooling() -> Vec<ParamCheck> {
    let s = setup(10, &[&[5, 3], &[5, 1]], &[2, 3]);
    let groups = Groups::from_lengths(&[3, 2]).unwrap();
    run(&s, true, |g, p| {
        let w = g.group_softmax(p[1], &groups).unwrap();
        g.group_weighted_sum(p[0], w, &groups).unwrap()
    })
}

pub fn dropout_add_scale() -> Vec<ParamCheck> {
    let s = setup(11, &[&[4, 5], &[4, 5]], &[4, 5]);
    run(&s, true, |g, p| {
        let d = g.dropout(p[0], 0.3);
        let a = g.add(d, p[1]).unwrap();
        g.scale(a, -1.7)
    })
}

pub fn mse_against_trainable_target() -> Vec<ParamCheck> {
    let s = setup(12, &[&[7], &[7]], &[1]);
    check(&s.params, true, 0, H, |g| {
        let (a, b) = (g.param(s.ids[0]), g.param(s.ids[1]));
        g.mse(a, b)
    })
    .unwrap()
}

fn tiny_example(rng: &mut ChaCha8Rng, cfg: &ModelConfig, with_mos: bool) -> Example {
    let (m, w) = (cfg.frontend.n_mels, cfg.frontend.segment_width_frames);
    let values = (0..2 * m * w).map(|_| rng.gen_range(-80.0f32..0.0)).collect();
    Example {
        segments: SegmentTensor {
            values,
            n_segments: 2,
            n_mels: m,
            width: w,
        },
        mos: with_mos.then(|| rng.gen_range(1.0..5.0)),
        labels: Some(AcousticLabels {
            snr_db: rng.gen_range(0.0..40.0),
            sti: rng.gen_range(0.3..1.0),
            t60_s: rng.gen_range(0.2..1.5),
            drr_db: rng.gen_range(-5.0..15.0),
            c50_db: rng.gen_range(-5.0..20.0),
        }),
    }
}

pub fn tiny_model_end_to_end() -> Vec<ParamCheck> {
    let cfg = ModelConfig::tiny();
    let model = Mosra::<f64>::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mos: Vec<Example> = (0..2).map(|_| tiny_example(&mut rng, &cfg, true)).collect();
    let ra: Vec<Example> = (0..2).map(|_| tiny_example(&mut rng, &cfg, false)).collect();
    let mos_refs: Vec<&Example> = mos.iter().collect();
    let ra_refs: Vec<&Example> = ra.iter().collect();
    let weights = LossWeights::default();
    let report = check(model.params(), true, 5, H, |g| {
        // forward reads parameters through the graph's store, so the
        // perturbed copies are the ones used
        iteration_loss(g, &model, &mos_refs, &ra_refs, &weights)
    })
    .unwrap();
    assert_eq!(report.len(), model.params().entries().iter().filter(|e| e.trainable).count());
    report
}


pub type Case = (&'static str, fn() -> Vec<ParamCheck>);

pub const CASES: [Case; 13] = [
    ("linear", linear),
    ("conv2d_same_padding", conv2d_same_padding),
    ("conv2d_strided", conv2d_strided),
    ("batch_norm_train", batch_norm_train),
    ("batch_norm_eval", batch_norm_eval),
    ("relu_maxpool_gap", relu_maxpool_gap),
    ("layer_norm", layer_norm),
    ("softmax", softmax),
    ("grouped_attention", grouped_attention),
    ("attention_pooling", attention_pooling),
    ("dropout_add_scale", dropout_add_scale),
    ("mse_against_trainable_target", mse_against_trainable_target),
    ("tiny_model_end_to_end", tiny_model_end_to_end),
];
