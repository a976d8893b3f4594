#![allow(dead_code)]

use gerec_core::data::TrainBatch;
use gerec_core::model::{Model, ModelConfig, ModelKind};
use gerec_core::ndcore::{rng, Tensor};

const H: f64 = 1e-5;

/// Max over parameter groups of ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖).
pub fn worst_group_error(
    model: &Model,
    loss: impl Fn(&Model) -> (f64, Vec<Tensor>),
) -> (f64, String) {
    let (_, analytic) = loss(model);
    let mut worst = (0.0, String::new());
    for (p, name) in model.names().iter().enumerate() {
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for i in 0..model.params()[p].len() {
            let mut probe = model.clone();
            probe.params_mut()[p].data_mut()[i] += H;
            let up = loss(&probe).0;
            probe.params_mut()[p].data_mut()[i] -= 2.0 * H;
            let down = loss(&probe).0;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic[p].data()[i];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        let rel = if scale < 1e-12 { diff2.sqrt() } else { diff2.sqrt() / scale };
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
    }
    worst
}

pub fn batch() -> TrainBatch {
    TrainBatch {
        users: vec![0, 1, 2, 3, 4, 0, 2, 4],
        items: vec![4, 3, 2, 1, 0, 1, 0, 3],
        labels: vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0],
    }
}

pub fn perturbed(kind: ModelKind) -> Model {
    let cfg = ModelConfig::new(kind, 5, 5).with_sizes(4, 2, 3);
    let mut m = Model::init(cfg, 21).unwrap();
    // move raw variances off zero so both ELU branches are exercised
    let mut r = rng::seeded(99);
    for name in ["user_raw_variance", "item_raw_variance"] {
        if let Some(t) = m.param_mut(name) {
            let noise = rng::standard_normal(&mut r, t.len());
            for (w, n) in t.data_mut().iter_mut().zip(noise) {
                *w = 0.5 * n;
            }
        }
    }
    // zero biases put ReLU inputs exactly on the kink when features are dead
    let biases: Vec<String> = m.names().iter().filter(|n| n.ends_with("_bias")).cloned().collect();
    for name in biases {
        let t = m.param_mut(&name).unwrap();
        let noise = rng::standard_normal(&mut r, t.len());
        for (w, n) in t.data_mut().iter_mut().zip(noise) {
            *w = 0.3 * n;
        }
    }
    // larger means give the CNN non-trivial activations
    for name in ["user_mean", "item_mean"] {
        if let Some(t) = m.param_mut(name) {
            let noise = rng::standard_normal(&mut r, t.len());
            for (w, n) in t.data_mut().iter_mut().zip(noise) {
                *w = n;
            }
        }
    }
    m
}
