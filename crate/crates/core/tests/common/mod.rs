#![allow(dead_code)]

use cascadenet::corpus::Label;
use cascadenet::model::{ArchKind, Architecture, ClassifierModel, InputDims, Parameters};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub model: ClassifierModel,
    pub inputs: Vec<Array2<f64>>,
    pub labels: Vec<Label>,
}

/// Small random model plus a batch of inputs for `kind`.
pub fn random_instance(kind: ArchKind, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = InputDims {
        text: rng.random_range(3..10),
        sparse: rng.random_range(3..12),
        m2v: rng.random_range(2..8),
    };
    let tokens = rng.random_range(1..4);
    let arch = Architecture::with_shape(kind, dims, tokens, rng.random_range(2..6));
    let model = ClassifierModel::build(&arch, seed).expect("valid architecture");
    let batch = rng.random_range(2..5);
    let inputs = arch
        .branches
        .iter()
        .map(|b| Array2::from_shape_simple_fn((batch, b.input_dim), || rng.random_range(-1.5..1.5)))
        .collect();
    let labels = (0..batch).map(|_| Label::from_index(rng.random_range(0..2))).collect();
    Instance { model, inputs, labels }
}

fn loss(model: &ClassifierModel, inst: &Instance) -> f64 {
    let views: Vec<_> = inst.inputs.iter().map(|a| a.view()).collect();
    model.loss_and_gradient(&views, &inst.labels, None).expect("shapes match").0
}

/// Largest relative deviation between analytic and central-difference
/// gradients over every parameter, using max(|a|, |fd|, 1e-6) as the scale.
pub fn max_gradient_error(inst: &Instance) -> f64 {
    let views: Vec<_> = inst.inputs.iter().map(|a| a.view()).collect();
    let (_, grads) = inst.model.loss_and_gradient(&views, &inst.labels, None).expect("shapes match");
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, _, g)| g.to_vec()).collect();
    let h = 1e-5;
    let mut model = inst.model.clone();
    let mut worst = 0.0f64;
    for (t, grad) in analytic.iter().enumerate() {
        for (k, &a) in grad.iter().enumerate() {
            let orig = model.tensors_mut()[t].1[k];
            model.tensors_mut()[t].1[k] = orig + h;
            let up = loss(&model, inst);
            model.tensors_mut()[t].1[k] = orig - h;
            let down = loss(&model, inst);
            model.tensors_mut()[t].1[k] = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
    }
    worst
}
