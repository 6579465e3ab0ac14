//! Finite-difference checks for every differentiable tensor operation.
//!
//! Each op is probed on 20 random instances. The scalar being differentiated
//! is a random linear functional of the op's output, so every output entry
//! contributes. Analytic gradients come from `Graph::backward`; the oracle is
//! a central difference that only ever runs forward passes.

use brltm::rng::{stream, Purpose, Rng};
use brltm::tensor::{Graph, Tensor, Var};
use rand::Rng as _;

const PROBES: u64 = 20;
const STEP: f64 = 1e-6;
const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-6;

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// `build` maps leaf inputs to the op output.
fn check<F>(name: &str, shapes: &[&[usize]], build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let forward = |inputs: &[Tensor]| -> Tensor {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).clone()
    };
    for probe in 0..PROBES {
        let mut rng = stream(0xF1D1, Purpose::Init, probe);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
        let out_shape = forward(&inputs).shape().to_vec();
        let projection = random_tensor(&mut rng, &out_shape);
        let objective = |inputs: &[Tensor]| -> f64 {
            forward(inputs).data().iter().zip(projection.data()).map(|(a, b)| a * b).sum()
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let w = g.constant(projection.clone());
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();

        for (i, input) in inputs.iter().enumerate() {
            let analytic = g.grad(vars[i]).unwrap();
            for j in 0..input.len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += STEP;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= STEP;
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * STEP);
                let a = analytic.data()[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
                assert!(
                    err < TOLERANCE,
                    "{name}: probe {probe}, input {i}[{j}]: analytic {a} vs numeric {numeric} (rel {err:e})"
                );
            }
        }
    }
}

#[test]
fn matmul_plain() {
    check("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]).unwrap());
}

#[test]
fn matmul_batched_and_broadcast() {
    check("matmul batched", &[&[2, 3, 4], &[2, 4, 5]], |g, v| g.matmul(v[0], v[1]).unwrap());
    check("matmul broadcast", &[&[2, 2, 3, 4], &[4, 3]], |g, v| g.matmul(v[0], v[1]).unwrap());
}

#[test]
fn add_mul_scale() {
    check("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]).unwrap());
    check("add bias", &[&[2, 3, 4], &[4]], |g, v| g.add(v[0], v[1]).unwrap());
    check("mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]).unwrap());
    check("scale", &[&[5]], |g, v| g.scale(v[0], -2.5));
}

#[test]
fn shape_ops() {
    check("transpose", &[&[2, 3, 4]], |g, v| g.transpose(v[0]).unwrap());
    check("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]).unwrap());
    check("permute", &[&[2, 3, 4, 2]], |g, v| g.permute(v[0], &[0, 2, 1, 3]).unwrap());
    check("concat", &[&[2, 3], &[2, 2]], |g, v| g.concat(&[v[0], v[1]], 1).unwrap());
    check("slice", &[&[4, 3, 2]], |g, v| g.slice(v[0], 1, 1, 3).unwrap());
    check("gather", &[&[5, 3]], |g, v| g.gather(v[0], &[4, 0, 4, 2]).unwrap());
}

#[test]
fn nonlinearities() {
    check("softmax", &[&[3, 5]], |g, v| g.softmax(v[0]).unwrap());
    check("masked softmax", &[&[2, 2, 3, 3]], |g, v| {
        let keep = [true, true, false, true, false, true];
        let m = g.mask_keys(v[0], &keep).unwrap();
        g.softmax(m).unwrap()
    });
    check("gelu", &[&[4, 3]], |g, v| g.gelu(v[0]));
    check("layer_norm", &[&[3, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-12).unwrap());
}

#[test]
fn losses() {
    check("cross_entropy", &[&[4, 6]], |g, v| g.cross_entropy(v[0], &[2, usize::MAX, 5, 0], usize::MAX).unwrap());
    check("bce_with_logits", &[&[5]], |g, v| g.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0, 1.0]).unwrap());
    check("mean", &[&[3, 2]], |g, v| g.mean(v[0]));
}

#[test]
fn dropout_gradient_uses_same_mask() {
    // The mask is drawn from a fixed stream so every forward pass agrees.
    check("dropout", &[&[4, 5]], |g, v| {
        let mut rng = stream(3, Purpose::Dropout, 0);
        g.dropout(v[0], 0.3, &mut rng)
    });
}

#[test]
fn composite_attention_block() {
    // scores -> mask -> softmax -> weighted values, as used by the encoder.
    check("attention", &[&[1, 2, 3, 4], &[1, 2, 3, 4], &[1, 2, 3, 4]], |g, v| {
        let kt = g.transpose(v[1]).unwrap();
        let s = g.matmul(v[0], kt).unwrap();
        let s = g.scale(s, 0.5);
        let s = g.mask_keys(s, &[true, true, false]).unwrap();
        let p = g.softmax(s).unwrap();
        g.matmul(p, v[2]).unwrap()
    });
}
