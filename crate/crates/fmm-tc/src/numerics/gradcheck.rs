//! Central finite-difference gradient checking (f64).
//!
//! Independent oracle for `Graph::backward`: rebuilds the graph from scratch
//! for every perturbed input, so it never reuses the reverse-mode path it is
//! checking.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Maximum relative error between reverse-mode and central finite-difference
/// gradients, over every element of every input.
///
/// `build` must deterministically construct a scalar loss from the given
/// leaves.
pub fn max_rel_error<B>(inputs: &[Tensor<f64>], h: f64, build: B) -> f64
where
    B: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    max_rel_error_impl(inputs, h, build)
}

fn max_rel_error_impl<B>(inputs: &[Tensor<f64>], h: f64, build: B) -> f64
where
    B: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.parameter(t.clone())).collect();
    let loss = build(&mut g, &ids);
    let grads = g.backward(loss).expect("backward failed in gradcheck");

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|t| g.parameter(t.clone())).collect();
        let loss = build(&mut g, &ids);
        g.value(loss).scalar_value()
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(id)
            .unwrap_or_else(|| panic!("input {pi} received no gradient"));
        for ei in 0..inputs[pi].numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let fp = eval(&work);
            work[pi].data_mut()[ei] = orig - h;
            let fm = eval(&work);
            work[pi].data_mut()[ei] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic.data()[ei];
            let rel = (a - fd).abs() / 1.0f64.max(a.abs()).max(fd.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

/// Run the finite-difference check once per op kind on small random tensors.
/// Returns `(op name, max relative error)` pairs.
pub fn check_all_ops(seed: u64) -> Vec<(&'static str, f64)> {
    use super::graph::Op;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    // Keep values away from relu/abs kinks.
    let mut rand_t = |shape: &[usize]| {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| {
                let v: f64 = rng.gen_range(0.2..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    };

    // Weighted sum keeps the loss sensitive to every output element.
    fn weighted_loss(g: &mut Graph<f64>, y: NodeId) -> NodeId {
        let shape = g.value(y).shape().to_vec();
        let n = g.value(y).numel();
        let data: Vec<f64> = (0..n).map(|i| 0.3 + 0.11 * (i % 7) as f64).collect();
        let w = g.constant(Tensor::from_vec(shape, data).unwrap());
        let p = g.mul(y, w).unwrap();
        g.sum(p).unwrap()
    }

    type Build = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId>;
    let cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = vec![
        (
            "matmul",
            vec![rand_t(&[3, 4]), rand_t(&[4, 2])],
            Box::new(|g, ids| {
                let y = g.matmul(ids[0], ids[1]).unwrap();
                weighted_loss(g, y)
            }),
        ),
        (
            "add",
            vec![rand_t(&[3, 4]), rand_t(&[3, 4])],
            Box::new(|g, ids| {
                let y = g.add(ids[0], ids[1]).unwrap();
                weighted_loss(g, y)
            }),
        ),
        (
            "add_bias",
            vec![rand_t(&[3, 4]), rand_t(&[4])],
            Box::new(|g, ids| {
                let y = g.add(ids[0], ids[1]).unwrap();
                weighted_loss(g, y)
            }),
        ),
        (
            "sub",
            vec![rand_t(&[5]), rand_t(&[5])],
            Box::new(|g, ids| {
                let y = g.sub(ids[0], ids[1]).unwrap();
                weighted_loss(g, y)
            }),
        ),
        (
            "mul",
            vec![rand_t(&[2, 3]), rand_t(&[2, 3])],
            Box::new(|g, ids| {
                let y = g.mul(ids[0], ids[1]).unwrap();
                weighted_loss(g, y)
            }),
        ),
        (
            "mul_scalar_broadcast",
            vec![rand_t(&[1]), rand_t(&[4])],
            Box::new(|g, ids| {
                let y = g.mul(ids[0], ids[1]).unwrap();
                weighted_loss(g, y)
            }),
        ),
        (
            "relu",
            vec![rand_t(&[3, 5])],
            Box::new(|g, ids| {
                let y = g.relu(ids[0]).unwrap();
                weighted_loss(g, y)
            }),
        ),
        (
            "gelu",
            vec![rand_t(&[3, 5])],
            Box::new(|g, ids| {
                let y = g.gelu(ids[0]).unwrap();
                weighted_loss(g, y)
            }),
        ),
        (
            "sigmoid",
            vec![rand_t(&[3, 5])],
            Box::new(|g, ids| {
                let y = g.sigmoid(ids[0]).unwrap();
                weighted_loss(g, y)
            }),
        ),
        (
            "softplus",
            vec![rand_t(&[3, 5])],
            Box::new(|g, ids| {
                let y = g.softplus(ids[0]).unwrap();
                weighted_loss(g, y)
            }),
        ),
        (
            "softmax",
            vec![rand_t(&[3, 5])],
            Box::new(|g, ids| {
                let y = g.softmax(ids[0]).unwrap();
                weighted_loss(g, y)
            }),
        ),
        (
            "layernorm",
            vec![rand_t(&[3, 6]), rand_t(&[6]), rand_t(&[6])],
            Box::new(|g, ids| {
                let y = g.layernorm(ids[0], ids[1], ids[2]).unwrap();
                weighted_loss(g, y)
            }),
        ),
        (
            "groupnorm",
            vec![rand_t(&[4, 3, 3]), rand_t(&[4]), rand_t(&[4])],
            Box::new(|g, ids| {
                let y = g
                    .apply(Op::GroupNorm { groups: 2, eps: 1e-5 }, &[ids[0], ids[1], ids[2]])
                    .unwrap();
                weighted_loss(g, y)
            }),
        ),
        (
            "conv2d",
            vec![rand_t(&[2, 5, 5]), rand_t(&[3, 2, 3, 3]), rand_t(&[3])],
            Box::new(|g, ids| {
                let y = g
                    .apply(Op::Conv2d { stride: 2, pad: 1 }, &[ids[0], ids[1], ids[2]])
                    .unwrap();
                weighted_loss(g, y)
            }),
        ),
        (
            "avgpool2d",
            vec![rand_t(&[2, 4, 4])],
            Box::new(|g, ids| {
                let y = g
                    .apply(Op::AvgPool2d { kernel: 2, stride: 2 }, &[ids[0]])
                    .unwrap();
                weighted_loss(g, y)
            }),
        ),
        ("mean", vec![rand_t(&[7])], Box::new(|g, ids| g.mean(ids[0]).unwrap())),
        ("sum", vec![rand_t(&[7])], Box::new(|g, ids| g.sum(ids[0]).unwrap())),
        (
            "concat",
            vec![rand_t(&[2, 3]), rand_t(&[2, 2])],
            Box::new(|g, ids| {
                let y = g.concat(1, &[ids[0], ids[1]]).unwrap();
                weighted_loss(g, y)
            }),
        ),
        (
            "slice",
            vec![rand_t(&[4, 5])],
            Box::new(|g, ids| {
                let y = g.slice(ids[0], 1, 1, 3).unwrap();
                weighted_loss(g, y)
            }),
        ),
        (
            "transpose",
            vec![rand_t(&[3, 4])],
            Box::new(|g, ids| {
                let y = g.transpose(ids[0]).unwrap();
                weighted_loss(g, y)
            }),
        ),
        (
            "embed_lookup",
            vec![rand_t(&[5, 3])],
            Box::new(|g, ids| {
                let y = g.embed_lookup(ids[0], vec![0, 2, 2, 4]).unwrap();
                weighted_loss(g, y)
            }),
        ),
        (
            "scale",
            vec![rand_t(&[6])],
            Box::new(|g, ids| {
                let y = g.scale(ids[0], -1.7).unwrap();
                weighted_loss(g, y)
            }),
        ),
        (
            "reshape",
            vec![rand_t(&[2, 6])],
            Box::new(|g, ids| {
                let y = g.reshape(ids[0], vec![3, 4]).unwrap();
                weighted_loss(g, y)
            }),
        ),
    ];

    cases
        .into_iter()
        .map(|(name, inputs, build)| {
            let err = max_rel_error(&inputs, DEFAULT_STEP, |g, ids| build(g, ids));
            (name, err)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_op_matches_finite_differences() {
        for (name, err) in super::check_all_ops(11) {
            assert!(err <= 1e-6, "op `{name}` gradcheck error {err}");
        }
    }
}
