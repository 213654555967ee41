//! Central finite-difference verification of backward rules.
//!
//! Every differentiable op is exercised through a scalar-producing builder;
//! analytic input gradients from one backward pass are compared against
//! central differences element by element. The comparison runs entirely in
//! 64-bit, so the tolerance can be tight.

use super::{Graph, NumericError, Tensor, TensorId};
use crate::util::seeded_rng;
use rand::Rng;

const FD_EPS: f64 = 1e-5;
const ABS_TOL: f64 = 1e-7;
const REL_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    /// Largest |analytic − numeric| over all checked elements.
    pub max_abs_diff: f64,
    /// Largest |analytic − numeric| / max(|analytic|, |numeric|).
    pub max_rel_diff: f64,
    pub elements: usize,
    pub ok: bool,
}

fn within_tolerance(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= ABS_TOL.max(REL_TOL * analytic.abs().max(numeric.abs()))
}

/// Compare analytic gradients of `build`'s scalar output against central
/// finite differences over every element of every input.
pub fn check_scalar_fn<F>(name: &str, inputs: &[Tensor], build: F) -> CheckOutcome
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId, NumericError>,
{
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut graph = Graph::new();
        let ids: Vec<TensorId> = tensors.iter().map(|t| graph.constant(t.clone())).collect();
        let loss = build(&mut graph, &ids).expect("gradcheck builder failed");
        graph.value(loss).item()
    };

    let mut graph = Graph::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| graph.leaf(t.clone(), true)).collect();
    let loss = build(&mut graph, &ids).expect("gradcheck builder failed");
    assert!(graph.value(loss).is_scalar(), "gradcheck target must be scalar");
    let grads = graph.backward(loss).expect("backward failed");

    let mut max_abs_diff: f64 = 0.0;
    let mut max_rel_diff: f64 = 0.0;
    let mut elements = 0;
    let mut ok = true;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape.clone()));
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= FD_EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS);
            let a = analytic.data[j];
            let abs = (a - numeric).abs();
            max_abs_diff = max_abs_diff.max(abs);
            if abs > ABS_TOL {
                max_rel_diff = max_rel_diff.max(abs / a.abs().max(numeric.abs()));
            }
            ok &= within_tolerance(a, numeric);
            elements += 1;
        }
    }
    CheckOutcome { name: name.to_string(), max_abs_diff, max_rel_diff, elements, ok }
}

/// Reduce an arbitrary tensor to a scalar through a fixed random weighting,
/// so the finite-difference check exercises the full Jacobian rather than
/// just row sums.
fn weighted_sum(graph: &mut Graph, y: TensorId, seed: u64) -> Result<TensorId, NumericError> {
    let shape = graph.value(y).shape.clone();
    let numel: usize = shape.iter().product();
    let mut rng = seeded_rng(seed, "gradcheck-weights", 0);
    let weights = Tensor {
        shape,
        data: (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    let w = graph.constant(weights);
    let prod = graph.mul(y, w)?;
    Ok(graph.sum_all(prod))
}

fn random_matrix(rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha20Rng) -> Tensor {
    Tensor {
        shape: vec![rows, cols],
        data: (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    }
}

fn random_vector(n: usize, rng: &mut rand_chacha::ChaCha20Rng) -> Tensor {
    Tensor::vector((0..n).map(|_| rng.gen_range(-1.5..1.5)).collect())
}

/// Run the finite-difference suite over every differentiable op at small
/// dimensions. Each outcome reports the worst element-wise deviation.
pub fn run_op_suite(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = seeded_rng(seed, "gradcheck-inputs", 0);
    let mut out = Vec::new();

    out.push(check_scalar_fn(
        "matmul",
        &[random_matrix(3, 4, &mut rng), random_matrix(4, 2, &mut rng)],
        |g, ids| {
            let y = g.matmul(ids[0], ids[1])?;
            weighted_sum(g, y, seed)
        },
    ));

    out.push(check_scalar_fn("transpose", &[random_matrix(3, 4, &mut rng)], |g, ids| {
        let y = g.transpose(ids[0])?;
        weighted_sum(g, y, seed)
    }));

    out.push(check_scalar_fn(
        "add",
        &[random_matrix(3, 3, &mut rng), random_matrix(3, 3, &mut rng)],
        |g, ids| {
            let y = g.add(ids[0], ids[1])?;
            weighted_sum(g, y, seed)
        },
    ));

    out.push(check_scalar_fn(
        "add_row_broadcast",
        &[random_matrix(4, 3, &mut rng), random_vector(3, &mut rng)],
        |g, ids| {
            let y = g.add_row_broadcast(ids[0], ids[1])?;
            weighted_sum(g, y, seed)
        },
    ));

    out.push(check_scalar_fn(
        "mul",
        &[random_matrix(3, 3, &mut rng), random_matrix(3, 3, &mut rng)],
        |g, ids| {
            let y = g.mul(ids[0], ids[1])?;
            weighted_sum(g, y, seed)
        },
    ));

    out.push(check_scalar_fn(
        "mul_col_vec",
        &[random_matrix(4, 3, &mut rng), random_vector(4, &mut rng)],
        |g, ids| {
            let y = g.mul_col_vec(ids[0], ids[1])?;
            weighted_sum(g, y, seed)
        },
    ));

    out.push(check_scalar_fn("scale", &[random_matrix(3, 3, &mut rng)], |g, ids| {
        let y = g.scale(ids[0], -1.7);
        weighted_sum(g, y, seed)
    }));

    out.push(check_scalar_fn("add_const", &[random_matrix(3, 3, &mut rng)], |g, ids| {
        let y = g.add_const(ids[0], 0.4);
        weighted_sum(g, y, seed)
    }));

    out.push(check_scalar_fn(
        "concat_cols",
        &[random_matrix(3, 2, &mut rng), random_matrix(3, 4, &mut rng)],
        |g, ids| {
            let y = g.concat_cols(&[ids[0], ids[1]])?;
            weighted_sum(g, y, seed)
        },
    ));

    out.push(check_scalar_fn(
        "concat_rows",
        &[random_matrix(2, 3, &mut rng), random_matrix(4, 3, &mut rng)],
        |g, ids| {
            let y = g.concat_rows(&[ids[0], ids[1]])?;
            weighted_sum(g, y, seed)
        },
    ));

    out.push(check_scalar_fn("gather_rows", &[random_matrix(4, 3, &mut rng)], |g, ids| {
        // Repeated indices make the backward accumulation visible.
        let y = g.gather_rows(ids[0], &[2, 0, 2, 1])?;
        weighted_sum(g, y, seed)
    }));

    out.push(check_scalar_fn("gather_scalars", &[random_matrix(3, 3, &mut rng)], |g, ids| {
        let y = g.gather_scalars(ids[0], &[5, 1, 5, 8])?;
        let m = g.reshape(y, vec![4, 1])?;
        weighted_sum(g, m, seed)
    }));

    out.push(check_scalar_fn("segment_sum_rows", &[random_matrix(4, 3, &mut rng)], |g, ids| {
        let y = g.segment_sum_rows(ids[0], &[0, 2, 0, 1], 3)?;
        weighted_sum(g, y, seed)
    }));

    out.push(check_scalar_fn(
        "typed_matmul",
        &[
            random_matrix(5, 3, &mut rng),
            random_matrix(3, 2, &mut rng),
            random_matrix(3, 2, &mut rng),
            random_matrix(3, 2, &mut rng),
        ],
        |g, ids| {
            // One type is never used, so its gradient must stay zero.
            let y = g.typed_matmul(ids[0], &[ids[1], ids[2], ids[3]], &[0, 1, 0, 1, 1])?;
            weighted_sum(g, y, seed)
        },
    ));

    out.push(check_scalar_fn(
        "row_dot",
        &[random_matrix(4, 3, &mut rng), random_matrix(4, 3, &mut rng)],
        |g, ids| {
            let y = g.row_dot(ids[0], ids[1])?;
            let m = g.reshape(y, vec![4, 1])?;
            weighted_sum(g, m, seed)
        },
    ));

    out.push(check_scalar_fn("softmax_rows", &[random_matrix(3, 4, &mut rng)], |g, ids| {
        let y = g.softmax_rows(ids[0])?;
        weighted_sum(g, y, seed)
    }));

    out.push(check_scalar_fn("segment_softmax", &[random_vector(6, &mut rng)], |g, ids| {
        let y = g.segment_softmax(ids[0], &[0, 0, 1, 2, 2, 2])?;
        let m = g.reshape(y, vec![6, 1])?;
        weighted_sum(g, m, seed)
    }));

    out.push(check_scalar_fn("sigmoid", &[random_matrix(3, 3, &mut rng)], |g, ids| {
        let y = g.sigmoid(ids[0]);
        weighted_sum(g, y, seed)
    }));

    out.push(check_scalar_fn("gelu", &[random_matrix(3, 3, &mut rng)], |g, ids| {
        let y = g.gelu(ids[0]);
        weighted_sum(g, y, seed)
    }));

    out.push(check_scalar_fn("dropout", &[random_matrix(4, 4, &mut rng)], |g, ids| {
        // The mask is re-derived from the same stream on every evaluation,
        // so the function being differentiated stays fixed.
        let mut mask_rng = seeded_rng(seed, "gradcheck-dropout", 0);
        let y = g.dropout(ids[0], 0.25, true, &mut mask_rng)?;
        weighted_sum(g, y, seed)
    }));

    out.push(check_scalar_fn("sum_all", &[random_matrix(3, 3, &mut rng)], |g, ids| {
        Ok(g.sum_all(ids[0]))
    }));

    out.push(check_scalar_fn("mean_all", &[random_matrix(3, 3, &mut rng)], |g, ids| {
        Ok(g.mean_all(ids[0]))
    }));

    out.push(check_scalar_fn(
        "cross_entropy_rows",
        &[random_matrix(4, 5, &mut rng)],
        |g, ids| g.cross_entropy_rows(ids[0], &[1, 4, 0, 2]),
    ));

    let positive = Tensor {
        shape: vec![3, 4],
        data: (0..12).map(|_| rng.gen_range(0.05..1.0)).collect(),
    };
    out.push(check_scalar_fn("nll_rows", &[positive], |g, ids| {
        g.nll_rows(ids[0], &[2, 0, 3])
    }));

    out.push(check_scalar_fn("pad_cols", &[random_matrix(3, 2, &mut rng)], |g, ids| {
        let y = g.pad_cols(ids[0], 5)?;
        weighted_sum(g, y, seed)
    }));

    out.push(check_scalar_fn("reshape", &[random_matrix(3, 4, &mut rng)], |g, ids| {
        let y = g.reshape(ids[0], vec![6, 2])?;
        weighted_sum(g, y, seed)
    }));

    out.push(check_scalar_fn(
        "layer_norm_rows",
        &[random_matrix(3, 4, &mut rng), random_vector(4, &mut rng), random_vector(4, &mut rng)],
        |g, ids| {
            let y = g.layer_norm_rows(ids[0], ids[1], ids[2])?;
            weighted_sum(g, y, seed)
        },
    ));

    out.push(check_scalar_fn(
        "composite_chain",
        &[random_matrix(3, 4, &mut rng), random_matrix(4, 4, &mut rng)],
        |g, ids| {
            // A little network: linear → GELU → softmax → NLL-style pick.
            let h = g.matmul(ids[0], ids[1])?;
            let a = g.gelu(h);
            let p = g.softmax_rows(a)?;
            g.nll_rows(p, &[0, 3, 1])
        },
    ));

    out
}
