use proptest::prelude::*;
use rand::Rng;
use tinyvit_core::seed;
use tinyvit_core::tensor::{grad_check, Tape, Tensor, Var, DEFAULT_STEP};
use tinyvit_core::Result;

const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0)
}

/// Reduces an op output to a scalar with fixed random weights, so every
/// output element contributes a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed_value: u64) -> Result<Var> {
    let mut rng = seed::rng(seed_value, &[99]);
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(random(&mut rng, &shape));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Runs `op` on 20 random instances of the given input shapes and checks
/// every input gradient against finite differences.
fn check_op<F>(name: &str, shapes: &[&[usize]], op: F)
where
    F: Fn(&mut Tape<f64>, &[Var], u64) -> Result<Var>,
{
    for s in 0..INSTANCES {
        let mut rng = seed::rng(s, &[name.len() as u64]);
        let params: Vec<_> = shapes.iter().map(|sh| random(&mut rng, sh)).collect();
        let report = grad_check(
            |tape, vars| {
                let y = op(tape, vars, s)?;
                weighted_sum(tape, y, s)
            },
            &params,
            DEFAULT_STEP,
            TOL,
        )
        .unwrap();
        assert!(report.pass, "{name} instance {s}: max rel err {}", report.max_rel_err);
    }
}

#[test]
fn matmul() {
    check_op("matmul", &[&[3, 4], &[4, 5]], |t, v, _| t.matmul(v[0], v[1]));
}

#[test]
fn add_mul_scale() {
    check_op("add", &[&[3, 4], &[3, 4]], |t, v, _| t.add(v[0], v[1]));
    check_op("mul", &[&[3, 4], &[3, 4]], |t, v, _| t.mul(v[0], v[1]));
    check_op("scale", &[&[2, 5]], |t, v, _| Ok(t.scale(v[0], -1.7)));
}

#[test]
fn add_row_bias() {
    check_op("add_row_bias", &[&[4, 3], &[3]], |t, v, _| t.add_row_bias(v[0], v[1]));
}

#[test]
fn gelu() {
    check_op("gelu", &[&[3, 6]], |t, v, _| Ok(t.gelu(v[0])));
}

#[test]
fn softmax_every_axis() {
    check_op("softmax0", &[&[4, 5]], |t, v, _| t.softmax(v[0], 0));
    check_op("softmax1", &[&[4, 5]], |t, v, _| t.softmax(v[0], 1));
    check_op("softmax_mid", &[&[2, 3, 4]], |t, v, _| t.softmax(v[0], 1));
}

#[test]
fn layer_norm() {
    check_op("layer_norm", &[&[3, 6], &[6], &[6]], |t, v, _| t.layer_norm(v[0], v[1], v[2]));
}

#[test]
fn cross_entropy() {
    check_op("cross_entropy", &[&[4, 3]], |t, v, _| t.cross_entropy(v[0], &[0, 2, 1, 2]));
}

#[test]
fn reductions_and_indexing() {
    check_op("sum", &[&[3, 3]], |t, v, _| Ok(t.sum(v[0])));
    check_op("mean", &[&[3, 3]], |t, v, _| Ok(t.mean(v[0])));
    check_op("narrow_cols", &[&[3, 7]], |t, v, _| t.narrow_cols(v[0], 2, 3));
    check_op("gather_rows", &[&[4, 3]], |t, v, _| t.gather_rows(v[0], &[3, 0, 3, 1]));
    check_op("pick", &[&[2, 3]], |t, v, _| t.pick(v[0], 4));
    check_op("reshape", &[&[2, 6]], |t, v, _| t.reshape(v[0], vec![3, 4]));
}

#[test]
fn dropout_with_fixed_mask() {
    check_op("dropout", &[&[4, 4]], |t, v, s| Ok(t.dropout(v[0], 0.3, &mut seed::rng(s, &[1]))));
}

#[test]
fn embed_tokens() {
    check_op("embed_tokens", &[&[2 * 4, 3], &[1, 3], &[5, 3]], |t, v, _| t.embed_tokens(v[0], v[1], v[2], 2));
}

#[test]
fn attention() {
    check_op("attention", &[&[2 * 5, 6], &[2 * 5, 6], &[2 * 5, 6]], |t, v, _| t.attention(v[0], v[1], v[2], 2, 3));
}

#[test]
fn composed_program() {
    check_op("composed", &[&[3, 4], &[4, 4], &[4]], |t, v, _| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.add_row_bias(h, v[2])?;
        let g = t.gelu(h);
        let both = t.mul(g, h)?;
        t.softmax(both, 1)
    });
}

fn finite_matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..6, 1usize..9).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-50.0f64..50.0, r * c)))
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one((r, c, data) in finite_matrix()) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![r, c], data).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_f32_rows_sum_to_one((r, c, data) in finite_matrix()) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![r, c], data.iter().map(|&v| v as f32).collect()).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).data().chunks(c) {
            prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_standardizes(rows in 1usize..5, scale in 1.5f64..20.0, seed_value in any::<u64>()) {
        let cols = 16;
        let mut rng = seed::rng(seed_value, &[]);
        let x = Tensor::from_fn(&[rows, cols], |_| (rng.random::<f64>() - 0.5) * scale);
        for row in x.data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            // inputs with variance far above eps only
            prop_assume!(var >= 0.1);
        }
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::full(&[cols], 1.0));
        let b = tape.constant(Tensor::zeros(&[cols]));
        let y = tape.layer_norm(xv, g, b).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() <= 1e-5);
            prop_assert!((var - 1.0).abs() <= 1e-4, "variance {}", var);
        }
    }

    #[test]
    fn gradients_add_across_terms(seed_value in any::<u64>()) {
        let mut rng = seed::rng(seed_value, &[]);
        let w0 = random(&mut rng, &[3, 3]);
        let x0 = random(&mut rng, &[2, 3]);
        // f(w) = sum(gelu(x w)), g(w) = sum(w * w)
        let run = |with_f: bool, with_g: bool| {
            let mut tape = Tape::<f64>::new();
            let w = tape.leaf(w0.clone(), true);
            let x = tape.constant(x0.clone());
            let mut terms = Vec::new();
            if with_f {
                let h = tape.matmul(x, w).unwrap();
                let h = tape.gelu(h);
                terms.push(tape.sum(h));
            }
            if with_g {
                let sq = tape.mul(w, w).unwrap();
                terms.push(tape.sum(sq));
            }
            let loss = if terms.len() == 2 { tape.add(terms[0], terms[1]).unwrap() } else { terms[0] };
            tape.backward(loss).unwrap();
            tape.grad(w).unwrap().to_vec()
        };
        let (f, g, fg) = (run(true, false), run(false, true), run(true, true));
        for i in 0..9 {
            prop_assert_eq!(fg[i], f[i] + g[i]);
        }
    }
}
