//! Finite-difference checks of every tape primitive and of a small MLP.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mole::tensor::{finite_diff_gradcheck, GradcheckReport, Tape, Tensor, Var, DEFAULT_STEP};
use mole::Result;

type Params = Vec<(String, Tensor<f64>)>;

/// Gradchecks `build`, which maps the recorded leaves to a scalar loss.
fn check<F>(params: Params, build: F) -> GradcheckReport
where
    F: Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let run = |ps: &[(String, Tensor<f64>)], tape: &mut Tape<f64>| {
        let vars: Vec<Var<f64>> = ps.iter().map(|(n, t)| tape.param(n, t)).collect();
        build(tape, &vars)
    };
    let mut tape = Tape::new();
    let loss = run(&params, &mut tape).unwrap();
    let grads = tape.backward(&loss).unwrap();
    let with_grads: Params = params
        .into_iter()
        .map(|(n, mut t)| {
            t.set_grad(grads.get(&n).expect("leaf gradient").to_vec())
                .unwrap();
            (n, t)
        })
        .collect();
    finite_diff_gradcheck(
        |ps| {
            let mut tape = Tape::inference();
            Ok(run(ps, &mut tape)?.value().data()[0])
        },
        &with_grads,
        DEFAULT_STEP,
    )
    .unwrap()
}

fn leaf(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> (String, Tensor<f64>) {
    (
        name.to_string(),
        Tensor::randn(shape.to_vec(), 1.0, rng).with_requires_grad(),
    )
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output entry matters
/// differently.
fn contract(tape: &mut Tape<f64>, out: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::randn(out.shape().to_vec(), 1.0, &mut rng));
    let p = tape.mul(out, &w)?;
    Ok(tape.sum(&p))
}

fn assert_ok(report: &GradcheckReport, min_entries: usize) {
    assert!(
        report.entries_checked >= min_entries,
        "only {} entries checked",
        report.entries_checked
    );
    assert!(report.max_error() <= 1e-6, "{:?}", report.per_param);
}

#[test]
fn matmul_and_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = vec![leaf("x", &[8, 12], &mut rng), leaf("w", &[9, 12], &mut rng)];
    let r = check(params, |tape, v| {
        let wt = tape.transpose(&v[1])?;
        let y = tape.matmul(&v[0], &wt)?;
        contract(tape, &y, 10)
    });
    assert_ok(&r, 200);
}

#[test]
fn broadcast_add_sub_and_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = vec![
        leaf("x", &[10, 11], &mut rng),
        leaf("bias", &[11], &mut rng),
        leaf("y", &[10, 11], &mut rng),
    ];
    let r = check(params, |tape, v| {
        let a = tape.add(&v[0], &v[1])?;
        let b = tape.sub(&a, &v[2])?;
        let c = tape.scale(&b, -1.7);
        contract(tape, &c, 11)
    });
    assert_ok(&r, 200);
}

#[test]
fn elementwise_and_column_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = vec![
        leaf("x", &[12, 9], &mut rng),
        leaf("y", &[12, 9], &mut rng),
        leaf("col", &[12, 1], &mut rng),
    ];
    let r = check(params, |tape, v| {
        let p = tape.mul(&v[0], &v[1])?;
        let q = tape.mul(&p, &v[2])?;
        contract(tape, &q, 12)
    });
    assert_ok(&r, 200);
}

#[test]
fn scalar_times_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = vec![leaf("x", &[10, 10], &mut rng), leaf("g", &[1], &mut rng)];
    let r = check(params, |tape, v| {
        let y = tape.mul(&v[0], &v[1])?;
        contract(tape, &y, 13)
    });
    assert_ok(&r, 100);
}

#[test]
fn sigmoid_and_silu() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = vec![leaf("x", &[10, 12], &mut rng)];
    let r = check(params, |tape, v| {
        let s = tape.sigmoid(&v[0]);
        let u = tape.silu(&v[0]);
        let y = tape.add(&s, &u)?;
        contract(tape, &y, 14)
    });
    assert_ok(&r, 120);
}

#[test]
fn pooling_reshape_column_and_select() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = vec![leaf("x", &[16, 8], &mut rng)];
    let r = check(params, |tape, v| {
        let pooled = tape.mean_pool_tokens(&v[0])?;
        let row = tape.reshape(&pooled, [1, 8])?;
        let col = tape.column(&v[0], 3)?;
        let s = tape.select(&pooled, 5)?;
        let a = contract(tape, &row, 15)?;
        let b = contract(tape, &col, 16)?;
        let c = tape.mul(&s, &s)?;
        let ab = tape.add(&a, &b)?;
        let total = tape.add(&ab, &c)?;
        Ok(tape.mean(&total))
    });
    assert_ok(&r, 128);
}

#[test]
fn two_layer_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn([6, 10], 1.0, &mut rng);
    let params = vec![
        leaf("w1", &[10, 12], &mut rng),
        leaf("b1", &[12], &mut rng),
        leaf("w2", &[12, 5], &mut rng),
        leaf("b2", &[5], &mut rng),
    ];
    let r = check(params, move |tape, v| {
        let x = tape.constant(x.clone());
        let h = tape.matmul(&x, &v[0])?;
        let h = tape.add(&h, &v[1])?;
        let h = tape.silu(&h);
        let y = tape.matmul(&h, &v[2])?;
        let y = tape.add(&y, &v[3])?;
        let sq = tape.mul(&y, &y)?;
        Ok(tape.mean(&sq))
    });
    assert_ok(&r, 100);
}
