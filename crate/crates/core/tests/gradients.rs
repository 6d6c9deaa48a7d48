use proptest::prelude::*;
use pushbroom::autodiff::{Graph, Var};
use pushbroom::gradcheck::check;
use pushbroom::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

/// `sum(v * r)` with a fixed random `r`, so that gradients are not
/// degenerate for ops whose plain sum is constant (softmax, layernorm).
fn weighted(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let r = rand_t(g.shape(v), seed ^ 0x5eed);
    let r = g.constant(r)?;
    let p = g.mul(v, r)?;
    g.sum(p)
}

fn assert_grad<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = check(inputs, f, H, None).unwrap();
    assert!(
        report.max_rel_err <= TOL,
        "{name}: max rel err {:.3e} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn elementwise_binary_with_broadcast() {
    let a = rand_t(&[2, 3, 4], 1);
    let b = rand_t(&[4], 2);
    let c = rand_t(&[2, 1, 4], 3);
    assert_grad("add", &[a.clone(), b.clone()], |g, v| {
        let o = g.add(v[0], v[1])?;
        weighted(g, o, 10)
    });
    assert_grad("sub", &[a.clone(), c.clone()], |g, v| {
        let o = g.sub(v[0], v[1])?;
        weighted(g, o, 11)
    });
    assert_grad("mul", &[a.clone(), c], |g, v| {
        let o = g.mul(v[0], v[1])?;
        weighted(g, o, 12)
    });
    assert_grad("mul suffix", &[a, b], |g, v| {
        let o = g.mul(v[0], v[1])?;
        weighted(g, o, 13)
    });
}

#[test]
fn elementwise_unary() {
    let x = rand_t(&[3, 5], 4);
    type Unary = fn(&mut Graph, Var) -> Result<Var>;
    let ops: [(&str, Unary); 7] = [
        ("exp", |g, v| g.exp(v)),
        ("silu", |g, v| g.silu(v)),
        ("sigmoid", |g, v| g.sigmoid(v)),
        ("softplus", |g, v| g.softplus(v)),
        ("tanh", |g, v| g.tanh(v)),
        ("scale", |g, v| g.scale(v, -2.5)),
        ("neg", |g, v| g.neg(v)),
    ];
    for (name, op) in ops {
        assert_grad(name, std::slice::from_ref(&x), |g, v| {
            let o = op(g, v[0])?;
            weighted(g, o, 20)
        });
    }
    // Keep relu probes away from the kink.
    let away = x.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    assert_grad("relu", &[away], |g, v| {
        let o = g.relu(v[0])?;
        weighted(g, o, 21)
    });
}

#[test]
fn matrix_products() {
    assert_grad("matmul", &[rand_t(&[2, 3, 4], 5), rand_t(&[4, 5], 6)], |g, v| {
        let o = g.matmul(v[0], v[1])?;
        weighted(g, o, 30)
    });
    assert_grad("bmm", &[rand_t(&[3, 2, 4], 7), rand_t(&[3, 4, 2], 8)], |g, v| {
        let o = g.bmm(v[0], v[1])?;
        weighted(g, o, 31)
    });
    assert_grad("transpose", &[rand_t(&[2, 3, 4], 9)], |g, v| {
        let o = g.transpose_last2(v[0])?;
        weighted(g, o, 32)
    });
}

#[test]
fn convolutions() {
    let x = rand_t(&[2, 7, 4], 40);
    assert_grad("conv1d same", &[x.clone(), rand_t(&[3, 4, 3], 41)], |g, v| {
        let o = g.conv1d(v[0], v[1], 1, 1, 1, 1)?;
        weighted(g, o, 42)
    });
    assert_grad("conv1d stride 2", &[x.clone(), rand_t(&[5, 4, 2], 43)], |g, v| {
        let o = g.conv1d(v[0], v[1], 2, 0, 1, 1)?;
        weighted(g, o, 44)
    });
    assert_grad("conv1d depthwise", &[x.clone(), rand_t(&[4, 1, 3], 45)], |g, v| {
        let o = g.conv1d(v[0], v[1], 1, 1, 1, 4)?;
        weighted(g, o, 46)
    });
    assert_grad("conv1d grouped", &[x.clone(), rand_t(&[6, 2, 3], 47)], |g, v| {
        let o = g.conv1d(v[0], v[1], 1, 1, 1, 2)?;
        weighted(g, o, 48)
    });
    assert_grad("conv_transpose1d", &[x, rand_t(&[4, 3, 2], 49)], |g, v| {
        let o = g.conv_transpose1d(v[0], v[1], 2)?;
        weighted(g, o, 50)
    });
}

#[test]
fn normalizations_and_reductions() {
    let x = rand_t(&[2, 3, 5], 60);
    assert_grad("softmax", std::slice::from_ref(&x), |g, v| {
        let o = g.softmax(v[0])?;
        weighted(g, o, 61)
    });
    assert_grad("layernorm", std::slice::from_ref(&x), |g, v| {
        let o = g.layernorm(v[0])?;
        weighted(g, o, 62)
    });
    assert_grad("mean", std::slice::from_ref(&x), |g, v| {
        let o = g.mul(v[0], v[0])?;
        g.mean(o)
    });
    for axis in 0..3 {
        assert_grad("mean_axis", std::slice::from_ref(&x), |g, v| {
            let o = g.mean_axis(v[0], axis)?;
            weighted(g, o, 63)
        });
        assert_grad("variance_axis", std::slice::from_ref(&x), |g, v| {
            let o = g.variance_axis(v[0], axis)?;
            weighted(g, o, 64)
        });
        assert_grad("max_axis", std::slice::from_ref(&x), |g, v| {
            let o = g.max_axis(v[0], axis)?;
            weighted(g, o, 65)
        });
    }
}

#[test]
fn structural_ops() {
    let x = rand_t(&[2, 4, 3], 70);
    let y = rand_t(&[2, 2, 3], 71);
    assert_grad("slice", std::slice::from_ref(&x), |g, v| {
        let o = g.slice(v[0], 1, 1, 2)?;
        weighted(g, o, 72)
    });
    assert_grad("concat", &[x.clone(), y], |g, v| {
        let o = g.concat(&[v[0], v[1]], 1)?;
        weighted(g, o, 73)
    });
    assert_grad("pad", std::slice::from_ref(&x), |g, v| {
        let o = g.pad(v[0], 1, 2, 1)?;
        weighted(g, o, 74)
    });
    assert_grad("reshape", &[x], |g, v| {
        let o = g.reshape(v[0], &[8, 3])?;
        weighted(g, o, 75)
    });
}

#[test]
fn line_recurrences() {
    let (l, n, c, s) = (4, 3, 2, 3);
    let hist = rand_t(&[2, n, c], 80);
    assert_grad("causal_conv_lines", &[rand_t(&[l, n, c], 81), rand_t(&[c, 3], 82)], |g, v| {
        let o = g.causal_conv_lines(v[0], v[1], &hist)?;
        weighted(g, o, 83)
    });

    let h0 = rand_t(&[n, c, s], 84);
    let dt = rand_t(&[l, n, c], 85).map(|v| 0.3 + 0.2 * v);
    let a = rand_t(&[c, s], 86).map(|v| -1.0 - v.abs());
    let inputs = [
        rand_t(&[l, n, c], 87),
        dt,
        a,
        rand_t(&[l, n, s], 88),
        rand_t(&[l, n, s], 89),
        rand_t(&[c], 90),
    ];
    assert_grad("selective_scan", &inputs, |g, v| {
        let (o, _) = g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], &h0)?;
        weighted(g, o, 91)
    });
    // The sum-of-outputs form over 4 lines x 3 pixels x 2 channels.
    assert_grad("selective_scan sum", &inputs, |g, v| {
        let (o, _) = g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], &h0)?;
        g.sum(o)
    });
}

#[test]
fn silu_sum_gradient_at_zero_is_one_half() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[5])).unwrap();
    let y = g.silu(x).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    for &d in grads.get(x).data() {
        assert!((d - 0.5).abs() < 1e-12);
    }
    // Finite-difference agreement at the stated step.
    let report = check(
        &[Tensor::zeros(&[5])],
        |g, v| {
            let y = g.silu(v[0])?;
            g.sum(y)
        },
        1e-5,
        None,
    )
    .unwrap();
    let (_, _, a, n) = report.worst.unwrap();
    assert!((a - n).abs() < 1e-6);
}

#[test]
fn layernorm_gradient_on_1x8x4() {
    assert_grad("layernorm 1x8x4", &[rand_t(&[1, 8, 4], 100)], |g, v| {
        let o = g.layernorm(v[0])?;
        weighted(g, o, 101)
    });
}

#[test]
fn repeated_backward_is_bitwise_identical() {
    let mut g = Graph::new();
    let x = g.param(rand_t(&[3, 4], 110)).unwrap();
    let w = g.param(rand_t(&[4, 2], 111)).unwrap();
    let y = g.matmul(x, w).unwrap();
    let y = g.softmax(y).unwrap();
    let loss = weighted(&mut g, y, 112).unwrap();
    let a = g.backward(loss).unwrap();
    let b = g.backward(loss).unwrap();
    assert!(a.get(x).bitwise_eq(&b.get(x)));
    assert!(a.get(w).bitwise_eq(&b.get(w)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_are_shift_invariant(
        rows in 1usize..5, cols in 1usize..8, seed in any::<u64>(), shift in -50.0f64..50.0
    ) {
        let x = rand_t(&[rows, cols], seed).map(|v| 10.0 * v);
        let mut g = Graph::new();
        let a = g.constant(x.clone()).unwrap();
        let sa = g.softmax(a).unwrap();
        let b = g.constant(x.map(|v| v + shift)).unwrap();
        let sb = g.softmax(b).unwrap();
        let (pa, pb) = (g.value(sa).clone(), g.value(sb).clone());
        for r in 0..rows {
            let row = &pa.data()[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        prop_assert!(pa.max_abs_diff(&pb) <= 1e-10);
    }

    #[test]
    fn elementwise_ops_commute_with_reshape(seed in any::<u64>(), op in 0usize..6) {
        let x = rand_t(&[2, 3, 4], seed);
        let mut g = Graph::new();
        let a = g.constant(x.clone()).unwrap();
        let r = g.reshape(a, &[6, 4]).unwrap();
        let apply = |g: &mut Graph, v: Var| match op {
            0 => g.exp(v),
            1 => g.silu(v),
            2 => g.sigmoid(v),
            3 => g.softplus(v),
            4 => g.tanh(v),
            _ => g.relu(v),
        };
        let p1 = apply(&mut g, r).unwrap();
        let p0 = apply(&mut g, a).unwrap();
        let p0r = g.reshape(p0, &[6, 4]).unwrap();
        prop_assert!(g.value(p1).bitwise_eq(g.value(p0r)));
    }

    #[test]
    fn random_small_matmul_conv_gradients(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let report = check(&[rand_t(&[m, k], seed), rand_t(&[k, n], seed + 1)], |g, v| {
            let o = g.matmul(v[0], v[1])?;
            weighted(g, o, seed)
        }, H, None).unwrap();
        prop_assert!(report.max_rel_err <= TOL);
        let len = m + 3;
        let report = check(&[rand_t(&[1, len, k], seed), rand_t(&[n, k, 3], seed + 2)], |g, v| {
            let o = g.conv1d(v[0], v[1], 1, 1, 1, 1)?;
            weighted(g, o, seed)
        }, H, None).unwrap();
        prop_assert!(report.max_rel_err <= TOL);
    }
}
