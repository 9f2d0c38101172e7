//! Every differentiable op against central finite differences (h = 1e-5).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vb_tensor::*;

const TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn check(name: &str, params: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let report = GradCheck::default().run(params, build).unwrap();
    println!(
        "{name}: max rel err {:.3e} over {} elements",
        report.max_rel_err, report.checked
    );
    assert!(report.passes(TOL), "{name}: {report:?}");
    assert!(report.checked > 0);
}

#[test]
fn conv3d_gradient() {
    let x = rand_tensor(&[2, 2, 4, 4, 4], 1);
    let k = rand_tensor(&[3, 2, 3, 3, 3], 2);
    let b = rand_tensor(&[3], 3);
    let w = rand_tensor(&[2, 3, 2, 2, 2], 4);
    for imp in [ConvImpl::Reference, ConvImpl::Blocked] {
        let report = GradCheck::default()
            .with_conv_impl(imp)
            .run(&[x.clone(), k.clone(), b.clone()], |g, v| {
                let y = g.conv3d(v[0], v[1], Some(v[2]), 2, 1)?;
                let wv = g.constant(w.clone());
                let weighted = g.add(y, wv)?;
                Ok(g.sum_squares(weighted))
            })
            .unwrap();
        println!("conv3d {imp:?}: max rel err {:.3e}", report.max_rel_err);
        assert!(report.passes(TOL), "{imp:?}: {report:?}");
    }
}

#[test]
fn conv3d_paths_agree_at_graph_level() {
    let x = rand_tensor(&[2, 3, 7, 6, 5], 5);
    let k = rand_tensor(&[4, 3, 3, 3, 3], 6);
    let b = rand_tensor(&[4], 7);
    let run = |imp: ConvImpl| {
        let mut g = Graph::with_conv_impl(imp);
        let xv = g.param(x.clone());
        let kv = g.param(k.clone());
        let bv = g.param(b.clone());
        let y = g.conv3d(xv, kv, Some(bv), 2, 1).unwrap();
        let s = g.sum_squares(y);
        g.backward(s).unwrap();
        (
            g.value(y).clone(),
            g.grad(xv).unwrap().to_vec(),
            g.grad(kv).unwrap().to_vec(),
        )
    };
    let (ya, gxa, gka) = run(ConvImpl::Reference);
    let (yb, gxb, gkb) = run(ConvImpl::Blocked);
    let max_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(max_diff(ya.data(), yb.data()) < 1e-10);
    assert!(max_diff(&gxa, &gxb) < 1e-10);
    assert!(max_diff(&gka, &gkb) < 1e-10);
}

#[test]
fn linear_relu_sigmoid_gradients() {
    let x = rand_tensor(&[3, 5], 10);
    let w = rand_tensor(&[4, 5], 11);
    let b = rand_tensor(&[4], 12);
    check("linear", &[x.clone(), w.clone(), b.clone()], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        Ok(g.sum_squares(y))
    });
    check("relu", &[x.clone()], |g, v| {
        let y = g.relu(v[0]);
        let y = g.scale(y, 1.5);
        Ok(g.sum_squares(y))
    });
    check("sigmoid", &[x.clone()], |g, v| {
        let y = g.sigmoid(v[0]);
        Ok(g.sum_squares(y))
    });
}

#[test]
fn softmax_and_cross_entropy_gradients() {
    let l = rand_tensor(&[3, 4], 20);
    check("softmax", &[l.clone()], |g, v| {
        let p = g.softmax(v[0])?;
        let w = g.constant(rand_tensor(&[3, 4], 21));
        let q = g.add(p, w)?;
        Ok(g.sum_squares(q))
    });
    for eps in [0.0, 0.05] {
        check("cross_entropy_smoothed", &[l.clone()], |g, v| {
            g.cross_entropy_smoothed(v[0], &[1, 3, 0], eps)
        });
    }
    check("bce_with_logits", &[rand_tensor(&[6, 1], 22)], |g, v| {
        g.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0])
    });
}

#[test]
fn pooling_and_gate_gradients() {
    let f = rand_tensor(&[2, 3, 2, 3, 2], 30);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let m = Tensor::from_fn(&[2, 2, 3, 2], |_| rng.random_range(0.0..1.0));
    check("gap", &[f.clone()], |g, v| {
        let p = g.gap(v[0])?;
        Ok(g.sum_squares(p))
    });
    check("masked_avg_pool", &[f.clone(), m.clone()], |g, v| {
        let z = g.masked_avg_pool(v[0], v[1], 1e-6)?;
        Ok(g.sum_squares(z))
    });
    let z = rand_tensor(&[2, 3], 32);
    let gate = [
        rand_tensor(&[2, 3], 33),
        rand_tensor(&[2], 34),
        rand_tensor(&[3, 2], 35),
        rand_tensor(&[3], 36),
    ];
    let mut params = vec![f.clone(), z];
    params.extend(gate);
    check("channel_gate", &params, |g, v| {
        let gv = GateVars {
            w1: v[2],
            b1: v[3],
            w2: v[4],
            b2: v[5],
        };
        let (w, att) = g.channel_gate(v[0], v[1], &gv)?;
        let a = g.sum_squares(att);
        let b = g.sum(w);
        g.add(a, b)
    });
    check("channel_scale", &[f.clone(), rand_tensor(&[2, 3], 37)], |g, v| {
        let y = g.channel_scale(v[0], v[1])?;
        Ok(g.sum_squares(y))
    });
    check(
        "concat",
        &[rand_tensor(&[2, 3], 38), rand_tensor(&[2, 2], 39)],
        |g, v| {
            let c = g.concat(v[0], v[1])?;
            let w = g.constant(rand_tensor(&[1, 5], 40));
            let y = g.linear(c, w, None)?;
            Ok(g.sum_squares(y))
        },
    );
}

#[test]
fn dropout_paths_gradients() {
    let x = rand_tensor(&[2, 6], 50);
    check("dropout (inference)", &[x.clone()], |g, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = g.dropout(v[0], 0.2, false, &mut rng)?;
        Ok(g.sum_squares(y))
    });
    check("dropout (training, fixed stream)", &[x.clone()], |g, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let y = g.dropout(v[0], 0.2, true, &mut rng)?;
        Ok(g.sum_squares(y))
    });
}

#[test]
fn sum_of_squares_gradient_is_exact() {
    let x = rand_tensor(&[7], 60);
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let s = g.sum_squares(v);
    g.backward(s).unwrap();
    assert_eq!(
        g.grad(v).unwrap(),
        x.data().iter().map(|v| 2.0 * v).collect::<Vec<_>>().as_slice()
    );
}

#[test]
fn composed_conv_graph_passes_grad_check() {
    // conv3d → relu → gap → linear → softmax-CE
    let x = rand_tensor(&[1, 1, 6, 6, 6], 70);
    let k = rand_tensor(&[4, 1, 3, 3, 3], 71);
    let kb = rand_tensor(&[4], 72);
    let w = rand_tensor(&[3, 4], 73);
    let b = rand_tensor(&[3], 74);
    check("composed", &[x, k, kb, w, b], |g, v| {
        let y = g.conv3d(v[0], v[1], Some(v[2]), 1, 1)?;
        let y = g.relu(y);
        let p = g.gap(y)?;
        let l = g.linear(p, v[3], Some(v[4]))?;
        g.cross_entropy_smoothed(l, &[2], 0.05)
    });
}

#[test]
fn pick_and_seeded_backward() {
    let x = rand_tensor(&[2, 3], 80);
    check("pick", &[x.clone()], |g, v| {
        let y = g.sigmoid(v[0]);
        g.pick(y, 4)
    });
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let y = g.scale(v, 3.0);
    g.backward_with_seed(y, Tensor::filled(&[2, 3], 2.0)).unwrap();
    assert!(g.grad(v).unwrap().iter().all(|&d| d == 6.0));
}
