use super::*;
use crate::quantgeom::SeededStream;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

#[test]
fn identity_matmul() {
    let mut g: Graph<f64> = Graph::new();
    let eye = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let x = g.input(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
    let y = g.matmul(eye, x).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn softmax_of_equal_logits() {
    let mut g: Graph<f32> = Graph::new();
    let x = g.input(Tensor::zeros(vec![2])).unwrap();
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn cross_entropy_of_uniform_logits() {
    let mut g: Graph<f32> = Graph::new();
    let x = g.input(Tensor::zeros(vec![1, 4])).unwrap();
    let loss = g.cross_entropy_mean(x, &[2]).unwrap();
    assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-6);
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let mut g: Graph<f32> = Graph::new();
    let a = g.input(Tensor::zeros(vec![2, 3])).unwrap();
    let b = g.input(Tensor::zeros(vec![2, 3])).unwrap();
    match g.matmul(a, b) {
        Err(PmpError::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn non_finite_input_rejected() {
    let mut g: Graph<f32> = Graph::new();
    let bad = Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap();
    assert!(matches!(g.input(bad), Err(PmpError::Numeric(_))));
}

#[test]
fn quadratic_gradient() {
    let mut g: Graph<f32> = Graph::new();
    let w = g.param("w", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get("w").unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn constant_loss_gives_zero_gradients() {
    let mut g: Graph<f32> = Graph::new();
    let w = g.param("w", Tensor::full(vec![2, 2], 0.3)).unwrap();
    let _unused = g.scale(w, 2.0).unwrap();
    let c = g.input(Tensor::full(vec![3], 1.5)).unwrap();
    let loss = g.sum(c).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get("w").unwrap().data(), &[0.0; 4]);
}

#[test]
fn backward_twice_is_a_state_error() {
    let mut g: Graph<f32> = Graph::new();
    let w = g.param("w", Tensor::full(vec![2], 1.0)).unwrap();
    let loss = g.sum(w).unwrap();
    g.backward(loss).unwrap();
    assert!(matches!(g.backward(loss), Err(PmpError::State(_))));
    g.clear();
    let w = g.param("w", Tensor::full(vec![2], 1.0)).unwrap();
    let loss = g.sum(w).unwrap();
    assert!(g.backward(loss).is_ok());
}

#[test]
fn backward_requires_scalar() {
    let mut g: Graph<f32> = Graph::new();
    let w = g.param("w", Tensor::full(vec![2], 1.0)).unwrap();
    assert!(g.backward(w).is_err());
}

fn mlp_shapes() -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("w1", vec![3, 5]),
        ("b1", vec![5]),
        ("w2", vec![5, 5]),
        ("b2", vec![5]),
    ]
}

/// Two-layer GELU MLP on a fixed 4x3 input, cross-entropy on fixed targets.
fn mlp_loss<S: Scalar>(g: &mut Graph<S>, params: &[Vec<f64>]) -> Var {
    let x_data: Vec<f64> = (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect();
    let x = g.input(Tensor::from_f64(vec![4, 3], &x_data).unwrap()).unwrap();
    let vars: Vec<Var> = mlp_shapes()
        .iter()
        .zip(params)
        .map(|((name, shape), p)| g.param(name, Tensor::from_f64(shape.clone(), p).unwrap()).unwrap())
        .collect();
    let h = g.matmul(x, vars[0]).unwrap();
    let h = g.add(h, vars[1]).unwrap();
    let h = g.gelu(h).unwrap();
    let o = g.matmul(h, vars[2]).unwrap();
    let o = g.add(o, vars[3]).unwrap();
    g.cross_entropy_mean(o, &[0, 3, 1, 4]).unwrap()
}

fn eval_f64(params: &[Vec<f64>]) -> f64 {
    let mut g: Graph<f64> = Graph::new();
    let loss = mlp_loss(&mut g, params);
    g.value(loss).item()
}

#[test]
fn mlp_gradients_match_central_differences() {
    let mut s = SeededStream::new(21);
    let params: Vec<Vec<f64>> = mlp_shapes()
        .iter()
        .map(|(_, shape)| s.gaussian(shape.iter().product()))
        .collect();
    assert_eq!(params.iter().map(Vec::len).sum::<usize>(), 50);

    let mut g: Graph<f32> = Graph::new();
    let loss = mlp_loss(&mut g, &params);
    let grads = g.backward(loss).unwrap();

    let h = 1e-3;
    for (pi, (name, _)) in mlp_shapes().iter().enumerate() {
        let analytic = grads.get(name).unwrap().to_f64();
        for j in 0..params[pi].len() {
            let mut plus = params.clone();
            plus[pi][j] += h;
            let mut minus = params.clone();
            minus[pi][j] -= h;
            let fd = (eval_f64(&plus) - eval_f64(&minus)) / (2.0 * h);
            let err = (analytic[j] - fd).abs();
            let scale = analytic[j].abs().max(fd.abs());
            assert!(
                err <= 1e-4 * scale || err <= 1e-6,
                "{name}[{j}]: analytic {} vs fd {fd}",
                analytic[j]
            );
        }
    }
}

#[test]
fn backward_is_linear() {
    let mut s = SeededStream::new(4);
    let w = s.gaussian(6);
    let run = |a: f64, b: f64| {
        let mut g: Graph<f64> = Graph::new();
        let wv = g.param("w", t(&[2, 3], &w)).unwrap();
        let sq = g.mul(wv, wv).unwrap();
        let f = g.sum(sq).unwrap();
        let sm = g.softmax(wv).unwrap();
        let gg = g.cross_entropy_mean(sm, &[1, 2]).unwrap();
        let fa = g.scale(f, a).unwrap();
        let gb = g.scale(gg, b).unwrap();
        let total = g.add(fa, gb).unwrap();
        g.backward(total).unwrap().get("w").unwrap().to_f64()
    };
    let (a, b) = (0.7, -1.3);
    let combined = run(a, b);
    let f_only = run(1.0, 0.0);
    let g_only = run(0.0, 1.0);
    for i in 0..6 {
        assert!((combined[i] - (a * f_only[i] + b * g_only[i])).abs() < 1e-6);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let mut s = SeededStream::new(77);
    let params: Vec<Vec<f64>> = mlp_shapes()
        .iter()
        .map(|(_, shape)| s.gaussian(shape.iter().product()))
        .collect();
    let run = || {
        let mut g: Graph<f32> = Graph::new();
        let loss = mlp_loss(&mut g, &params);
        let v = g.value(loss).clone();
        let grads = g.backward(loss).unwrap();
        (v, grads.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn flatten_follows_layout_order() {
    let layout = FlatParamLayout::new(vec![("a".into(), vec![2]), ("b".into(), vec![1, 2])]).unwrap();
    let mut g: Graph<f32> = Graph::new();
    let a = g.param("a", Tensor::new(vec![2], vec![0.5, 1.0]).unwrap()).unwrap();
    let b = g.param("b", Tensor::new(vec![1, 2], vec![1.5, 2.0]).unwrap()).unwrap();
    let sa = g.mul(a, a).unwrap();
    let sa = g.sum(sa).unwrap();
    let sb = g.mul(b, b).unwrap();
    let sb = g.sum(sb).unwrap();
    let loss = g.add(sa, sb).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(flatten_grads(&grads, &layout).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);

    let missing = FlatParamLayout::new(vec![("a".into(), vec![2]), ("c".into(), vec![2])]).unwrap();
    match flatten_grads(&grads, &missing) {
        Err(PmpError::State(msg)) => assert!(msg.contains('c')),
        other => panic!("unexpected {other:?}"),
    }
    let reordered = FlatParamLayout::new(vec![("b".into(), vec![1, 2]), ("a".into(), vec![2])]).unwrap();
    assert!(matches!(flatten_grads(&grads, &reordered), Err(PmpError::Compatibility(_))));

    let empty = FlatParamLayout::new(Vec::new()).unwrap();
    assert_eq!(empty.d(), 0);
}

#[test]
fn slice_concat_permute_gradients() {
    // loss = sum(concat(slice(x), permute(x)) * weights); gradient checks the
    // routing of each structural op.
    let mut g: Graph<f64> = Graph::new();
    let data: Vec<f64> = (0..6).map(|i| i as f64).collect();
    let x = g.param("x", t(&[2, 3], &data)).unwrap();
    let s = g.slice(x, 1, 1, 3).unwrap(); // [2,2]
    let p = g.transpose(x, 0, 1).unwrap(); // [3,2]
    let c = g.concat(&[s, p], 0).unwrap(); // [5,2]
    let w = g.input(t(&[5, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0])).unwrap();
    let m = g.mul(c, w).unwrap();
    let loss = g.sum(m).unwrap();
    let grads = g.backward(loss).unwrap();
    // x[i][j]: slice contributes w[i][j-1] for j>=1; transpose contributes w[2+j][i]
    let expected = [
        5.0,
        1.0 + 7.0,
        2.0 + 9.0,
        6.0,
        3.0 + 8.0,
        4.0 + 10.0,
    ];
    assert_eq!(grads.get("x").unwrap().data(), &expected);
}

#[test]
fn causal_fill_blocks_future_keys() {
    let mut g: Graph<f32> = Graph::new();
    let x = g.input(Tensor::zeros(vec![4, 2])).unwrap();
    let y = g.causal_mask_fill(x, 2).unwrap();
    let m = MASKED_SCORE as f32;
    assert_eq!(g.value(y).data(), &[0.0, m, 0.0, 0.0, 0.0, m, 0.0, 0.0]);
    let p = g.softmax(y).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 0.0, 0.5, 0.5, 1.0, 0.0, 0.5, 0.5]);
}
