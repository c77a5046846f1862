//! Finite-difference checks of every engine primitive in f64.

use polynet::tensor::{
    backward, finite_diff_grad, forward, max_relative_error, relative_error, softmax_cross_entropy, Graph,
    Mode, Op, ParamRef, ParamStore, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

fn loss_of(graph: &Graph, params: &ParamStore<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let (y, _) = forward(graph, params, x, Mode::Train).unwrap();
    let flat = y.clone().reshape(&[y.batch(), y.len() / y.batch()]).unwrap();
    softmax_cross_entropy(&flat, labels).unwrap().0
}

fn check(graph: &Graph, params: &ParamStore<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let (y, tape) = forward(graph, params, x, Mode::Train).unwrap();
    let flat = y.clone().reshape(&[y.batch(), y.len() / y.batch()]).unwrap();
    let (_, dy) = softmax_cross_entropy(&flat, labels).unwrap();
    let grads = backward(&tape, &dy.reshape(y.shape()).unwrap()).unwrap();
    let numeric = finite_diff_grad(params, 1e-5, |p| loss_of(graph, p, x, labels));
    let (param_err, _) = max_relative_error(&grads.params, &numeric);

    // input gradient by the same scheme
    let mut num_in = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut up = x.clone();
        up.data_mut()[i] += 1e-5;
        let mut dn = x.clone();
        dn.data_mut()[i] -= 1e-5;
        num_in[i] = (loss_of(graph, params, &up, labels) - loss_of(graph, params, &dn, labels)) / 2e-5;
    }
    param_err.max(relative_error(grads.input.data(), &num_in))
}

fn dense_params(p: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, key: &str, layer: &str, i: usize, o: usize) {
    p.insert(key, &format!("{layer}.w"), random(rng, &[o, i], 0.8), true);
    p.insert(key, &format!("{layer}.b"), random(rng, &[o], 0.3), true);
}

fn conv_params(p: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, key: &str, layer: &str, i: usize, o: usize, k: usize) {
    p.insert(key, &format!("{layer}.w"), random(rng, &[o, i, k, k], 0.5), true);
    p.insert(key, &format!("{layer}.b"), random(rng, &[o], 0.3), true);
}

fn norm_params(p: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, key: &str, c: usize) {
    let gamma: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
    p.insert(key, "norm.gamma", Tensor::from_f64(&[c], &gamma).unwrap(), true);
    p.insert(key, "norm.beta", random(rng, &[c], 0.3), true);
    p.insert(key, "norm.running_mean", Tensor::zeros(&[c]), false);
    p.insert(key, "norm.running_var", Tensor::full(&[c], 1.0), false);
}

#[test]
fn dense_relu_add_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new(&[5]);
    let a = g.push(Op::Dense { param: ParamRef::new("F", "l1"), inputs: 5, outputs: 6 }, &[Graph::INPUT]);
    let r = g.push(Op::Relu, &[a]);
    let b = g.push(Op::Dense { param: ParamRef::new("F", "l2"), inputs: 6, outputs: 5 }, &[r]);
    let s = g.push(Op::Scale(0.3), &[b]);
    let sum = g.push(Op::Add, &[Graph::INPUT, s, s]);
    g.push(Op::Dense { param: ParamRef::new("head", "fc"), inputs: 5, outputs: 3 }, &[sum]);
    let mut p = ParamStore::new();
    dense_params(&mut p, &mut rng, "F", "l1", 5, 6);
    dense_params(&mut p, &mut rng, "F", "l2", 6, 5);
    dense_params(&mut p, &mut rng, "head", "fc", 5, 3);
    let x = random(&mut rng, &[4, 5], 1.0);
    let err = check(&g, &p, &x, &[0, 1, 2, 1]);
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn shared_block_applied_twice_sums_contributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new(&[4]);
    let f1 = g.push(Op::Dense { param: ParamRef::new("F", "l1"), inputs: 4, outputs: 4 }, &[Graph::INPUT]);
    let r1 = g.push(Op::Relu, &[f1]);
    let f2 = g.push(Op::Dense { param: ParamRef::new("F", "l1"), inputs: 4, outputs: 4 }, &[r1]);
    let r2 = g.push(Op::Relu, &[f2]);
    let sum = g.push(Op::Add, &[Graph::INPUT, r1, r2]);
    g.push(Op::Dense { param: ParamRef::new("head", "fc"), inputs: 4, outputs: 3 }, &[sum]);
    let mut p = ParamStore::new();
    dense_params(&mut p, &mut rng, "F", "l1", 4, 4);
    dense_params(&mut p, &mut rng, "head", "fc", 4, 3);
    let x = random(&mut rng, &[3, 4], 1.0);
    let err = check(&g, &p, &x, &[0, 2, 1]);
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn conv_kernels_and_strides() {
    for (k, s) in [(1, 1), (3, 1), (3, 2), (1, 2)] {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + k as u64 * 3 + s as u64);
        let mut g = Graph::new(&[2, 5, 6]);
        let c = g.push(
            Op::Conv2d { param: ParamRef::new("C", "conv"), in_ch: 2, out_ch: 3, kernel: k, stride: s },
            &[Graph::INPUT],
        );
        let pool = g.push(Op::GlobalAvgPool, &[c]);
        g.push(Op::Dense { param: ParamRef::new("head", "fc"), inputs: 3, outputs: 3 }, &[pool]);
        let mut p = ParamStore::new();
        conv_params(&mut p, &mut rng, "C", "conv", 2, 3, k);
        dense_params(&mut p, &mut rng, "head", "fc", 3, 3);
        let x = random(&mut rng, &[2, 2, 5, 6], 1.0);
        let err = check(&g, &p, &x, &[1, 2]);
        assert!(err < 1e-6, "k{k} s{s}: relative error {err}");
    }
}

#[test]
fn channel_norm_on_images_and_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new(&[3, 4, 4]);
    let n = g.push(Op::ChannelNorm { param: ParamRef::new("N", "norm"), channels: 3 }, &[Graph::INPUT]);
    let r = g.push(Op::Relu, &[n]);
    let pool = g.push(Op::GlobalAvgPool, &[r]);
    g.push(Op::Dense { param: ParamRef::new("head", "fc"), inputs: 3, outputs: 2 }, &[pool]);
    let mut p = ParamStore::new();
    norm_params(&mut p, &mut rng, "N", 3);
    dense_params(&mut p, &mut rng, "head", "fc", 3, 2);
    let x = random(&mut rng, &[3, 3, 4, 4], 2.0);
    let err = check(&g, &p, &x, &[0, 1, 1]);
    assert!(err < 1e-6, "relative error {err}");

    let mut g = Graph::new(&[4]);
    let n = g.push(Op::ChannelNorm { param: ParamRef::new("N", "norm"), channels: 4 }, &[Graph::INPUT]);
    g.push(Op::Dense { param: ParamRef::new("head", "fc"), inputs: 4, outputs: 3 }, &[n]);
    let mut p = ParamStore::new();
    norm_params(&mut p, &mut rng, "N", 4);
    dense_params(&mut p, &mut rng, "head", "fc", 4, 3);
    let x = random(&mut rng, &[5, 4], 2.0);
    let err = check(&g, &p, &x, &[0, 1, 2, 0, 1]);
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn gate_scales_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new(&[4]);
    let f = g.push(Op::Dense { param: ParamRef::new("F", "l1"), inputs: 4, outputs: 4 }, &[Graph::INPUT]);
    let gate = g.push(Op::Gate { module: 0, slot: 0, eval_scale: 0.5 }, &[f]);
    let sum = g.push(Op::Add, &[Graph::INPUT, gate]);
    g.push(Op::Dense { param: ParamRef::new("head", "fc"), inputs: 4, outputs: 3 }, &[sum]);
    let mut p = ParamStore::new();
    dense_params(&mut p, &mut rng, "F", "l1", 4, 4);
    dense_params(&mut p, &mut rng, "head", "fc", 4, 3);
    let x = random(&mut rng, &[2, 4], 1.0);
    let gates = vec![vec![0.0]];
    let (y, tape) = polynet::tensor::forward_gated(&g, &p, &x, Mode::Train, Some(&gates)).unwrap();
    let (_, dy) = softmax_cross_entropy(&y, &[0, 1]).unwrap();
    let grads = backward(&tape, &dy).unwrap();
    assert!(grads.params.get("F", "l1.w").unwrap().data().iter().all(|&v| v == 0.0));
}
