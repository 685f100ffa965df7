use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilestream_nn::gradcheck::check_gradients;
use tilestream_nn::{uniform, Graph, Matrix, ParamStore, Var};

const TOL: f64 = 1e-6;

fn store_with(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for &(name, r, c) in shapes {
        s.insert(name, uniform(&mut rng, r, c, 1.0));
    }
    s
}

fn assert_close<F>(store: &ParamStore, f: F)
where
    F: for<'a> Fn(&mut Graph<'a>, &'a ParamStore) -> Var,
{
    let report = check_gradients(store, 1e-6, 1e-9, f);
    assert!(
        report.max_rel_error < TOL,
        "worst {} [{}]: {}",
        report.worst_param,
        report.worst_index,
        report.max_rel_error
    );
}

// Fixed random weights so every output element feeds the scalar loss
// with a distinct coefficient.
fn weighted_sum<'a>(g: &mut Graph<'a>, x: Var, seed: u64) -> Var {
    let (r, c) = g.value(x).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let y = g.mul_const(x, w);
    g.sum(y)
}

#[test]
fn matmul_family() {
    let s = store_with(&[("a", 3, 4), ("b", 4, 2), ("c", 5, 4)], 1);
    assert_close(&s, |g, s| {
        let a = g.param(s, s.id("a").unwrap());
        let b = g.param(s, s.id("b").unwrap());
        let c = g.param(s, s.id("c").unwrap());
        let ab = g.matmul(a, b);
        let act = g.matmul_t(a, c);
        let t = g.transpose(act);
        let l1 = weighted_sum(g, ab, 2);
        let l2 = weighted_sum(g, t, 3);
        g.add(l1, l2)
    });
}

#[test]
fn elementwise_family() {
    let s = store_with(&[("x", 3, 3), ("y", 3, 3), ("row", 1, 3)], 4);
    assert_close(&s, |g, s| {
        let x = g.param(s, s.id("x").unwrap());
        let y = g.param(s, s.id("y").unwrap());
        let row = g.param(s, s.id("row").unwrap());
        let a = g.mul(x, y);
        let b = g.sub(a, y);
        let c = g.add_row(b, row);
        let d = g.mul_row(c, row);
        let e = g.sigmoid(d);
        let f = g.tanh(x);
        let h = g.elu(y);
        let k = g.exp(f);
        let sq = g.square(h);
        let pos = g.add_scalar(sq, 1.5);
        let lg = g.log(pos);
        let sc = g.scale(lg, -0.7);
        let rl = g.relu(x);
        let mn = g.minimum(e, k);
        let cl = g.clamp(y, -0.5, 0.5);
        let all = [sc, rl, mn, cl];
        let mut acc = weighted_sum(g, all[0], 10);
        for (i, &v) in all.iter().enumerate().skip(1) {
            let t = weighted_sum(g, v, 10 + i as u64);
            acc = g.add(acc, t);
        }
        acc
    });
}

#[test]
fn row_reductions_and_softmax() {
    let s = store_with(&[("x", 4, 5)], 7);
    assert_close(&s, |g, s| {
        let x = g.param(s, s.id("x").unwrap());
        let sm = g.softmax_rows(x);
        let ls = g.log_softmax_rows(x);
        let nr = g.normalize_rows(x, 1e-5);
        let rs = g.row_sums(nr);
        let pk = g.pick_per_row(ls, &[0, 3, 4, 1]);
        let a = weighted_sum(g, sm, 1);
        let b = weighted_sum(g, nr, 2);
        let c = weighted_sum(g, rs, 3);
        let d = g.mean(pk);
        let ab = g.add(a, b);
        let cd = g.add(c, d);
        g.add(ab, cd)
    });
}

#[test]
fn reshaping_family() {
    let s = store_with(&[("x", 3, 4), ("y", 2, 4)], 9);
    assert_close(&s, |g, s| {
        let x = g.param(s, s.id("x").unwrap());
        let y = g.param(s, s.id("y").unwrap());
        let rows = g.concat_rows(&[x, y, x]);
        let cols = g.concat_cols(&[x, x]);
        let sc = g.slice_cols(cols, 2, 5);
        let sr = g.slice_rows(rows, 1, 3);
        let a = weighted_sum(g, sc, 1);
        let b = weighted_sum(g, sr, 2);
        g.add(a, b)
    });
}

#[test]
fn convolution_and_pooling() {
    let s = store_with(&[("x", 7, 3), ("w", 9, 2)], 11);
    assert_close(&s, |g, s| {
        let x = g.param(s, s.id("x").unwrap());
        let w = g.param(s, s.id("w").unwrap());
        let cols = g.im2col(x, 3, 1, 1);
        let conv = g.matmul(cols, w);
        let pooled = g.max_pool_rows(conv, 3, 2, 1);
        let strided = g.im2col(x, 2, 2, 0);
        let a = weighted_sum(g, pooled, 1);
        let b = weighted_sum(g, strided, 2);
        g.add(a, b)
    });
}

#[test]
fn wrap_difference_passes_gradient_through() {
    let s = store_with(&[("x", 2, 2)], 13);
    let target = Matrix::new(2, 2, vec![0.9, -0.8, 0.1, 0.2]);
    assert_close(&s, |g, s| {
        let x = g.param(s, s.id("x").unwrap());
        let d = g.wrap_diff(x, &target, &[2.0, 3.0]);
        let sq = g.square(d);
        g.sum(sq)
    });
}

#[test]
fn shared_parameter_uses_accumulate() {
    let mut s = ParamStore::new();
    s.insert("w", Matrix::row_vector(&[2.0]));
    let id = s.id("w").unwrap();
    let mut g = Graph::new();
    let a = g.param(&s, id);
    let b = g.param(&s, id);
    assert_eq!(a, b);
    let y = g.mul(a, b);
    let grads = g.backward(y);
    assert_eq!(g.param_grads(&grads, &s)[0].get(0, 0), 4.0);
}

#[test]
fn im2col_layout_matches_hand_unfold() {
    let mut g = Graph::new();
    let x = g.leaf(Matrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let c = g.im2col(x, 3, 1, 1);
    let expect = Matrix::new(
        3,
        6,
        vec![
            0.0, 0.0, 1.0, 2.0, 3.0, 4.0, //
            1.0, 2.0, 3.0, 4.0, 5.0, 6.0, //
            3.0, 4.0, 5.0, 6.0, 0.0, 0.0,
        ],
    );
    assert_eq!(g.value(c), &expect);
}
