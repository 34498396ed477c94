use super::*;

fn store_with(shapes: &[(&str, usize, usize)], seed: u64) -> (ParamStore, Vec<ParamId>) {
    let mut s = ParamStore::new(seed);
    let ids = shapes
        .iter()
        .map(|(n, r, c)| s.add(*n, *r, *c, Init::Uniform(1.0)))
        .collect();
    (s, ids)
}

fn check(store: &mut ParamStore, build: impl Fn(&mut Graph) -> Var) -> GradCheckReport {
    let report = grad_check(store, build, 1e-6, 12, 3);
    assert!(
        report.max_rel_err < 1e-6,
        "worst {} [{}]: analytic {} numeric {} (rel {})",
        report.worst_param,
        report.worst_coord,
        report.analytic,
        report.numeric,
        report.max_rel_err
    );
    report
}

#[test]
fn matmul_family_gradients() {
    let (mut s, ids) = store_with(&[("a", 3, 4), ("b", 4, 5), ("c", 6, 4)], 1);
    check(&mut s, |g| {
        let a = g.param(ids[0]);
        let b = g.param(ids[1]);
        let c = g.param(ids[2]);
        let ab = g.matmul(a, b);
        let act = g.tanh(ab);
        let nt = g.matmul_nt(a, c);
        let t = g.gelu(nt);
        let x = g.sum(act);
        let y = g.sum(t);
        let z = g.mul(x, y);
        g.scale(z, 0.5)
    });
}

#[test]
fn normalization_and_softmax_gradients() {
    let (mut s, ids) = store_with(&[("x", 4, 6), ("gamma", 1, 6), ("beta", 1, 6), ("w", 6, 6)], 2);
    check(&mut s, |g| {
        let x = g.param(ids[0]);
        let gamma = g.param(ids[1]);
        let beta = g.param(ids[2]);
        let w = g.param(ids[3]);
        let ln = g.layer_norm(x, gamma, beta);
        let h = g.matmul(ln, w);
        let p = g.softmax_rows(h);
        let e = g.elu(h);
        let m = g.mul(p, e);
        g.cross_entropy_rows(m, &[0, 3, 5, 1])
    });
}

#[test]
fn structural_op_gradients() {
    let (mut s, ids) = store_with(&[("x", 5, 6), ("row", 1, 6), ("emb", 7, 6)], 3);
    check(&mut s, |g| {
        let x = g.param(ids[0]);
        let row = g.param(ids[1]);
        let e = g.embed_bag(ids[2], vec![vec![0, 3], vec![], vec![6], vec![1, 1, 2], vec![5]], true);
        let xe = g.add(x, e);
        let xr = g.mul_row(xe, row);
        let xa = g.add_row(xr, row);
        let left = g.slice_cols(xa, 0, 2);
        let right = g.slice_cols(xa, 2, 4);
        let cat = g.concat_cols(&[right, left]);
        let top = g.slice_rows(cat, 0, 2);
        let bottom = g.slice_rows(cat, 2, 3);
        let stacked = g.concat_rows(&[bottom, top]);
        let gathered = g.gather_rows(stacked, &[4, 0, 0, 2]);
        let scattered = g.scatter_add_rows(gathered, &[1, 1, 0, 2], 3);
        let lr = g.leaky_relu(scattered, 0.2);
        let sub = g.sub(lr, scattered);
        let norms = g.row_norm(sub);
        let mr = g.mean_rows(xa);
        let a = g.sum(norms);
        let b = g.sum(mr);
        let ab = g.add(a, b);
        g.add_scalar(ab, 1.0)
    });
}

#[test]
fn attention_block_op_gradients() {
    let (mut s, ids) = store_with(&[("x", 6, 8), ("a", 1, 8)], 4);
    check(&mut s, |g| {
        let x = g.param(ids[0]);
        let a = g.param(ids[1]);
        let xa = g.mul_row(x, a);
        let logits = g.block_sum(xa, 4);
        let alpha = g.segment_softmax(logits, &[0, 0, 1, 2, 2, 2]);
        let rep = g.repeat_blocks(alpha, 2);
        let msg = g.mul(rep, x);
        let agg = g.scatter_add_rows(msg, &[0, 0, 1, 2, 2, 2], 3);
        let mean = g.mean_blocks(agg, 4);
        let act = g.elu(mean);
        let sq = g.mul(act, act);
        g.sum(sq)
    });
}

#[test]
fn block_attention_gradients() {
    let (mut s, ids) = store_with(&[("x", 7, 8), ("wq", 8, 8), ("wk", 8, 8), ("wv", 8, 8)], 8);
    check(&mut s, |g| {
        let x = g.param(ids[0]);
        let wq = g.param(ids[1]);
        let wk = g.param(ids[2]);
        let wv = g.param(ids[3]);
        let q = g.matmul(x, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let o = g.attention(q, k, v, &[(0, 3), (3, 1), (4, 3)], 2);
        let t = g.tanh(o);
        let col = g.slice_cols(t, 1, 1);
        let row = g.reshape(col, 1, 7);
        g.cross_entropy_rows(row, &[2])
    });
}

#[test]
fn attention_blocks_do_not_mix() {
    let (mut s, ids) = store_with(&[("x", 5, 4)], 10);
    let run = |s: &ParamStore| {
        let mut g = Graph::new(&s.params);
        let x = g.param(ids[0]);
        let o = g.attention(x, x, x, &[(0, 2), (2, 3)], 2);
        g.value(o).clone()
    };
    let before = run(&s);
    s.value_mut(ids[0]).row_mut(4)[0] += 1.0;
    let after = run(&s);
    assert_eq!(before.row(0), after.row(0));
    assert_eq!(before.row(1), after.row(1));
    assert_ne!(before.row(2), after.row(2));
}

#[test]
fn linear_function_is_exact() {
    let (mut s, ids) = store_with(&[("w", 3, 3)], 9);
    let report = grad_check(
        &mut s,
        |g| {
            let w = g.param(ids[0]);
            let scaled = g.scale(w, 2.5);
            g.sum(scaled)
        },
        1e-5,
        9,
        0,
    );
    assert!(report.max_rel_err < 1e-9, "{}", report.max_rel_err);
}

#[test]
fn segment_softmax_sums_to_one() {
    let (s, ids) = store_with(&[("x", 7, 3)], 5);
    let mut g = Graph::new(&s.params);
    let x = g.param(ids[0]);
    let segs = [2, 0, 2, 1, 0, 2, 1];
    let p = g.segment_softmax(x, &segs);
    let v = g.value(p);
    for seg in 0..3 {
        for j in 0..3 {
            let total: f64 = (0..7).filter(|&r| segs[r] == seg).map(|r| v.get(r, j)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_accumulates_across_graphs() {
    let (mut s, ids) = store_with(&[("w", 2, 2)], 6);
    for _ in 0..2 {
        let mut g = Graph::new(&s.params);
        let w = g.param(ids[0]);
        let l = g.sum(w);
        g.backward(l, &mut s.grads);
    }
    assert!(s.grad(ids[0]).data().iter().all(|&x| x == 2.0));
}
