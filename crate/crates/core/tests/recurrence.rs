//! Incrementally advanced variance states against a from-scratch unroll.

use dverec_core::dve::{DveSideParams, EmbeddingConfig, GActivation, VarianceMode};
use dverec_core::tensor::{ParamStore, Precision, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-12;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn get(t: &Tensor, r: usize, c: usize) -> f64 {
    t.data()[r * t.cols() + c]
}

/// sigma2 after each of `t` steps for one node, plain loops throughout.
fn unroll(side: &DveSideParams, p: &ParamStore, node: usize, t: usize) -> Vec<f64> {
    let lstm = side.lstm.unwrap();
    let (wx, wh, b) = (p.get(lstm.w_x), p.get(lstm.w_h), p.get(lstm.bias));
    let (hw, hb, ow, ob) = (
        p.get(side.var_hidden_w),
        p.get(side.var_hidden_b),
        p.get(side.var_out_w),
        p.get(side.var_out_b),
    );
    let x = p.get(side.var_in).row_slice(node).to_vec();
    let hd = lstm.hidden;
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    let mut out = Vec::new();
    for _ in 0..t {
        let mut z = vec![0.0; 4 * hd];
        for (j, zj) in z.iter_mut().enumerate() {
            let mut s = get(b, 0, j);
            for (k, xk) in x.iter().enumerate() {
                s += xk * get(wx, k, j);
            }
            for (k, hk) in h.iter().enumerate() {
                s += hk * get(wh, k, j);
            }
            *zj = s;
        }
        for j in 0..hd {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[hd + j]);
            let cand = z[2 * hd + j].tanh();
            let o = sigmoid(z[3 * hd + j]);
            c[j] = f * c[j] + i * cand;
            h[j] = o * c[j].tanh();
        }
        let mut pre = get(ob, 0, 0);
        for m in 0..hw.cols() {
            let mut a = get(hb, 0, m);
            for (k, hk) in h.iter().enumerate() {
                a += hk * get(hw, k, m);
            }
            pre += a.max(0.0) * get(ow, m, 0);
        }
        out.push(side.config.g.apply(pre));
    }
    out
}

fn draw(rng: &mut ChaCha8Rng, g: GActivation) -> (DveSideParams, ParamStore) {
    let config = EmbeddingConfig {
        n_nodes: rng.random_range(1..5),
        dim: 2,
        variance_hidden_dim: rng.random_range(1..5),
        variance_mlp_dim: rng.random_range(1..5),
        lstm_hidden_dim: rng.random_range(1..5),
        g,
        mode: VarianceMode::Dynamic,
    };
    let mut params = ParamStore::new();
    let side = DveSideParams::init("s", config, &mut params, rng).unwrap();
    for id in params.ids().collect::<Vec<_>>() {
        let shape = params.get(id).shape().to_vec();
        let scale = rng.random_range(0.1..2.0);
        let data = (0..shape.iter().product()).map(|_| rng.random_range(-scale..scale)).collect();
        *params.get_mut(id) = Tensor::new(shape, data).unwrap();
    }
    (side, params)
}

#[test]
fn incremental_matches_unroll_for_100_draws() {
    check_incremental_matches_unroll_for_100_draws()
}

pub fn check_incremental_matches_unroll_for_100_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let gs = [GActivation::Relu, GActivation::Abs, GActivation::Square];
    for d in 0..100 {
        let (side, params) = draw(&mut rng, gs[d % 3]);
        let node = rng.random_range(0..side.config.n_nodes);
        let reference = unroll(&side, &params, node, 8);
        let mut state = side.initial_state(&params, node).unwrap();
        for (t, want) in reference.iter().enumerate() {
            state = side.advance_variance(&params, &state).unwrap();
            assert_eq!(state.bin, t + 1);
            let err = (state.sigma2 - want).abs();
            assert!(err <= TOL, "draw {d} bin {}: {} vs {want} ({err:e})", t + 1, state.sigma2);
        }
    }
}

#[test]
fn batched_and_single_advances_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let (side, params) = draw(&mut rng, GActivation::Square);
        let nodes: Vec<usize> = (0..side.config.n_nodes).collect();
        for t in 0..=8 {
            let batched = side.states_at(&params, &nodes, t, Precision::F64).unwrap();
            for (&n, s) in nodes.iter().zip(&batched) {
                let single = side.state_at(&params, n, t, Precision::F64).unwrap();
                assert_eq!(&single, s);
            }
        }
    }
}

#[test]
fn advancing_leaves_input_state_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (side, params) = draw(&mut rng, GActivation::Abs);
    let s0 = side.initial_state(&params, 0).unwrap();
    let copy = s0.clone();
    let s1 = side.advance_variance(&params, &s0).unwrap();
    assert_eq!(s0, copy);
    assert_eq!(side.advance_variance(&params, &s0).unwrap(), s1);
}
