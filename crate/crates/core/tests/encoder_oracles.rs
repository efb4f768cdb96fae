mod common;

use act_core::encoder::{forward, mine_batch_hard, opt_step, triplet_loss_batch, Activation, AdamState, EncoderParams};
use act_core::rng::stream;
use common::gaussian_points;
use rand::Rng as _;

fn forward_ref(p: &EncoderParams, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let mut a = row.clone();
            for l in &p.layers {
                let mut z = vec![0.0; l.weight.nrows()];
                for (o, zo) in z.iter_mut().enumerate() {
                    *zo = l.bias[o];
                    for (i, ai) in a.iter().enumerate() {
                        *zo += l.weight[[o, i]] * ai;
                    }
                    if l.activation == Activation::Relu && *zo < 0.0 {
                        *zo = 0.0;
                    }
                }
                a = z;
            }
            a
        })
        .collect()
}

#[test]
fn forward_matches_scalar_loops() {
    let mut rng = stream(11, 0);
    for _ in 0..50 {
        let hidden = rng.random_bool(0.5).then(|| rng.random_range(2..10));
        let p = EncoderParams::init(7, hidden, 5, None, &mut rng);
        let x = gaussian_points(12, 7, 1.0, &mut rng);
        let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
        let want = forward_ref(&p, &rows);
        let got = forward(&p, x.view()).unwrap();
        for (i, w) in want.iter().enumerate() {
            for (c, v) in w.iter().enumerate() {
                assert!((got[[i, c]] - v).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn batch_hard_equals_triplet_enumeration() {
    let mut rng = stream(12, 0);
    let margin = 0.3;
    for _ in 0..50 {
        let labels: Vec<usize> = (0..16).map(|i| i / 4).collect();
        let emb = gaussian_points(16, 3, 1.0, &mut rng);
        let d = |i: usize, j: usize| -> f64 { (0..3).map(|c| (emb[[i, c]] - emb[[j, c]]).powi(2)).sum::<f64>().sqrt() };
        let report = triplet_loss_batch(emb.view(), &labels, margin).unwrap();
        let mined = mine_batch_hard(emb.view(), &labels, None, margin);
        for a in 0..16 {
            // Max over all (p, n) triplets of the hinge equals the hinge at
            // the hardest positive and negative.
            let mut best = f64::NEG_INFINITY;
            for p in (0..16).filter(|&p| p != a && labels[p] == labels[a]) {
                for n in (0..16).filter(|&n| labels[n] != labels[a]) {
                    best = best.max(d(a, p) - d(a, n));
                }
            }
            let want = (best + margin).max(0.0);
            assert!((report.per_anchor_losses[a] - want).abs() < 1e-12);
            let t = mined[a].unwrap();
            assert!((t.d_ap - t.d_an - best).abs() < 1e-12);
        }
    }
}

#[test]
fn adam_follows_reference_trajectory_on_a_quadratic() {
    let mut rng = stream(13, 0);
    let p0 = EncoderParams::init(3, None, 2, None, &mut rng);
    let n = p0.n_params();
    let curv: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
    let grad_of = |theta: &[f64]| -> Vec<f64> { theta.iter().zip(&curv).map(|(t, a)| a * t).collect() };

    let mut state = AdamState::new(&p0);
    let mut params = p0.clone();
    let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
    let mut theta = p0.flatten();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    for t in 1..=10 {
        let g = grad_of(&params.flatten());
        let (s, p) = opt_step(&state, &params, &params.with_flat(&g), lr);
        state = s;
        params = p;

        let g = grad_of(&theta);
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / (1.0 - f64::powi(b1, t));
            let v_hat = v[i] / (1.0 - f64::powi(b2, t));
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        for (a, b) in params.flatten().iter().zip(&theta) {
            assert!((a - b).abs() < 1e-10, "step {t}");
        }
    }
}
