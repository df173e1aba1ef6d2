use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use somup::diagnostics::{coord_size, slope_fit};
use somup::network::{forward, init_weights, Activation, Architecture, LossKind, Tape};
use somup::param::{materialize, mup_table, Family, FamilyExps, Materialized, Widths};

fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
}

fn mup(width: usize, d_in: usize, depth: usize) -> Materialized {
    let t = mup_table(Family::Kfac, &FamilyExps::default(), depth).unwrap();
    materialize(&t.param.with_base(1.0, 0.1), &t.damping, 1.0, Widths { d_in, hidden: width }).unwrap()
}

#[test]
fn hidden_init_std_matches_mup_at_large_width() {
    let m = 10_000;
    let arch = Architecture { d_in: 4, width: m, depth: 3, out_dim: 1, activation: Activation::Relu, bias: false };
    let w = init_weights::<f32>(&arch, &mup(m, 4, 3), false, 5).unwrap();
    let hidden = &w.layers[1].w;
    let n = hidden.len() as f64;
    let mean = hidden.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = hidden.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let want = 1.0 / 100.0;
    assert!((var.sqrt() - want).abs() <= 0.03 * want, "std {} vs {want}", var.sqrt());
}

#[test]
fn output_signal_and_feature_sizes_follow_mup_at_init() {
    let widths = [128, 512, 2048, 8192];
    let (d_in, n) = (8, 16);
    let x = gaussian(d_in, n, 1);
    let y = gaussian(1, n, 2);
    let mut delta = vec![Vec::new(); 2];
    let mut feats = vec![Vec::new(); 2];
    for &m in &widths {
        let arch = Architecture { d_in, width: m, depth: 3, out_dim: 1, activation: Activation::Relu, bias: false };
        let w = init_weights::<f64>(&arch, &mup(m, d_in, 3), false, 9).unwrap();
        let mut tape = forward(&w, x.view()).unwrap();
        tape.backward(&w, LossKind::Mse, &y, true).unwrap();
        let out = tape.back.as_ref().unwrap().delta_out.as_ref().unwrap();
        for l in 0..2 {
            delta[l].push((m as f64, coord_size(&out[l]).unwrap()));
            feats[l].push((m as f64, coord_size(&tape.h[l + 1]).unwrap()));
        }
    }
    for l in 0..2 {
        let s = slope_fit(&delta[l]).unwrap().slope;
        assert!((s + 1.0).abs() <= 0.2, "layer {} delta slope {s}", l + 1);
        let s = slope_fit(&feats[l]).unwrap().slope;
        assert!(s.abs() <= 0.1, "layer {} feature slope {s}", l + 1);
    }
}

/// `E_y[g gᵀ]` over labels drawn from the model's own softmax.
fn monte_carlo_fisher(tape: &Tape<f64>, layer: usize, draws: usize, seed: u64) -> Array2<f64> {
    let back = tape.back.as_ref().unwrap();
    let d = &back.delta_out.as_ref().unwrap()[layer];
    let p = back.probs.as_ref().unwrap();
    let (c, n) = (p.nrows(), p.ncols());
    let m = d.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Uniform::new(0.0, 1.0).unwrap();
    let mut acc = Array2::<f64>::zeros((m, m));
    for i in 0..n {
        let mut counts = vec![0usize; c];
        for _ in 0..draws {
            let mut r: f64 = unit.sample(&mut rng);
            let mut k = c - 1;
            for (j, &pj) in p.column(i).iter().enumerate() {
                if r < pj {
                    k = j;
                    break;
                }
                r -= pj;
            }
            counts[k] += 1;
        }
        for (k, &cnt) in counts.iter().enumerate() {
            let mut g = -(0..c).fold(ndarray::Array1::<f64>::zeros(m), |s, j| s + &(&d.column(j * n + i) * p[[j, i]]));
            g += &d.column(k * n + i);
            let g = g.insert_axis(Axis(1));
            acc.scaled_add(cnt as f64 / draws as f64, &g.dot(&g.t()));
        }
    }
    acc / n as f64
}

#[test]
fn cross_entropy_fisher_factor_matches_sampled_fisher() {
    let (d_in, m, n, c) = (3, 3, 4, 3);
    let arch = Architecture { d_in, width: m, depth: 3, out_dim: c, activation: Activation::Tanh, bias: false };
    let w = init_weights::<f64>(&arch, &mup(m, d_in, 3), false, 4).unwrap();
    let x = gaussian(d_in, n, 7);
    let mut y = Array2::zeros((c, n));
    for i in 0..n {
        y[[i % c, i]] = 1.0;
    }
    let mut tape = forward(&w, x.view()).unwrap();
    tape.backward(&w, LossKind::CrossEntropy, &y, true).unwrap();
    for layer in 0..2 {
        let root = tape.output_factor_root(layer).unwrap();
        let exact = root.dot(&root.t());
        let sampled = monte_carlo_fisher(&tape, layer, 100_000, 21 + layer as u64);
        let err = (&sampled - &exact).mapv(|v| v * v).sum().sqrt() / exact.mapv(|v| v * v).sum().sqrt();
        assert!(err <= 0.02, "layer {} relative error {err}", layer + 1);
    }
}
