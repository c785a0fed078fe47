use dsr_core::tensornet::{attention, conv3d, group_norm, linear, AdamW, Conv3dSpec, Graph, ParamId, ParamSet, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, spec: Conv3dSpec) -> (Vec<usize>, Vec<f64>) {
    let (xs, ws) = (x.shape(), w.shape());
    let (ci, co) = (xs[0], ws[0]);
    let inp = [xs[1], xs[2], xs[3]];
    let ker = [ws[2], ws[3], ws[4]];
    let out: Vec<usize> = (0..3).map(|a| (inp[a] + 2 * spec.pad[a] - ker[a]) / spec.stride[a] + 1).collect();
    let xi = |c: usize, t: usize, h: usize, v: usize| ((c * inp[0] + t) * inp[1] + h) * inp[2] + v;
    let mut y = Vec::new();
    for o in 0..co {
        for t in 0..out[0] {
            for h in 0..out[1] {
                for v in 0..out[2] {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for kt in 0..ker[0] {
                            for kh in 0..ker[1] {
                                for kw in 0..ker[2] {
                                    let st = (t * spec.stride[0] + kt) as isize - spec.pad[0] as isize;
                                    let sh = (h * spec.stride[1] + kh) as isize - spec.pad[1] as isize;
                                    let sw = (v * spec.stride[2] + kw) as isize - spec.pad[2] as isize;
                                    if st < 0 || sh < 0 || sw < 0 || st >= inp[0] as isize || sh >= inp[1] as isize || sw >= inp[2] as isize {
                                        continue;
                                    }
                                    let wi = (((o * ci + c) * ker[0] + kt) * ker[1] + kh) * ker[2] + kw;
                                    acc += w.data()[wi] * x.data()[xi(c, st as usize, sh as usize, sw as usize)];
                                }
                            }
                        }
                    }
                    y.push(acc);
                }
            }
        }
    }
    let mut shape = vec![co];
    shape.extend(out);
    (shape, y)
}

fn naive_group_norm(x: &Tensor<f64>, groups: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let c = x.shape()[0];
    let per = x.numel() / c;
    let cpg = c / groups;
    let mut y = vec![0.0; x.numel()];
    for g in 0..groups {
        let idx: Vec<usize> = (g * cpg * per..(g + 1) * cpg * per).collect();
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| x.data()[i]).sum::<f64>() / n;
        let var = idx.iter().map(|&i| (x.data()[i] - mean).powi(2)).sum::<f64>() / n;
        for &i in &idx {
            let ch = i / per;
            y[i] = gamma[ch] * (x.data()[i] - mean) / (var + eps).sqrt() + beta[ch];
        }
    }
    y
}

fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Vec<f64> {
    let (heads, n, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let (m, dv) = (k.shape()[1], v.shape()[2]);
    let mut y = Vec::new();
    for h in 0..heads {
        for i in 0..n {
            let logits: Vec<f64> = (0..m)
                .map(|j| (0..d).map(|e| q.data()[(h * n + i) * d + e] * k.data()[(h * m + j) * d + e]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            for e in 0..dv {
                y.push((0..m).map(|j| ex[j] / z * v.data()[(h * m + j) * dv + e]).sum());
            }
        }
    }
    y
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv3d_matches_nested_loops_on_the_reference_case() {
    let mut r = rng(1);
    let x = Tensor::<f64>::randn(&[3, 4, 4, 4], &mut r);
    let w = Tensor::randn(&[2, 3, 3, 3, 3], &mut r);
    let b = Tensor::randn(&[2], &mut r);
    let spec = Conv3dSpec::same(3);
    let y = conv3d(&x, &w, Some(&b), spec).unwrap();
    let (shape, want) = naive_conv(&x, &w, &b, spec);
    assert_eq!(y.shape(), shape.as_slice());
    assert!(max_diff(y.data(), &want) < 1e-5);
}

#[test]
fn conv3d_matches_nested_loops_on_random_shapes() {
    let mut r = rng(2);
    for case in 0..100 {
        let ci = r.gen_range(1..5);
        let co = r.gen_range(1..5);
        let k = [1, 3][r.gen_range(0..2)];
        let dims = [r.gen_range(1..5), r.gen_range(k..8), r.gen_range(k..8)];
        let spec = match r.gen_range(0..3) {
            0 => Conv3dSpec::same(k),
            1 => Conv3dSpec { stride: [1, 2, 2], pad: [k / 2; 3] },
            _ => Conv3dSpec { stride: [1; 3], pad: [0; 3] },
        };
        let x = Tensor::<f32>::rand_uniform(&[ci, dims[0].max(k), dims[1], dims[2]], -1.0, 1.0, &mut r);
        let w = Tensor::<f32>::rand_uniform(&[co, ci, k, k, k], -1.0, 1.0, &mut r);
        let b = Tensor::<f32>::rand_uniform(&[co], -1.0, 1.0, &mut r);
        let y = conv3d(&x, &w, Some(&b), spec).unwrap();
        let (shape, want) = naive_conv(&x.cast(), &w.cast(), &b.cast(), spec);
        assert_eq!(y.shape(), shape.as_slice(), "case {case}");
        let got: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
        assert!(max_diff(&got, &want) < 1e-5, "case {case}: {}", max_diff(&got, &want));
        let y64 = conv3d(&x.cast::<f64>(), &w.cast(), Some(&b.cast()), spec).unwrap();
        assert!(max_diff(y64.data(), &want) < 1e-12, "case {case} in f64");
    }
}

#[test]
fn linear_matches_matrix_product() {
    let mut r = rng(3);
    for _ in 0..100 {
        let (n, fin, fout) = (r.gen_range(1..9), r.gen_range(1..17), r.gen_range(1..17));
        let x = Tensor::<f32>::randn(&[n, fin], &mut r);
        let w = Tensor::<f32>::randn(&[fout, fin], &mut r);
        let b = Tensor::<f32>::randn(&[fout], &mut r);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[n, fout]);
        let mut want = Vec::new();
        for i in 0..n {
            for o in 0..fout {
                let dot: f64 = (0..fin).map(|j| x.data()[i * fin + j] as f64 * w.data()[o * fin + j] as f64).sum();
                want.push(dot + b.data()[o] as f64);
            }
        }
        let got: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
        assert!(max_diff(&got, &want) < 1e-5);
    }
}

#[test]
fn attention_one_head_three_tokens_by_hand() {
    let q = Tensor::<f64>::new(&[1, 3, 2], vec![0.5, -1.0, 1.0, 0.0, -0.3, 0.8]).unwrap();
    let k = Tensor::new(&[1, 3, 2], vec![1.0, 0.2, -0.5, 0.5, 0.0, -1.0]).unwrap();
    let v = Tensor::new(&[1, 3, 2], vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap();
    let y = attention(&q, &k, &v).unwrap();
    // softmax rows of q k^T / sqrt(2), then times v
    let s = 1.0 / 2f64.sqrt();
    let logits = [
        [0.3 * s, -0.75 * s, 1.0 * s],
        [1.0 * s, -0.5 * s, 0.0],
        [-0.14 * s, 0.55 * s, -0.8 * s],
    ];
    let mut want = Vec::new();
    for row in logits {
        let e: Vec<f64> = row.iter().map(|l: &f64| l.exp()).collect();
        let z: f64 = e.iter().sum();
        want.push((e[0] * 1.0 + e[1] * 3.0 + e[2] * 0.0) / z);
        want.push((e[0] * 2.0 - e[1] * 1.0 + e[2] * 4.0) / z);
    }
    assert!(max_diff(y.data(), &want) < 1e-5);
}

#[test]
fn attention_matches_softmax_oracle_on_random_shapes() {
    let mut r = rng(4);
    for _ in 0..100 {
        let (h, n, m, d, dv) = (r.gen_range(1..4), r.gen_range(1..9), r.gen_range(1..9), r.gen_range(1..6), r.gen_range(1..6));
        let q = Tensor::<f32>::randn(&[h, n, d], &mut r);
        let k = Tensor::<f32>::randn(&[h, m, d], &mut r);
        let v = Tensor::<f32>::randn(&[h, m, dv], &mut r);
        let y = attention(&q, &k, &v).unwrap();
        let want = naive_attention(&q.cast(), &k.cast(), &v.cast());
        let got: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
        assert!(max_diff(&got, &want) < 1e-5);
    }
}

#[test]
fn group_norm_matches_two_pass_oracle() {
    let mut r = rng(5);
    for _ in 0..100 {
        let groups = r.gen_range(1..4);
        let c = groups * r.gen_range(1..4);
        let shape = [c, r.gen_range(1..4), r.gen_range(1..6), r.gen_range(1..6)];
        let x = Tensor::<f32>::rand_uniform(&shape, -3.0, 5.0, &mut r);
        let gamma = Tensor::<f32>::randn(&[c], &mut r);
        let beta = Tensor::<f32>::randn(&[c], &mut r);
        let y = group_norm(&x, groups, &gamma, &beta, 1e-5).unwrap();
        let g64: Vec<f64> = gamma.data().iter().map(|&v| v as f64).collect();
        let b64: Vec<f64> = beta.data().iter().map(|&v| v as f64).collect();
        let want = naive_group_norm(&x.cast(), groups, &g64, &b64, 1e-5);
        let got: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
        assert!(max_diff(&got, &want) < 1e-5);
    }
}

#[test]
fn group_norm_output_has_unit_moments_per_group() {
    let mut r = rng(6);
    let x = Tensor::<f64>::rand_uniform(&[6, 2, 5, 5], -2.0, 7.0, &mut r);
    let y = group_norm(&x, 3, &Tensor::full(&[6], 1.0), &Tensor::zeros(&[6]), 1e-5).unwrap();
    for chunk in y.data().chunks(100) {
        let m = chunk.iter().sum::<f64>() / 100.0;
        let v = chunk.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 100.0;
        assert!(m.abs() < 1e-4 && (v - 1.0).abs() < 1e-4, "mean {m} var {v}");
    }
}

/// Central finite differences of `sum(out * probe)` against the analytic
/// gradient of every input, in f64.
fn fd_check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let h = 1e-3;
    let eval = |ts: &[Tensor<f64>], probe: Option<&Tensor<f64>>| -> (f64, Vec<Vec<f64>>, Tensor<f64>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        let probe = probe.cloned().unwrap_or_else(|| Tensor::randn(g.shape(out), &mut rng(99)));
        let p = g.input(probe.clone());
        let prod = g.mul(out, p).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        let grads = vars.iter().map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).numel()])).collect();
        (g.value(loss).data()[0], grads, probe)
    };
    let (_, analytic, probe) = eval(&inputs, None);
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(t.numel());
        for j in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let (lp, _, _) = eval(&plus, Some(&probe));
            let (lm, _, _) = eval(&minus, Some(&probe));
            numeric.push((lp - lm) / (2.0 * h));
        }
        let err: f64 = analytic[i].iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-8);
        assert!(err / norm < 1e-3, "input {i}: relative error {}", err / norm);
    }
}

#[test]
fn conv3d_gradients() {
    let mut r = rng(10);
    let x = Tensor::randn(&[2, 3, 4, 4], &mut r);
    let w = Tensor::randn(&[3, 2, 3, 3, 3], &mut r);
    let b = Tensor::randn(&[3], &mut r);
    fd_check(vec![x.clone(), w.clone(), b.clone()], |g, v| g.conv3d(v[0], v[1], Some(v[2]), Conv3dSpec::same(3)).unwrap());
    fd_check(vec![x, w, b], |g, v| g.conv3d(v[0], v[1], Some(v[2]), Conv3dSpec::down_hw()).unwrap());
}

#[test]
fn pointwise_conv3d_gradients() {
    let mut r = rng(11);
    let x = Tensor::randn(&[3, 2, 3, 3], &mut r);
    let w = Tensor::randn(&[2, 3, 1, 1, 1], &mut r);
    let b = Tensor::randn(&[2], &mut r);
    fd_check(vec![x, w, b], |g, v| g.conv3d(v[0], v[1], Some(v[2]), Conv3dSpec { stride: [1; 3], pad: [0; 3] }).unwrap());
}

#[test]
fn linear_gradients() {
    let mut r = rng(12);
    let x = Tensor::randn(&[4, 5], &mut r);
    let w = Tensor::randn(&[3, 5], &mut r);
    let b = Tensor::randn(&[3], &mut r);
    fd_check(vec![x, w, b], |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap());
}

#[test]
fn attention_gradients() {
    let mut r = rng(13);
    let q = Tensor::randn(&[2, 3, 4], &mut r);
    let k = Tensor::randn(&[2, 5, 4], &mut r);
    let v = Tensor::randn(&[2, 5, 3], &mut r);
    fd_check(vec![q, k, v], |g, v| g.attention(v[0], v[1], v[2]).unwrap());
}

#[test]
fn group_norm_gradients() {
    let mut r = rng(14);
    let x = Tensor::randn(&[4, 2, 3, 3], &mut r);
    let gamma = Tensor::randn(&[4], &mut r);
    let beta = Tensor::randn(&[4], &mut r);
    fd_check(vec![x, gamma, beta], |g, v| g.group_norm(v[0], 2, v[1], v[2], 1e-5).unwrap());
}

#[test]
fn elementwise_and_structural_gradients() {
    let mut r = rng(15);
    let a = Tensor::randn(&[2, 3, 4], &mut r);
    let b = Tensor::randn(&[2, 3, 4], &mut r);
    let c = Tensor::randn(&[2], &mut r);
    fd_check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap());
    fd_check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap());
    fd_check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
    fd_check(vec![a.clone()], |g, v| g.scale(v[0], -1.7));
    fd_check(vec![a.clone()], |g, v| g.silu(v[0]));
    fd_check(vec![a.clone(), c], |g, v| g.add_channel(v[0], v[1]).unwrap());
    fd_check(vec![a.clone(), b.clone()], |g, v| g.mse(v[0], v[1]).unwrap());
    fd_check(vec![a.clone(), b], |g, v| g.concat(v[0], v[1]).unwrap());
    fd_check(vec![a.clone()], |g, v| g.reshape(v[0], &[6, 4]).unwrap());
    fd_check(vec![a.clone()], |g, v| g.permute(v[0], &[2, 0, 1]).unwrap());
    fd_check(vec![a.clone()], |g, v| g.upsample2x(v[0]).unwrap());
    fd_check(vec![a], |g, v| g.sum(v[0]));
}

#[test]
fn adamw_loss_is_monotone_after_warmup() {
    let mut ps = ParamSet::<f64>::new();
    ps.add("theta", Tensor::new(&[3], vec![-4.0, 5.0, 0.5]).unwrap()).unwrap();
    let target = [1.0, -2.0, 3.0];
    let curv = [1.0, 10.0, 0.1];
    let loss = |t: &[f64]| -> f64 { (0..3).map(|i| curv[i] * (t[i] - target[i]).powi(2)).sum() };
    let mut opt = AdamW::new(1e-2, 0.0);
    let mut losses = Vec::new();
    for _ in 0..150 {
        let th = ps.get(ParamId(0)).value.data().to_vec();
        losses.push(loss(&th));
        ps.get_mut(ParamId(0)).grad = Some((0..3).map(|i| 2.0 * curv[i] * (th[i] - target[i])).collect());
        opt.step(&mut ps).unwrap();
    }
    for w in losses[10..].windows(2) {
        assert!(w[1] <= w[0], "loss rose from {} to {}", w[0], w[1]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn group_norm_ignores_per_group_offsets(
        seed in any::<u64>(),
        offsets in proptest::collection::vec(-50.0f64..50.0, 3),
    ) {
        let x = Tensor::<f64>::randn(&[6, 2, 3, 3], &mut rng(seed));
        let mut shifted = x.clone();
        let per = x.numel() / 3;
        for (g, chunk) in shifted.data_mut().chunks_mut(per).enumerate() {
            chunk.iter_mut().for_each(|v| *v += offsets[g]);
        }
        let (gamma, beta) = (Tensor::full(&[6], 1.0), Tensor::zeros(&[6]));
        let a = group_norm(&x, 3, &gamma, &beta, 1e-5).unwrap();
        let b = group_norm(&shifted, 3, &gamma, &beta, 1e-5).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn adamw_descends_any_separable_quadratic(
        start in proptest::collection::vec(prop_oneof![-10.0f64..-0.5, 0.5f64..10.0], 4),
        curv in proptest::collection::vec(0.1f64..10.0, 4),
    ) {
        let mut ps = ParamSet::<f64>::new();
        ps.add("theta", Tensor::new(&[4], start).unwrap()).unwrap();
        let mut opt = AdamW::new(1e-3, 0.0);
        let mut losses = Vec::new();
        for _ in 0..60 {
            let th = ps.get(ParamId(0)).value.data().to_vec();
            losses.push((0..4).map(|i| curv[i] * th[i] * th[i]).sum::<f64>());
            ps.get_mut(ParamId(0)).grad = Some((0..4).map(|i| 2.0 * curv[i] * th[i]).collect());
            opt.step(&mut ps).unwrap();
        }
        for w in losses[10..].windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
    }
}
