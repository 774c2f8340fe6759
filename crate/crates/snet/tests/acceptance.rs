//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a subset.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snet::analysis::{diagnose, evaluate, grouping_or_default, write_diagnostics, REPORT_FILES};
use snet::checkpoint::Checkpoint;
use snet::config::RunConfig;
use snet::dataset::{generate_dataset, load_dataset, write_dataset, Dataset};
use snet::stnt::{read_tensor, write_tensor};
use snet::trainer::{train, LAST};
use snet_core::data::{clip_normalize, SynthSpec};
use snet_core::fusion::{Feb, Ffb, FusionPair, Gab};
use snet_core::gradcheck::{check_gradients, check_layer_gradients, random_readout, GradCheckOptions, Stencil};
use snet_core::info::{
    han_curve, is_non_increasing, jensen_bound_check, proposition1_sim, DiagnosticsReport, DiscreteSampleSet, FusedDim, HanMode, JointTable, Regime,
};
use snet_core::loss::{combined_objective, one_hot, LossWeights};
use snet_core::metrics::{hausdorff, overlaps, MetricReport};
use snet_core::model::{HeadKind, Model, NetworkConfig, ABLATION_FLAGS};
use snet_core::nn::{Attention, BufferSet, Ctx, ParamSet};
use snet_core::train::predict_logits;
use snet_core::{BnStats, Graph, Mode, Tensor, Var};

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn scramble(ps: &mut ParamSet, seed: u64, amp: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = ps.names().cloned().collect();
    for n in names {
        for v in ps.get_mut(&n).unwrap().data_mut() {
            *v = rng.random_range(-amp..amp);
        }
    }
}

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

// ----- 1. gradients ------------------------------------------------------------------

fn primitive_check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> snet_core::Result<Var>) -> f64 {
    check_gradients(inputs, f, GradCheckOptions::default()).unwrap().max_rel_error()
}

fn block_check(ps: &ParamSet, bufs: &BufferSet, inputs: &[Tensor], f: impl Fn(&mut Ctx, &[Var]) -> snet_core::Result<Vec<Var>>) -> f64 {
    let opts = GradCheckOptions { max_entries: Some(24), ..Default::default() };
    check_layer_gradients(
        ps,
        bufs,
        Mode::Train,
        inputs,
        |cx, xs| {
            let mut total: Option<Var> = None;
            for (i, o) in f(cx, xs)?.into_iter().enumerate() {
                let r = random_readout(cx.g, o, 40 + i as u64)?;
                total = Some(match total {
                    None => r,
                    Some(t) => cx.g.add(t, r)?,
                });
            }
            Ok(total.unwrap())
        },
        opts,
    )
    .unwrap()
    .max_rel_error()
}

fn gradients() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let a = rand_tensor(&[2, 3, 4], &mut rng);
    let b = rand_tensor(&[2, 3, 4], &mut rng);
    let x4 = rand_tensor(&[2, 3, 4, 4], &mut rng);
    let targets = Tensor::from_fn(&[2, 3, 4, 4], |i| ((i * 7) % 3 == 0) as u8 as f64);
    let readout = |g: &mut Graph, y: Var| random_readout(g, y, 9);
    worst.push(("add", primitive_check(&[a.clone(), b.clone()], |g, v| { let y = g.add(v[0], v[1])?; readout(g, y) })));
    worst.push(("mul", primitive_check(&[a.clone(), b.clone()], |g, v| { let y = g.mul(v[0], v[1])?; readout(g, y) })));
    worst.push(("add_broadcast", primitive_check(&[a.clone(), rand_tensor(&[3, 1], &mut rng)], |g, v| { let y = g.add_broadcast(v[0], v[1])?; readout(g, y) })));
    worst.push(("scale", primitive_check(std::slice::from_ref(&a), |g, v| { let y = g.scale(v[0], -1.5)?; readout(g, y) })));
    worst.push(("ln", primitive_check(&[a.map(|v| v.abs() + 0.5)], |g, v| { let y = g.ln(v[0])?; readout(g, y) })));
    worst.push(("sigmoid", primitive_check(&[a.map(|v| 4.0 * v)], |g, v| { let y = g.sigmoid(v[0])?; readout(g, y) })));
    worst.push(("gelu", primitive_check(&[a.map(|v| 3.0 * v)], |g, v| { let y = g.gelu(v[0])?; readout(g, y) })));
    worst.push(("matmul", primitive_check(&[a.clone(), rand_tensor(&[2, 4, 5], &mut rng)], |g, v| { let y = g.matmul(v[0], v[1])?; readout(g, y) })));
    worst.push(("permute", primitive_check(std::slice::from_ref(&a), |g, v| { let y = g.permute(v[0], &[2, 0, 1])?; readout(g, y) })));
    worst.push(("transpose", primitive_check(std::slice::from_ref(&a), |g, v| { let y = g.transpose_last2(v[0])?; readout(g, y) })));
    worst.push(("reshape", primitive_check(std::slice::from_ref(&a), |g, v| { let y = g.reshape(v[0], &[6, 4])?; readout(g, y) })));
    worst.push(("concat", primitive_check(&[a.clone(), rand_tensor(&[2, 2, 4], &mut rng)], |g, v| { let y = g.concat(&[v[0], v[1]], 1)?; readout(g, y) })));
    worst.push(("slice", primitive_check(std::slice::from_ref(&a), |g, v| { let y = g.slice(v[0], 2, 1, 2)?; readout(g, y) })));
    worst.push(("softmax", primitive_check(std::slice::from_ref(&a), |g, v| { let y = g.softmax(v[0], 2)?; readout(g, y) })));
    worst.push(("layer_norm", primitive_check(&[a.clone(), rand_tensor(&[4], &mut rng), rand_tensor(&[4], &mut rng)], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        readout(g, y)
    })));
    for mode in [Mode::Train, Mode::Eval] {
        worst.push(("batch_norm", primitive_check(&[x4.clone(), rand_tensor(&[3], &mut rng), rand_tensor(&[3], &mut rng)], |g, v| {
            let mut stats = BnStats { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 1.5, 2.0] };
            let y = g.batch_norm(v[0], v[1], v[2], &mut stats, mode, 1e-5)?;
            readout(g, y)
        })));
    }
    for (stride, pad, groups, k, cout) in [(1, 1, 1, 3, 4), (2, 1, 1, 3, 2), (1, 1, 3, 3, 3), (4, 0, 1, 4, 2)] {
        let w = rand_tensor(&[cout, 3 / groups, k, k], &mut rng);
        worst.push(("conv2d", primitive_check(&[x4.clone(), w], |g, v| { let y = g.conv2d(v[0], v[1], stride, pad, groups)?; readout(g, y) })));
    }
    worst.push(("upsample", primitive_check(std::slice::from_ref(&x4), |g, v| { let y = g.upsample_nearest(v[0], 2)?; readout(g, y) })));
    worst.push(("tokens", primitive_check(std::slice::from_ref(&x4), |g, v| { let y = g.flatten_tokens(v[0])?; readout(g, y) })));
    worst.push(("mean", primitive_check(std::slice::from_ref(&a), |g, v| g.mean(v[0]))));
    worst.push(("bce", primitive_check(&[x4.map(|v| 3.0 * v)], |g, v| { let t = g.constant(targets.clone())?; g.bce_with_logits(v[0], t) })));
    worst.push(("dice", primitive_check(&[x4.map(|v| 0.5 + 0.4 * v)], |g, v| { let t = g.constant(targets.clone())?; g.soft_dice(v[0], t, 1e-5) })));

    let mut pb = snet_core::nn::ParamBuilder::new(2);
    let feb = Feb::new(&mut pb, "feb", [2, 4], 1).unwrap();
    let ffb = Ffb::new(&mut pb, "ffb", 1).unwrap();
    let gab = Gab::new(&mut pb, "gab", 2, 4).unwrap();
    let (mut ps, bufs) = pb.finish();
    scramble(&mut ps, 3, 0.7);
    let (s2, s4) = (rand_tensor(&[1, 2, 4, 4], &mut rng), rand_tensor(&[1, 4, 2, 2], &mut rng));
    worst.push(("FEB", block_check(&ps, &bufs, &[s2.clone(), s4.clone()], |cx, t| {
        let (x, y) = feb.forward(cx, t[0], t[1])?;
        Ok(vec![x, y])
    })));
    worst.push(("FFB", block_check(&ps, &bufs, &[rand_tensor(&[2, 4, 3, 3], &mut rng), rand_tensor(&[2, 1, 3, 3], &mut rng)], |cx, t| {
        Ok(vec![ffb.forward(cx, t[0], t[1])?])
    })));
    worst.push(("GAB", block_check(&ps, &bufs, &[s2, s4], |cx, t| Ok(vec![gab.forward(cx, t[0], t[1])?]))));

    let config = NetworkConfig { input_size: (64, 64), base_width: 1, num_classes: 2, ..Default::default() };
    let m = Model::build(&config, 4).unwrap();
    let x = rand_tensor(&[2, 1, 64, 64], &mut rng);
    let labels: Vec<u32> = (0..2 * 64 * 64).map(|_| rng.random_range(0..2)).collect();
    let y = one_hot(&labels, 2, 2, 64, 64).unwrap();
    let opts = GradCheckOptions { max_entries: Some(2), step: 1e-3, stencil: Stencil::Ridders, ..Default::default() };
    let rep = check_layer_gradients(
        &m.params,
        &m.buffers,
        Mode::Train,
        &[x],
        |cx, v| {
            let out = m.forward_with(cx, v[0], false)?;
            let t = cx.g.constant(y.clone())?;
            Ok(combined_objective(cx.g, out.y_hat, out.y_hat_f, t, &LossWeights::default())?.total)
        },
        opts,
    )
    .unwrap();
    worst.push(("SNet loss", rep.max_rel_error()));

    let (name, err) = worst.iter().copied().fold(("", 0.0), |acc, w| if w.1 > acc.1 { w } else { acc });
    assert!(err <= 1e-4, "{name}: max relative error {err:.3e}");
    format!("{} checks, worst {err:.2e} ({name})", worst.len())
}

// ----- 2. oracles ------------------------------------------------------------------

fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize, groups: usize) -> Tensor {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cpg, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1);
    let opg = cout / groups;
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for o in 0..cout {
            let g = o / opg;
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cpg {
                        let c = g * cpg + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let (iy, ix) = ((y * stride + ky) as isize - pad as isize, (xo * stride + kx) as isize - pad as isize);
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.data()[((n * cin + c) * h + iy as usize) * wd + ix as usize] * w.data()[((o * cpg + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out[((n * cout + o) * ho + y) * wo + xo] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, cout, ho, wo], out).unwrap()
}

type Mat = Vec<Vec<f64>>;

fn rows(t: &Tensor, n: usize, c: usize) -> Mat {
    (0..n).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn affine(ps: &ParamSet, prefix: &str, x: &Mat) -> Mat {
    let w = ps.get(&format!("{prefix}.w")).unwrap();
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let b = ps.get(&format!("{prefix}.b")).ok();
    x.iter()
        .map(|r| (0..dout).map(|j| (0..din).map(|i| r[i] * w.data()[i * dout + j]).sum::<f64>() + b.map_or(0.0, |b| b.data()[j])).collect())
        .collect()
}

fn attention_oracle(ps: &ParamSet, q_in: &Mat, kv_in: &Mat, heads: usize, out_proj: bool) -> Mat {
    let (q, k, v) = (affine(ps, "a.wq", q_in), affine(ps, "a.wk", kv_in), affine(ps, "a.wv", kv_in));
    let dh = q[0].len() / heads;
    let mut out = vec![vec![0.0; q[0].len()]; q.len()];
    for h in 0..heads {
        for (i, qi) in q.iter().enumerate() {
            let s: Vec<f64> = k.iter().map(|kj| (0..dh).map(|d| qi[h * dh + d] * kj[h * dh + d]).sum::<f64>() / (dh as f64).sqrt()).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            for (j, vj) in v.iter().enumerate() {
                let p = (s[j] - m).exp() / z;
                for d in 0..dh {
                    out[i][h * dh + d] += p * vj[h * dh + d];
                }
            }
        }
    }
    if out_proj {
        affine(ps, "a.wo", &out)
    } else {
        out
    }
}

fn boundary_points(m: &[bool], h: usize, w: usize) -> Vec<(i64, i64)> {
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && m[y as usize * w + x as usize];
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if inside(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !inside(y + dy, x + dx)) {
                out.push((y, x));
            }
        }
    }
    out
}

fn hausdorff_oracle(a: &[bool], b: &[bool], h: usize, w: usize, p: f64) -> Option<f64> {
    let (pa, pb) = (boundary_points(a, h, w), boundary_points(b, h, w));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        let mut d: Vec<f64> = from.iter().map(|&(y, x)| to.iter().map(|&(v, u)| (((y - v).pow(2) + (x - u).pow(2)) as f64).sqrt()).fold(f64::INFINITY, f64::min)).collect();
        d.sort_by(f64::total_cmp);
        let r = p / 100.0 * (d.len() - 1) as f64;
        let (lo, hi) = (r.floor() as usize, r.ceil() as usize);
        d[lo] + (r - lo as f64) * (d[hi] - d[lo])
    };
    Some(directed(&pa, &pb).max(directed(&pb, &pa)))
}

fn oracles() -> String {
    const N: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..N {
        let groups = [1, 2, 3][rng.random_range(0..3)];
        let (cin, cout) = (groups * rng.random_range(1..=2), groups * rng.random_range(1..=3));
        let (k, stride) = (rng.random_range(1..=3), rng.random_range(1..=2));
        let pad = rng.random_range(0..k);
        let (h, w) = (rng.random_range(k..=8), rng.random_range(k..=8));
        let x = rand_tensor(&[rng.random_range(1..=2), cin, h, w], &mut rng);
        let wt = rand_tensor(&[cout, cin / groups, k, k], &mut rng);
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x.clone()).unwrap(), g.input(wt.clone()).unwrap());
        let y = g.conv2d(xv, wv, stride, pad, groups).unwrap();
        let want = conv_oracle(&x, &wt, stride, pad, groups);
        let rel = g.value(y).data().iter().zip(want.data()).map(|(a, b)| (a - b).abs() / b.abs().max(1e-12)).fold(0.0, f64::max);
        assert!(g.shape(y) == want.shape() && (rel <= 1e-6 || g.value(y).max_abs_diff(&want) <= 1e-12), "conv2d case {case}");
    }
    for case in 0..N {
        let (m, k, n) = (rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=6));
        let (a, b) = (rand_tensor(&[m, k], &mut rng), rand_tensor(&[k, n], &mut rng));
        let mut g = Graph::new();
        let (av, bv) = (g.input(a.clone()).unwrap(), g.input(b.clone()).unwrap());
        let y = g.matmul(av, bv).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| a.data()[i * k + t] * b.data()[t * n + j]).sum();
                assert!((g.value(y).data()[i * n + j] - want).abs() <= 1e-12, "matmul case {case}");
            }
        }
    }
    for case in 0..N {
        let heads = rng.random_range(1..=2);
        let c = heads * rng.random_range(1..=4);
        let out_proj = rng.random_bool(0.5);
        let (nq, nk) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let mut pb = snet_core::nn::ParamBuilder::new(case as u64);
        let attn = Attention::new(&mut pb, "a", c, heads, out_proj).unwrap();
        let (mut ps, mut bufs) = pb.finish();
        scramble(&mut ps, 500 + case as u64, 0.8);
        let (q, kv) = (rand_tensor(&[1, nq, c], &mut rng), rand_tensor(&[1, nk, c], &mut rng));
        let mut g = Graph::new();
        let (qv, kvv) = (g.input(q.clone()).unwrap(), g.input(kv.clone()).unwrap());
        let y = {
            let mut cx = Ctx::new(&mut g, &ps, &mut bufs, Mode::Eval);
            attn.forward(&mut cx, qv, kvv).unwrap()
        };
        let want = attention_oracle(&ps, &rows(&q, nq, c), &rows(&kv, nk, c), heads, out_proj);
        let err = want.iter().flatten().zip(g.value(y).data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-10, "attention case {case}: {err}");
    }
    for case in 0..N {
        let (b, c, h, w) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(2..=5), rng.random_range(1..=5));
        let x = rand_tensor(&[b, c, h, w], &mut rng).map(|v| 2.5 * v + 1.0);
        let mut stats = BnStats::new(c);
        let mut g = Graph::new();
        let xv = g.input(x.clone()).unwrap();
        let (gv, bv) = (g.input(Tensor::ones(&[c])).unwrap(), g.input(Tensor::zeros(&[c])).unwrap());
        let y = g.batch_norm(xv, gv, bv, &mut stats, Mode::Train, 1e-5).unwrap();
        let hw = h * w;
        for ch in 0..c {
            let idx: Vec<usize> = (0..b).flat_map(|n| (0..hw).map(move |p| (n * c + ch) * hw + p)).collect();
            let mean = idx.iter().map(|&i| x.data()[i]).sum::<f64>() / idx.len() as f64;
            let var = idx.iter().map(|&i| (x.data()[i] - mean).powi(2)).sum::<f64>() / idx.len() as f64;
            for &i in &idx {
                assert!((g.value(y).data()[i] - (x.data()[i] - mean) / (var + 1e-5).sqrt()).abs() <= 1e-6, "batch_norm case {case}");
            }
        }
    }
    for case in 0..N {
        let (h, w) = (rng.random_range(3..=14), rng.random_range(3..=14));
        let (da, db) = (rng.random_range(0.05..0.6), rng.random_range(0.05..0.6));
        let a: Vec<bool> = (0..h * w).map(|_| rng.random_bool(da)).collect();
        let b: Vec<bool> = (0..h * w).map(|_| rng.random_bool(db)).collect();
        for p in [100.0, 95.0] {
            let got = hausdorff(&a, &b, h, w, p).unwrap();
            let want = hausdorff_oracle(&a, &b, h, w, p);
            match (got, want) {
                (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-9, "hausdorff case {case} p{p}: {x} vs {y}"),
                (x, y) => assert_eq!(x, y, "hausdorff case {case}"),
            }
        }
    }
    format!("{N} random instances each of conv2d, matmul, attention, batch_norm, Hausdorff")
}

// ----- 3. entropy identities ---------------------------------------------------

fn entropy_identities() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (r, c) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let mut m: Vec<f64> = (0..r * c).map(|_| if rng.random_bool(0.25) { 0.0 } else { rng.random::<f64>() }).collect();
        if m.iter().all(|&v| v == 0.0) {
            m[0] = 1.0;
        }
        let s: f64 = m.iter().sum();
        m.iter_mut().for_each(|v| *v /= s);
        let fix = 1.0 - m.iter().sum::<f64>();
        let i = (0..m.len()).max_by(|&x, &y| m[x].total_cmp(&m[y])).unwrap();
        m[i] += fix;
        let t = JointTable::new(r, c, m).unwrap();
        worst = worst.max((t.entropy_a() + t.entropy_b() - t.mutual_information() - t.joint_entropy()).abs());
    }
    assert!(worst <= 1e-9, "joint identity error {worst}");

    for _ in 0..500 {
        let d = rng.random_range(1..=6);
        let alphabet: Vec<u32> = (0..d).map(|_| rng.random_range(2..=3)).collect();
        let n = rng.random_range(1..60);
        let rows: Vec<Vec<u32>> = (0..n).map(|_| alphabet.iter().map(|&a| rng.random_range(0..a)).collect()).collect();
        let curve = han_curve(&DiscreteSampleSet::new(rows, alphabet).unwrap(), HanMode::Exhaustive).unwrap();
        assert!(is_non_increasing(&curve, 1e-9), "{curve:?}");
    }
    let fair = han_curve(&DiscreteSampleSet::uniform_product(vec![2, 2, 2]).unwrap(), HanMode::Exhaustive).unwrap();
    assert_eq!(fair.iter().map(|p| p.1).collect::<Vec<_>>(), [1.0, 1.0, 1.0]);
    let dup = DiscreteSampleSet::new(vec![vec![0, 0, 0], vec![1, 1, 1]], vec![2, 2, 2]).unwrap();
    let dup = han_curve(&dup, HanMode::Exhaustive).unwrap();
    assert_eq!(dup.iter().map(|p| p.1).collect::<Vec<_>>(), [1.0, 0.5, 1.0 / 3.0]);

    let mut violations = 0;
    for _ in 0..500 {
        let (ka, kb, ko) = (rng.random_range(2..=5u32), rng.random_range(2..=5u32), rng.random_range(1..=8u64));
        let table: Vec<u64> = (0..ka * kb).map(|_| rng.random_range(0..ko)).collect();
        let n = rng.random_range(5..80);
        let a: Vec<u32> = (0..n).map(|_| rng.random_range(0..ka)).collect();
        let b: Vec<u32> = (0..n).map(|_| rng.random_range(0..kb)).collect();
        let check = jensen_bound_check(&a, &b, None, |x, y| table[(x * kb + y) as usize]).unwrap();
        violations += usize::from(!check.bound_holds);
    }
    assert_eq!(violations, 0, "Jensen bound violated");
    format!("identity error {worst:.1e} over 1000 tables; 500 Han curves; 500 fusion functions")
}

// ----- 4. Proposition 1 ------------------------------------------------------------

fn proposition_one() -> String {
    let count = |regime, a, b, n| (0..100u64).filter(|&s| proposition1_sim(regime, a, b, n, s).unwrap().holds()).count();
    let less = count(Regime::Independent, 3, 2, FusedDim::Fixed(3));
    let approx = count(Regime::Correlated { copy_prob: 0.5 }, 3, 3, FusedDim::Matched);
    let greater = count(Regime::Dependent, 2, 3, FusedDim::Fixed(4));
    assert!(less >= 95 && approx >= 95 && greater >= 95, "{less}/{approx}/{greater} of 100");
    format!("independent {less}/100, matched {approx}/100, dependent {greater}/100")
}

// ----- 5. shapes and contracts ---------------------------------------------------------

fn shapes() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for d in [4, 8, 16, 32] {
        let mut pb = snet_core::nn::ParamBuilder::new(d as u64);
        let ffb = Ffb::new(&mut pb, "ffb", d).unwrap();
        let (ps, mut bufs) = pb.finish();
        let mut g = Graph::new();
        let fc = g.input(rand_tensor(&[1, 4 * d, 2, 2], &mut rng)).unwrap();
        let ft = g.input(rand_tensor(&[1, d, 2, 2], &mut rng)).unwrap();
        let mut cx = Ctx::new(&mut g, &ps, &mut bufs, Mode::Train);
        let (out, trace) = ffb.forward_traced(&mut cx, fc, ft).unwrap();
        assert_eq!(trace, [5 * d, 2 * d, 6 * d, 2 * d]);
        assert_eq!(g.shape(out), &[1, 2 * d, 2, 2]);
    }
    for (c0, c1, s) in [(2, 4, 8), (8, 16, 4), (4, 8, 2)] {
        let mut pb = snet_core::nn::ParamBuilder::new(7);
        let feb = Feb::new(&mut pb, "feb", [c0, c1], 1).unwrap();
        let (ps, mut bufs) = pb.finish();
        let mut g = Graph::new();
        let a = g.input(rand_tensor(&[2, c0, s, s], &mut rng)).unwrap();
        let b = g.input(rand_tensor(&[2, c1, s / 2, s / 2], &mut rng)).unwrap();
        let mut cx = Ctx::new(&mut g, &ps, &mut bufs, Mode::Train);
        let (x, y) = feb.forward(&mut cx, a, b).unwrap();
        assert_eq!((g.shape(x), g.shape(y)), (&[2, c0, s, s][..], &[2, c1, s / 2, s / 2][..]));
    }
    let mut grid = 0;
    for (h, w) in [(32, 32), (64, 32), (64, 96)] {
        for c in [2, 4] {
            for head in [HeadKind::Refine, HeadKind::Plain] {
                let cfg = NetworkConfig { input_size: (h, w), base_width: c, num_classes: 3, head, ..Default::default() };
                let mut m = Model::build(&cfg, 1).unwrap();
                let mut g = Graph::new();
                let x = g.input(rand_tensor(&[2, 1, h, w], &mut rng)).unwrap();
                let out = m.forward(&mut g, x, Mode::Eval, false).unwrap();
                assert_eq!(g.shape(out.y_hat), &[2, 3, h, w]);
                assert_eq!(g.shape(out.y_hat_f), &[2, 3, h, w]);
                grid += 1;
            }
        }
    }
    for i in 1..=4 {
        for j in 1..=4 {
            assert_eq!(FusionPair::stagger(i, j).is_ok(), i > j, "stagger({i}, {j})");
        }
    }
    assert!(NetworkConfig::default().fusion_pairs().iter().all(|p| p.cnn_stage > p.vit_stage));
    format!("FFB d in {{4,8,16,32}}, FEB shapes, {grid} head configurations, stagger constraint")
}

// ----- 6. loss semantics -------------------------------------------------------------

fn loss_semantics() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (b, k, h, w) = (rng.random_range(1..=2), rng.random_range(2..=4), rng.random_range(2..=6), rng.random_range(2..=6));
        let labels: Vec<u32> = (0..b * h * w).map(|_| rng.random_range(0..k as u32)).collect();
        let t = one_hot(&labels, b, k, h, w).unwrap();
        let mut g = Graph::new();
        let y = g.input(rand_tensor(&[b, k, h, w], &mut rng).map(|v| 3.0 * v)).unwrap();
        let yf = g.input(rand_tensor(&[b, k, h, w], &mut rng).map(|v| 3.0 * v)).unwrap();
        let tv = g.constant(t).unwrap();
        let obj = combined_objective(&mut g, y, yf, tv, &LossWeights::default()).unwrap();
        let p = obj.parts;
        worst = worst.max((g.value(obj.total).item() - (0.6 * p.bce_f + 0.4 * p.dice_f + 0.6 * p.bce + 0.4 * p.dice)).abs());
    }
    assert!(worst <= 1e-12, "recomposition error {worst}");
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let pred: Vec<u32> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let truth: Vec<u32> = (0..n).map(|_| rng.random_range(0..3)).collect();
        for o in overlaps(&pred, &truth, 3).unwrap() {
            if let (Some(d), Some(j)) = (o.dice(), o.iou()) {
                // 2 I / (P + T) against 2 (I / U) / (1 + I / U) = 2 I / (U + I), with U + I = P + T.
                assert_eq!(o.union() + o.inter, o.pred + o.truth);
                assert!((d - 2.0 * j / (1.0 + j)).abs() <= 4.0 * f64::EPSILON, "{o:?}");
            }
        }
    }
    let y = clip_normalize(&Tensor::new(&[4], vec![-200.0, 300.0, 75.0, -125.0]).unwrap(), -125.0, 275.0).unwrap();
    assert_eq!(y.data(), &[0.0, 1.0, 0.5, 0.0]);
    format!("recomposition error {worst:.1e}; dice/IoU identity on 1000 mask pairs; 75 -> 0.5")
}

// ----- 7. learning -----------------------------------------------------------------

fn learning() -> String {
    let dir = tmp();
    let spec = SynthSpec::default();
    let (sample, _) = spec.generate_one(0).unwrap();
    let one = dir.path().join("one");
    write_dataset(&one, &[sample], &["train"], spec.num_classes(), Some(&spec.grouping().unwrap())).unwrap();
    let data = load_dataset(&one).unwrap();
    let run = RunConfig { data: one.clone(), epochs: 500, batch_size: 1, augment: false, eval_every: 0, ..RunConfig::default() };
    train(&run, &data, &dir.path().join("overfit"), None).unwrap();
    let mut ck = Checkpoint::load(&dir.path().join("overfit").join(LAST)).unwrap();
    let grouping = grouping_or_default(data.grouping.as_ref(), data.num_classes).unwrap();
    let report = evaluate(&mut ck.model, &data.split("train"), &grouping, 95.0, 1).unwrap();
    let worst_class = report.classes.iter().map(|(_, r)| r.dice.unwrap()).fold(1.0, f64::min);
    assert!(worst_class >= 0.95, "overfit foreground dice {worst_class}");

    let toy_dir = dir.path().join("toy");
    let toy = generate_dataset(&toy_dir, &spec, 200, 0.2).unwrap();
    let run = RunConfig { data: toy_dir, epochs: 40, early_stop_dice: Some(0.85), ..RunConfig::default() };
    let out = train(&run, &toy, &dir.path().join("toy_run"), None).unwrap();
    let (epoch, best) = out.best.unwrap();
    assert!(best >= 0.85, "held-out dice {best:.4} after {} epochs", out.log.len());
    format!("overfit min class dice {worst_class:.3}; toy held-out dice {best:.3} at epoch {epoch}")
}

// ----- 8. ablations --------------------------------------------------------------------

fn small_dataset(dir: &Path, count: usize) -> Dataset {
    generate_dataset(dir, &SynthSpec { seed: 8, ..SynthSpec::default() }, count, 1.0 / 3.0).unwrap()
}

fn schema(r: &MetricReport) -> (Vec<usize>, Vec<&'static str>) {
    (r.classes.iter().map(|c| c.0).collect(), r.groups.iter().map(|g| g.0.name()).collect())
}

fn ablations() -> String {
    let dir = tmp();
    let data = small_dataset(&dir.path().join("d"), 24);
    let grouping = grouping_or_default(data.grouping.as_ref(), data.num_classes).unwrap();
    let mut reports = Vec::new();
    for mask in 0..16u32 {
        let flags: Vec<&str> = ABLATION_FLAGS.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, f)| *f).collect();
        let network = NetworkConfig::default().ablate(&flags).unwrap();
        let run = RunConfig { data: data.root.clone(), epochs: 2, network, ..RunConfig::default() };
        let mut out = train(&run, &data, &dir.path().join(format!("r{mask}")), None).unwrap();
        assert_eq!(out.log.len(), 2);
        let report = evaluate(&mut out.model, &data.split("val"), &grouping, 95.0, 4).unwrap();
        assert!(report.classes.iter().all(|(_, r)| r.dice.is_some_and(|d| (0.0..=1.0).contains(&d))));
        reports.push(report);
    }
    assert!(reports.iter().all(|r| schema(r) == schema(&reports[0]) && r.to_csv().lines().count() == reports[0].to_csv().lines().count()));
    let dice: Vec<f64> = reports.iter().map(|r| r.mean_foreground_dice().unwrap()).collect();
    format!("16 variants, held-out dice {:.3}..{:.3}", dice.iter().cloned().fold(1.0, f64::min), dice.iter().cloned().fold(0.0, f64::max))
}

// ----- 9. diagnostics ------------------------------------------------------------------

fn header_lines(dir: &Path) -> Vec<String> {
    REPORT_FILES.iter().map(|f| std::fs::read_to_string(dir.join(f)).unwrap().lines().next().unwrap().to_string()).collect()
}

fn diagnostics() -> String {
    let dir = tmp();
    let data = small_dataset(&dir.path().join("d"), 12);
    let mut reports: Vec<DiagnosticsReport> = Vec::new();
    for mode in ["stagger", "unstagger"] {
        let flags: &[&str] = if mode == "stagger" { &[] } else { &["stagger"] };
        let network = NetworkConfig::default().ablate(flags).unwrap();
        let run = RunConfig { data: data.root.clone(), epochs: 1, network, ..RunConfig::default() };
        let out = dir.path().join(mode);
        train(&run, &data, &out, None).unwrap();
        let mut ck = Checkpoint::load(&out.join(LAST)).unwrap();
        let r = diagnose(&mut ck.model, &data.split("val"), 64, 8, 4).unwrap();
        write_diagnostics(&out.join("diag"), &r).unwrap();
        for row in &r.rows {
            assert!(row.identity_error() <= 1e-9, "{mode} {}: {}", row.name(), row.identity_error());
        }
        assert!(r.selected.iter().all(|c| c.pair.cnn_stage > c.pair.vit_stage));
        reports.push(r);
    }
    let names = |r: &DiagnosticsReport| r.rows.iter().map(|x| x.name()).collect::<Vec<_>>();
    assert_eq!(names(&reports[0]), names(&reports[1]));
    assert_eq!(reports[0].histograms.iter().map(|h| &h.0).collect::<Vec<_>>(), reports[1].histograms.iter().map(|h| &h.0).collect::<Vec<_>>());
    assert_eq!(header_lines(&dir.path().join("stagger/diag")), header_lines(&dir.path().join("unstagger/diag")));
    let pick = |r: &DiagnosticsReport| r.selected.iter().map(|c| format!("cnn{}-vit{}", c.pair.cnn_stage, c.pair.vit_stage)).collect::<Vec<_>>().join(" ");
    format!("selected [{}] vs [{}], 16 rows each", pick(&reports[0]), pick(&reports[1]))
}

// ----- 10. determinism and IO ------------------------------------------------------------

fn determinism_io() -> String {
    let dir = tmp();
    let data = small_dataset(&dir.path().join("d"), 9);
    let mut run = RunConfig { data: data.root.clone(), epochs: 2, ..RunConfig::default() };
    run.network.base_width = 4;
    let a = train(&run, &data, &dir.path().join("a"), None).unwrap();
    let b = train(&run, &data, &dir.path().join("b"), None).unwrap();
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!(x.loss.total.to_bits(), y.loss.total.to_bits());
    }
    assert!(a.model.params.bit_eq(&b.model.params));

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let t = rand_tensor(&[3, 224, 224], &mut rng);
    let p = dir.path().join("t.stnt");
    write_tensor(&p, &t).unwrap();
    assert!(read_tensor(&p).unwrap().bit_eq(&t));

    let mut ck = Checkpoint::load(&dir.path().join("a").join(LAST)).unwrap();
    let images = rand_tensor(&[2, 1, 64, 64], &mut rng);
    let mut model = a.model;
    assert!(predict_logits(&mut model, &images).unwrap().bit_eq(&predict_logits(&mut ck.model, &images).unwrap()));
    "two seeded runs bitwise equal; STNT and checkpoint roundtrips exact".into()
}

// ----- driver ----------------------------------------------------------------------------

type Criterion = (u32, &'static str, f64, fn() -> String);

const CRITERIA: [Criterion; 10] = [
    (1, "gradient suite", 300.0, gradients),
    (2, "oracle equivalence", 300.0, oracles),
    (3, "entropy identities", 300.0, entropy_identities),
    (4, "proposition 1 regimes", 300.0, proposition_one),
    (5, "shape and contract suite", 120.0, shapes),
    (6, "loss semantics", 60.0, loss_semantics),
    (7, "learning smoke", 3600.0, learning),
    (8, "ablation machinery", 1800.0, ablations),
    (9, "diagnostics pipeline", 300.0, diagnostics),
    (10, "determinism and IO", 120.0, determinism_io),
];

fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into())
}

fn main() {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, budget, check) in CRITERIA {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check));
        let secs = start.elapsed().as_secs_f64();
        let (ok, detail) = match result {
            Ok(d) if secs <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {budget:.0}s budget")),
            Err(e) => (false, panic_message(&e)),
        };
        failed += usize::from(!ok);
        println!("criterion {n:>2} {}  {name}: {detail} [{secs:.1}s]", if ok { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
