use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snet_core::info::*;
use snet_core::{Error, Tensor};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn random_masses(rng: &mut ChaCha8Rng, n: usize, sparse: bool) -> Vec<f64> {
    let mut m: Vec<f64> = (0..n).map(|_| if sparse && rng.random::<f64>() < 0.3 { 0.0 } else { rng.random::<f64>() }).collect();
    if m.iter().all(|&v| v == 0.0) {
        m[0] = 1.0;
    }
    let t: f64 = m.iter().sum();
    m.iter_mut().for_each(|v| *v /= t);
    // Fix rounding so the masses pass the 1e-12 normalization check.
    let r = 1.0 - m.iter().sum::<f64>();
    let i = (0..n).max_by(|&x, &y| m[x].total_cmp(&m[y])).unwrap();
    m[i] += r;
    m
}

/// Entropy in bits computed with natural logs, independent of the crate's helper.
fn h_nat(masses: impl IntoIterator<Item = f64>) -> f64 {
    -masses.into_iter().filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>() / std::f64::consts::LN_2
}

// ----- entropy -------------------------------------------------------------------

#[test]
fn entropy_of_coin_uniform_and_skewed() {
    assert_eq!(entropy(&Histogram::from_masses(vec![0.5, 0.5]).unwrap()), 1.0);
    assert_eq!(entropy(&Histogram::from_masses(vec![0.25; 4]).unwrap()), 2.0);
    let h = entropy(&Histogram::from_masses(vec![0.25, 0.75]).unwrap());
    let oracle = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln()) / 2f64.ln();
    assert!(close(h, oracle, 1e-15));
    assert!(close(h, 0.811278, 1e-6));
}

#[test]
fn zero_mass_bins_contribute_nothing() {
    assert_eq!(entropy(&Histogram::from_masses(vec![0.0, 1.0, 0.0]).unwrap()), 0.0);
}

#[test]
fn unnormalized_masses_are_data_errors() {
    assert!(matches!(Histogram::from_masses(vec![0.5, 0.4]), Err(Error::Data(_))));
    assert!(matches!(Histogram::from_masses(vec![1.5, -0.5]), Err(Error::Data(_))));
}

#[test]
fn histogram_from_samples_uses_equal_width_bins() {
    let h = Histogram::from_samples(&[0.0, 1.0, 2.0, 3.0, 3.0, 4.0], 4).unwrap();
    assert_eq!(h.edges(), &[0.0, 1.0, 2.0, 3.0, 4.0]);
    // The maximum lands in the last bin.
    let expect = [1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 0.5];
    for (m, e) in h.masses().iter().zip(expect) {
        assert!(close(*m, e, 1e-15));
    }
}

#[test]
fn constant_samples_fill_a_single_bin() {
    let h = Histogram::from_samples(&[2.5; 10], 8).unwrap();
    assert_eq!(h.entropy(), 0.0);
}

// ----- joint entropy and MI ------------------------------------------------------

#[test]
fn independent_fair_bits_table() {
    let t = JointTable::new(2, 2, vec![0.25; 4]).unwrap();
    assert_eq!(t.joint_entropy(), 2.0);
    assert_eq!(t.mutual_information(), 0.0);
}

#[test]
fn copied_variable_table() {
    let t = JointTable::new(2, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
    assert_eq!(t.joint_entropy(), t.entropy_a());
    assert_eq!(t.mutual_information(), t.entropy_a());
    assert_eq!(t.entropy_a(), 1.0);
}

#[test]
fn random_4x4_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = JointTable::new(4, 4, random_masses(&mut rng, 16, false)).unwrap();
    let lhs = t.entropy_a() + t.entropy_b() - t.mutual_information();
    assert!(close(lhs, t.joint_entropy(), 1e-12));
    // Cross-check the joint entropy against a natural-log recomputation.
    let direct = {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        h_nat(random_masses(&mut rng, 16, false))
    };
    assert!(close(t.joint_entropy(), direct, 1e-12));
}

#[test]
fn sample_based_estimators_share_binning() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
    let b: Vec<f64> = a.iter().map(|&x| x * x + 0.1 * rng.random::<f64>()).collect();
    let ha = Histogram::from_samples(&a, 16).unwrap().entropy();
    let hb = Histogram::from_samples(&b, 16).unwrap().entropy();
    let hj = joint_entropy(&a, &b, 16).unwrap();
    let mi = mutual_information(&a, &b, 16).unwrap();
    assert!(close(ha + hb - mi, hj, 1e-9));
    assert!(mi > 0.5);
}

#[test]
fn mismatched_sample_counts_are_data_errors() {
    assert!(matches!(joint_entropy(&[1.0, 2.0], &[1.0], 4), Err(Error::Data(_))));
    assert!(matches!(mutual_information(&[1.0], &[1.0, 2.0], 4), Err(Error::Data(_))));
}

#[test]
fn identity_and_mi_sign_on_many_random_tables() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let (r, c) = (rng.random_range(1..7), rng.random_range(1..7));
        let t = JointTable::new(r, c, random_masses(&mut rng, r * c, true)).unwrap();
        assert!(close(t.entropy_a() + t.entropy_b() - t.mutual_information(), t.joint_entropy(), 1e-9));
        assert!(t.mutual_information() >= -1e-9);
    }
}

#[test]
fn product_tables_have_zero_mi() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let pa = random_masses(&mut rng, 3, true);
        let pb = random_masses(&mut rng, 5, true);
        let mut m: Vec<f64> = pa.iter().flat_map(|&x| pb.iter().map(move |&y| x * y)).collect();
        let r = 1.0 - m.iter().sum::<f64>();
        let i = (0..15).max_by(|&x, &y| m[x].total_cmp(&m[y])).unwrap();
        m[i] += r;
        let t = JointTable::new(3, 5, m).unwrap();
        assert!(t.mutual_information().abs() <= 1e-9);
    }
}

// ----- KL ------------------------------------------------------------------------

#[test]
fn kl_of_equal_histograms_is_zero() {
    let p = Histogram::from_masses(vec![0.2, 0.3, 0.5]).unwrap();
    assert_eq!(kl_divergence(&p, &p.clone(), KL_SMOOTHING).unwrap(), 0.0);
}

#[test]
fn kl_point_mass_against_uniform_is_one_bit() {
    let p = Histogram::from_masses(vec![1.0, 0.0]).unwrap();
    let q = Histogram::from_masses(vec![0.5, 0.5]).unwrap();
    assert!(close(kl_divergence(&p, &q, KL_SMOOTHING).unwrap(), 1.0, 1e-12));
    assert_eq!(kl_divergence(&p, &q, 0.0).unwrap(), 1.0);
}

#[test]
fn kl_is_asymmetric() {
    let p = Histogram::from_masses(vec![0.9, 0.1]).unwrap();
    let q = Histogram::from_masses(vec![0.5, 0.5]).unwrap();
    let (pq, qp) = (kl_divergence(&p, &q, KL_SMOOTHING).unwrap(), kl_divergence(&q, &p, KL_SMOOTHING).unwrap());
    let oracle_pq = (0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln()) / 2f64.ln();
    assert!(close(pq, oracle_pq, 1e-8));
    assert!((pq - qp).abs() > 0.1);
}

#[test]
fn kl_smoothing_keeps_empty_bins_finite() {
    let p = Histogram::from_masses(vec![0.5, 0.5]).unwrap();
    let q = Histogram::from_masses(vec![1.0, 0.0]).unwrap();
    let kl = kl_divergence(&p, &q, KL_SMOOTHING).unwrap();
    assert!(kl.is_finite() && kl > 10.0);
    assert!(matches!(kl_divergence(&p, &q, 0.0), Err(Error::Numeric(_))));
}

#[test]
fn kl_requires_identical_edges() {
    let p = Histogram::from_masses(vec![0.5, 0.5]).unwrap();
    let q = Histogram::new(vec![0.0, 0.5, 2.0], vec![0.5, 0.5]).unwrap();
    assert!(matches!(kl_divergence(&p, &q, KL_SMOOTHING), Err(Error::Data(_))));
}

#[test]
fn kl_is_non_negative_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..300 {
        let p = Histogram::from_masses(random_masses(&mut rng, 6, true)).unwrap();
        let q = Histogram::from_masses(random_masses(&mut rng, 6, true)).unwrap();
        assert!(kl_divergence(&p, &q, KL_SMOOTHING).unwrap() >= 0.0);
    }
}

// ----- Han's curve ---------------------------------------------------------------

/// Mean k-subset entropy per dimension via bitmask enumeration over an exact pmf.
fn han_oracle(pmf: &HashMap<Vec<u32>, f64>, d: usize) -> Vec<f64> {
    let mut sums = vec![0.0; d + 1];
    let mut counts = vec![0usize; d + 1];
    for mask in 1u32..(1 << d) {
        let k = mask.count_ones() as usize;
        let mut marg: HashMap<Vec<u32>, f64> = HashMap::new();
        for (x, &p) in pmf {
            let key: Vec<u32> = (0..d).filter(|i| mask >> i & 1 == 1).map(|i| x[i]).collect();
            *marg.entry(key).or_default() += p;
        }
        sums[k] += h_nat(marg.into_values());
        counts[k] += 1;
    }
    (1..=d).map(|k| sums[k] / counts[k] as f64 / k as f64).collect()
}

fn values(curve: &[(usize, f64)]) -> Vec<f64> {
    curve.iter().map(|&(_, v)| v).collect()
}

#[test]
fn han_curve_of_independent_bits_is_flat() {
    let x = DiscreteSampleSet::uniform_product(vec![2, 2, 2]).unwrap();
    let c = han_curve(&x, HanMode::Exhaustive).unwrap();
    assert_eq!(c.iter().map(|&(k, _)| k).collect::<Vec<_>>(), [1, 2, 3]);
    assert_eq!(values(&c), [1.0, 1.0, 1.0]);
}

#[test]
fn han_curve_of_copied_bit() {
    let x = DiscreteSampleSet::new(vec![vec![0, 0, 0], vec![1, 1, 1]], vec![2, 2, 2]).unwrap();
    let c = values(&han_curve(&x, HanMode::Exhaustive).unwrap());
    assert_eq!(c[0], 1.0);
    assert_eq!(c[1], 0.5);
    assert!(close(c[2], 1.0 / 3.0, 1e-15));
}

#[test]
fn han_curve_matches_enumeration_oracle_on_weighted_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let support = DiscreteSampleSet::uniform_product(vec![3; 4]).unwrap();
    let w = random_masses(&mut rng, support.len(), true);
    let x = DiscreteSampleSet::weighted(support.rows().to_vec(), vec![3; 4], w.clone()).unwrap();
    let pmf: HashMap<Vec<u32>, f64> = support.rows().iter().cloned().zip(w).collect();
    let c = values(&han_curve(&x, HanMode::Exhaustive).unwrap());
    for (a, b) in c.iter().zip(han_oracle(&pmf, 4)) {
        assert!(close(*a, b, 1e-12), "{a} vs {b}");
    }
    assert!(is_non_increasing(&han_curve(&x, HanMode::Exhaustive).unwrap(), 1e-9));
}

#[test]
fn han_curve_is_non_increasing_on_random_variables() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..500 {
        let d = rng.random_range(1..=6);
        let alphabet: Vec<u32> = (0..d).map(|_| rng.random_range(2..=3)).collect();
        let n = rng.random_range(1..80);
        let rows: Vec<Vec<u32>> = (0..n).map(|_| alphabet.iter().map(|&a| rng.random_range(0..a)).collect()).collect();
        let x = DiscreteSampleSet::new(rows, alphabet).unwrap();
        let c = han_curve(&x, HanMode::Exhaustive).unwrap();
        assert_eq!(c.len(), d);
        assert!(is_non_increasing(&c, 1e-9), "{c:?}");
    }
}

#[test]
fn han_curve_refuses_large_exhaustive_runs() {
    let x = DiscreteSampleSet::new(vec![vec![0; 13]], vec![2; 13]).unwrap();
    assert!(matches!(han_curve(&x, HanMode::Exhaustive), Err(Error::Usage(_))));
    let c = han_curve(&x, HanMode::Sampled { subsets: 8, seed: 1 }).unwrap();
    assert_eq!(c.len(), 13);
    assert!(c.iter().all(|&(_, v)| v == 0.0));
}

#[test]
fn sampled_mode_is_exact_when_it_covers_all_subsets() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let rows: Vec<Vec<u32>> = (0..50).map(|_| (0..4).map(|_| rng.random_range(0..3)).collect()).collect();
    let x = DiscreteSampleSet::new(rows, vec![3; 4]).unwrap();
    assert_eq!(han_curve(&x, HanMode::Sampled { subsets: 6, seed: 0 }).unwrap(), han_curve(&x, HanMode::Exhaustive).unwrap());
}

#[test]
fn sample_set_rejects_out_of_alphabet_symbols() {
    assert!(matches!(DiscreteSampleSet::new(vec![vec![0, 2]], vec![2, 2]), Err(Error::Data(_))));
    assert!(matches!(DiscreteSampleSet::new(vec![], vec![2]), Err(Error::Data(_))));
    assert!(matches!(DiscreteSampleSet::new(vec![vec![0]], vec![2, 2]), Err(Error::Data(_))));
}

// ----- Jensen bound --------------------------------------------------------------

fn dice() -> (Vec<u32>, Vec<u32>) {
    (0..36).map(|i| (i / 6, i % 6)).unzip()
}

#[test]
fn concatenation_is_lossless() {
    let (a, b) = dice();
    let r = jensen_bound_check(&a, &b, None, |x, y| (x as u64) << 32 | y as u64).unwrap();
    assert_eq!(r.h_fused, r.h_joint);
    assert!(r.bound_holds);
}

#[test]
fn constant_fusion_has_zero_entropy() {
    let (a, b) = dice();
    let r = jensen_bound_check(&a, &b, None, |_, _| 7).unwrap();
    assert_eq!(r.h_fused, 0.0);
    assert!(r.bound_holds);
}

#[test]
fn sum_of_two_dice() {
    let (a, b) = dice();
    let r = jensen_bound_check(&a, &b, None, |x, y| (x + y) as u64).unwrap();
    // Sum s in 2..=12 has (6 - |s - 7|) of the 36 outcomes.
    let oracle = h_nat((2..=12).map(|s: i32| (6 - (s - 7).abs()) as f64 / 36.0));
    assert!(close(r.h_fused, oracle, 1e-12));
    assert!(close(r.h_joint, 36f64.log2(), 1e-12));
    assert!(r.h_fused < r.h_joint && r.bound_holds);
}

#[test]
fn random_fusion_functions_never_violate_the_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..500 {
        let (ka, kb) = (rng.random_range(1..6u32), rng.random_range(1..6u32));
        let table: Vec<u64> = (0..ka * kb).map(|_| rng.random_range(0..6)).collect();
        let n = rng.random_range(1..60);
        let a: Vec<u32> = (0..n).map(|_| rng.random_range(0..ka)).collect();
        let b: Vec<u32> = (0..n).map(|_| rng.random_range(0..kb)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.01).collect();
        let f = |x: u32, y: u32| table[(x * kb + y) as usize];
        assert!(jensen_bound_check(&a, &b, None, f).unwrap().bound_holds);
        assert!(jensen_bound_check(&a, &b, Some(&w), f).unwrap().bound_holds);
    }
}

// ----- Proposition 1 regimes -----------------------------------------------------

#[test]
fn dependent_regime_with_redundant_fused_dimension() {
    let r = proposition1_sim(Regime::Dependent, 3, 3, FusedDim::Fixed(5), 1).unwrap();
    assert_eq!(r.n_star, 3);
    assert_eq!(r.expected, Direction::Greater);
    assert!(r.per_dim_optimal > r.per_dim_fused);
    assert!(r.holds());
}

#[test]
fn independent_regime_with_small_fused_dimension() {
    let r = proposition1_sim(Regime::Independent, 3, 3, FusedDim::Fixed(4), 1).unwrap();
    assert_eq!(r.n_star, 6);
    assert_eq!(r.expected, Direction::Less);
    assert!(r.per_dim_optimal < r.per_dim_fused);
    assert!(r.holds());
}

#[test]
fn matched_regime_agrees_within_tolerance() {
    let r = proposition1_sim(Regime::Correlated { copy_prob: 0.5 }, 4, 4, FusedDim::Matched, 2).unwrap();
    assert_eq!(r.n, r.n_star);
    assert!((r.per_dim_optimal - r.per_dim_fused).abs() <= 0.05 * r.per_dim_optimal);
    assert!(r.holds());
}

#[test]
fn regimes_hold_across_seeds() {
    let count = |regime, a, b, n| (0..100u64).filter(|&s| proposition1_sim(regime, a, b, n, s).unwrap().holds()).count();
    assert!(count(Regime::Independent, 3, 2, FusedDim::Fixed(3)) >= 95);
    assert!(count(Regime::Correlated { copy_prob: 0.5 }, 3, 3, FusedDim::Matched) >= 95);
    assert!(count(Regime::Dependent, 2, 3, FusedDim::Fixed(4)) >= 95);
}

#[test]
fn proposition1_rejects_bad_configs() {
    assert!(matches!(proposition1_sim(Regime::Independent, 0, 3, FusedDim::Fixed(2), 0), Err(Error::Config(_))));
    assert!(matches!(proposition1_sim(Regime::Correlated { copy_prob: 1.5 }, 2, 2, FusedDim::Matched, 0), Err(Error::Config(_))));
    assert!(matches!(proposition1_sim(Regime::Independent, 2, 2, FusedDim::Fixed(0), 0), Err(Error::Config(_))));
}

// ----- layer pair selection ------------------------------------------------------

fn map(rng: &mut ChaCha8Rng, c: usize, s: usize, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_fn(&[2, c, s, s], |_| f(rng.random::<f64>()))
}

fn random_features(seed: u64) -> StageFeatures {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
    let scale: Vec<f64> = (0..8).map(|_| rng.random_range(0.2..3.0)).collect();
    let cnn = (0..4).map(|i| map(&mut rng, 4 << i, 16 >> i, |u| shift[i] + scale[i] * u)).collect();
    let vit = (0..4).map(|i| map(&mut rng, 1 << i, 16 >> i, |u| shift[4 + i] + scale[4 + i] * u * u)).collect();
    StageFeatures::new(cnn, vit).unwrap()
}

#[test]
fn exact_histogram_copy_is_selected() {
    let mut f = random_features(4);
    let c3 = f.cnn[2].clone();
    let len = c3.len();
    // Same multiset of values, laid out on the ViT stage-1 grid.
    let (b, _, h, w) = f.vit[0].dims4().unwrap();
    let mut data: Vec<f64> = c3.data().iter().cycle().take(b * h * w * (len / (b * h * w)).max(1)).copied().collect();
    data.truncate(len);
    f.vit[0] = Tensor::new(&[b, len / (b * h * w), h, w], data).unwrap();
    let sel = select_stagger_pairs(&f, &[3], 64).unwrap();
    assert_eq!((sel[0].pair.cnn_stage, sel[0].pair.vit_stage), (3, 1));
    assert_eq!(sel[0].kl, 0.0);
}

#[test]
fn ties_go_to_the_lowest_vit_stage() {
    let mut f = random_features(5);
    let v = f.vit[0].clone();
    f.vit[1] = v.clone();
    f.vit[2] = v;
    let sel = select_stagger_pairs(&f, &[3, 4], 32).unwrap();
    assert_eq!(sel[0].pair.vit_stage, 1);
    assert_eq!(sel[1].pair.vit_stage, 1);
    assert_eq!(sel[1].candidates.len(), 3);
    assert_eq!(sel[1].candidates[0].1, sel[1].candidates[2].1);
}

#[test]
fn selected_pairs_respect_the_stagger_order() {
    for seed in 0..100 {
        for c in select_stagger_pairs(&random_features(seed), &[3, 4], 16).unwrap() {
            assert!(c.pair.cnn_stage > c.pair.vit_stage);
            let best = c.candidates.iter().map(|&(_, k)| k).fold(f64::INFINITY, f64::min);
            assert_eq!(c.kl, best);
        }
    }
}

#[test]
fn empty_features_are_usage_errors() {
    assert!(matches!(StageFeatures::new(vec![], vec![]), Err(Error::Usage(_))));
    let f = random_features(0);
    assert!(matches!(select_stagger_pairs(&f, &[1], 16), Err(Error::Usage(_))));
}

#[test]
fn report_rows_satisfy_the_identity_and_render() {
    let r = diagnose(&random_features(9), 16).unwrap();
    assert_eq!(r.rows.len(), 16);
    for row in &r.rows {
        assert!(row.identity_error() <= 1e-9, "{}: {}", row.name(), row.identity_error());
        assert!(row.mi >= -1e-9 && row.kl >= 0.0);
    }
    assert!(is_non_increasing(&r.han, 1e-9));
    // ViT stage j has 2^(j-1) channels here, fewer than the group count for j < 3.
    let j = r.selected[0].pair.vit_stage;
    assert_eq!(r.han.len(), HAN_GROUPS + (1usize << (j - 1)).min(HAN_GROUPS));
    let csv = r.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("pair,H_a,H_b,H_joint,MI,KL,bins"));
    assert_eq!(lines.next().unwrap().split(',').next(), Some("cnn1-vit1"));
    assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 7 && l.ends_with(",16")));
    assert_eq!(r.histograms.len(), 8);
    assert_eq!(r.histograms_csv().lines().count(), 1 + 8 * 16);
}

#[test]
fn per_channel_histograms() {
    let f = random_features(1);
    let h = layer_histograms(&f, 8, true).unwrap();
    let channels: usize = f.cnn.iter().chain(&f.vit).map(|t| t.shape()[1]).sum();
    assert_eq!(h.len(), channels);
    assert_eq!(h[0].0, "cnn1/c0");
    let csv = histograms_csv(&h);
    assert!(csv.starts_with("layer,bin_lo,bin_hi,mass\n"));
    for (_, hist) in &h {
        assert!((hist.masses().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn paired_means_pool_the_finer_map() {
    let a = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64);
    let b = Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64);
    let (pa, pb) = paired_location_means(&a, &b).unwrap();
    assert_eq!(pb, [0.0, 1.0, 2.0, 3.0]);
    // Channel 0 block means are 2.5, 4.5, 10.5, 12.5; channel 1 adds 16.
    assert_eq!(pa, [10.5, 12.5, 18.5, 20.5]);
    let (pb2, pa2) = paired_location_means(&b, &a).unwrap();
    assert_eq!((pa2, pb2), (pa, pb));
}
