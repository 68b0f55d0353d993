use loupe::autodiff::Graph;
use loupe::masks::io::{read_binary_mask, read_prob_mask, read_sidecar, write_binary_mask, write_prob_mask};
use loupe::masks::{
    binarize, budget, draw_uniform, expand_line_params, gen_cartesian_equispaced, gen_spectrum,
    gen_uniform_random, gen_variable_density, radial_distance, relax_with, renormalize, sample_relaxed,
    BinarizeMode, BinaryMask, MaskLayout, ProbMaskParams, ReadoutAxis,
};
use loupe::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![v.len()], v.to_vec()).unwrap()
}

fn random_probs(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[h, w], |_| rng.gen())
}

fn mean_radius(m: &BinaryMask) -> f64 {
    let (h, w) = (m.height(), m.width());
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            if m.get(y, x) {
                total += radial_distance(y, x, h, w);
            }
        }
    }
    total / m.count() as f64
}

#[test]
fn renormalize_examples() {
    let out = renormalize(&t(&[0.2, 0.8]), 0.25).unwrap();
    assert!((out.data()[0] - 0.1).abs() < 1e-12 && (out.data()[1] - 0.4).abs() < 1e-12);

    let out = renormalize(&t(&[0.2, 0.4]), 0.5).unwrap();
    assert!((out.data()[0] - 3.0 / 7.0).abs() < 1e-12);
    assert!((out.data()[1] - 4.0 / 7.0).abs() < 1e-12);

    let p = t(&[0.1, 0.3, 0.5]);
    assert_eq!(renormalize(&p, 0.3).unwrap().data(), p.data());
}

#[test]
fn renormalize_rejects_alpha_outside_unit_interval() {
    for alpha in [0.0, 1.0, -0.5, 1.5, f64::NAN] {
        assert!(renormalize(&t(&[0.5]), alpha).is_err());
    }
}

#[test]
fn probability_examples() {
    let zero = ProbMaskParams::new(Tensor::<f64>::zeros(&[3, 3]), 3, 3, MaskLayout::Grid, 5.0, 200.0, 0.25).unwrap();
    assert!(zero.probabilities().data().iter().all(|&p| p == 0.5));
    let one = ProbMaskParams::new(Tensor::<f64>::ones(&[2, 2]), 2, 2, MaskLayout::Grid, 5.0, 200.0, 0.25).unwrap();
    assert!((one.probabilities().data()[0] - 0.993307).abs() < 1e-6);

    let lines = ProbMaskParams::new(t(&[0.3, -0.2]), 2, 2, MaskLayout::Lines(ReadoutAxis::Rows), 5.0, 200.0, 0.5)
        .unwrap();
    let p = lines.probabilities();
    assert_eq!(p.data()[0], p.data()[2]);
    assert_eq!(p.data()[1], p.data()[3]);
    assert_ne!(p.data()[0], p.data()[1]);
}

#[test]
fn params_reject_bad_hyperparameters() {
    let o = Tensor::<f64>::zeros(&[2, 2]);
    assert!(ProbMaskParams::new(o.clone(), 2, 2, MaskLayout::Grid, 0.0, 200.0, 0.25).is_err());
    assert!(ProbMaskParams::new(o.clone(), 2, 2, MaskLayout::Grid, 5.0, -1.0, 0.25).is_err());
    assert!(ProbMaskParams::new(o.clone(), 2, 2, MaskLayout::Grid, 5.0, 200.0, 1.0).is_err());
    assert!(ProbMaskParams::new(o, 2, 2, MaskLayout::Lines(ReadoutAxis::Rows), 5.0, 200.0, 0.25).is_err());
}

#[test]
fn relaxed_examples() {
    let p = t(&[0.7, 0.4]);
    let u = t(&[0.2, 0.4]);
    let r = relax_with(&p, &u, 200.0).unwrap();
    assert!(r.values.data()[0] > 1.0 - 1e-6);
    assert_eq!(r.values.data()[1], 0.5);

    let a = sample_relaxed(&p, 200.0, &mut ChaCha8Rng::seed_from_u64(4));
    let b = sample_relaxed(&p, 200.0, &mut ChaCha8Rng::seed_from_u64(4));
    assert_eq!(a.values.data(), b.values.data());
}

#[test]
fn relaxed_sample_approaches_indicator() {
    let p = random_probs(64, 64, 5);
    let u: Tensor<f64> = draw_uniform(&[64, 64], &mut ChaCha8Rng::seed_from_u64(6));
    let gap = |s: f64| {
        let r = relax_with(&p, &u, s).unwrap();
        let n = p.len() as f64;
        r.values
            .data()
            .iter()
            .zip(p.data().iter().zip(u.data()))
            .map(|(v, (pi, ui))| (v - if ui < pi { 1.0 } else { 0.0 }).abs())
            .sum::<f64>()
            / n
    };
    let (g200, g2000) = (gap(200.0), gap(2000.0));
    assert!(g200 < 1e-2, "s=200 gap {g200}");
    assert!(g2000 < g200);
}

#[test]
fn binarize_examples() {
    let m = binarize(&t(&[0.9, 0.1, 0.8, 0.2]), 0.5, BinarizeMode::TopK).unwrap();
    assert_eq!(m.values(), &[1, 0, 1, 0]);

    let all = binarize(&random_probs(3, 5, 1), 1.0, BinarizeMode::TopK).unwrap();
    assert_eq!(all.count(), 15);

    let flat = binarize(&Tensor::full(&[2, 2], 0.25), 0.25, BinarizeMode::TopK).unwrap();
    assert_eq!(flat.values(), &[1, 0, 0, 0]);
    assert_eq!(flat.achieved_sparsity(), 0.25);

    assert!(binarize(&t(&[0.5]), 1.5, BinarizeMode::TopK).is_err());
}

#[test]
fn bernoulli_binarize_matches_probabilities_on_average() {
    let p = Tensor::full(&[64, 64], 0.3);
    let m = binarize(&p, 0.3, BinarizeMode::Bernoulli(11)).unwrap();
    assert!((m.achieved_sparsity() - 0.3).abs() < 0.03);
    let again = binarize(&p, 0.3, BinarizeMode::Bernoulli(11)).unwrap();
    assert_eq!(m, again);
}

#[test]
fn generator_examples() {
    let u = gen_uniform_random(4, 4, 0.5, 3).unwrap();
    assert_eq!(u.count(), 8);
    assert_eq!(u, gen_uniform_random(4, 4, 0.5, 3).unwrap());
    assert_eq!(gen_uniform_random(5, 3, 1.0, 3).unwrap().count(), 15);

    let c = gen_cartesian_equispaced(8, 8, 0.25, ReadoutAxis::Rows, 0).unwrap();
    let cols: Vec<usize> = (0..8).filter(|&x| c.get(0, x)).collect();
    assert_eq!(cols.len(), 2);
    assert_eq!(cols[1] - cols[0], 4);
    assert!(c.is_line_structured(ReadoutAxis::Rows));
    assert_eq!(gen_cartesian_equispaced(6, 8, 1.0, ReadoutAxis::Rows, 0).unwrap().count(), 48);

    let r = gen_cartesian_equispaced(8, 6, 0.5, ReadoutAxis::Columns, 2).unwrap();
    for y in 0..8 {
        let row: Vec<bool> = (0..6).map(|x| r.get(y, x)).collect();
        assert!(row.iter().all(|&b| b == row[0]));
    }
    assert!(r.get(4, 0) && r.get(3, 0));
    assert!(gen_cartesian_equispaced(8, 8, 0.25, ReadoutAxis::Rows, 2).is_err());
}

#[test]
fn variable_density_flat_profile_and_concentration() {
    let (h, w) = (32, 32);
    let (mut flat, mut steep) = (0.0, 0.0);
    for seed in 0..100 {
        let p0 = gen_variable_density(h, w, 0.25, 0.0, seed).unwrap();
        let p3 = gen_variable_density(h, w, 0.25, 3.0, seed).unwrap();
        assert_eq!(p0.count(), budget(0.25, h * w));
        assert_eq!(p3.count(), budget(0.25, h * w));
        flat += mean_radius(&p0);
        steep += mean_radius(&p3);
    }
    assert!(steep < flat, "p=3 radius {steep} vs p=0 {flat}");
    assert!(gen_variable_density(h, w, 0.25, -1.0, 0).is_err());
}

#[test]
fn spectrum_of_constant_images_selects_dc_and_ignores_order() {
    let mut vol = Tensor::<f64>::zeros(&[3, 2, 8, 8]);
    for s in 0..3 {
        for i in 0..64 {
            vol.data_mut()[s * 128 + i] = 0.2 + s as f64;
        }
    }
    let m = gen_spectrum([&vol], 1.0 / 64.0).unwrap();
    assert_eq!(m.count(), 1);
    assert!(m.get(4, 4));
    assert_eq!(gen_spectrum([&vol], 1.0).unwrap().count(), 64);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = Tensor::<f64>::from_fn(&[2, 8, 8], |_| rng.gen());
    let b = Tensor::<f64>::from_fn(&[2, 8, 8], |_| rng.gen());
    let forward = gen_spectrum([&a, &b], 0.3).unwrap();
    let reverse = gen_spectrum([&b, &a], 0.3).unwrap();
    assert_eq!(forward, reverse);

    let empty: [&Tensor<f64>; 0] = [];
    assert!(gen_spectrum(empty, 0.3).is_err());
}

#[test]
fn expand_line_examples_and_gradient() {
    let g = expand_line_params(&t(&[1.0, 2.0]), ReadoutAxis::Rows, 2, 2).unwrap();
    assert_eq!(g.data(), &[1.0, 2.0, 1.0, 2.0]);
    let g = expand_line_params(&t(&[1.0, 2.0, 3.0]), ReadoutAxis::Columns, 3, 2).unwrap();
    assert_eq!(g.data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    for x in 0..2 {
        let col: Vec<f64> = (0..3).map(|y| g.data()[y * 2 + x]).collect();
        assert_eq!(col, vec![1.0, 2.0, 3.0]);
    }
    assert!(expand_line_params(&t(&[1.0]), ReadoutAxis::Rows, 2, 2).is_err());

    // Gradient of the grid sum w.r.t. each line logit is the readout length.
    let params =
        ProbMaskParams::new(t(&[0.0; 6]), 5, 6, MaskLayout::Lines(ReadoutAxis::Rows), 1.0, 200.0, 0.5).unwrap();
    let mut graph = Graph::new();
    let o = graph.input(params.logits().clone());
    let grid = graph.expand(o, 0, 5).unwrap();
    let s = graph.sum(grid).unwrap();
    let grads = graph.backward_scalar(s).unwrap();
    assert!(grads.get(o).unwrap().data().iter().all(|&v| v == 5.0));
    let _ = params.probabilities_in_graph(&mut graph, o).unwrap();
}

#[test]
fn line_constrained_masks_stay_line_structured() {
    for axis in [ReadoutAxis::Rows, ReadoutAxis::Columns] {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params =
            ProbMaskParams::<f64>::init_at_sparsity(12, 10, MaskLayout::Lines(axis), 5.0, 200.0, 0.25, 0.5, &mut rng)
                .unwrap();
        let p = params.normalized_probabilities().unwrap();
        for y in 0..12 {
            for x in 0..10 {
                let (y0, x0) = match axis {
                    ReadoutAxis::Rows => (0, x),
                    ReadoutAxis::Columns => (y, 0),
                };
                assert_eq!(p.data()[y * 10 + x], p.data()[y0 * 10 + x0]);
            }
        }
        let m = params.binarize(BinarizeMode::TopK).unwrap();
        assert!(m.is_line_structured(axis));
        let l = axis.line_count(12, 10);
        assert_eq!(m.achieved_sparsity(), budget(0.25, l) as f64 / l as f64);
    }
}

#[test]
fn mask_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pgm");
    let m = gen_uniform_random(6, 10, 0.3, 2).unwrap();
    write_binary_mask(&path, &m, 0.3, "uniform", Some(2)).unwrap();
    assert_eq!(read_binary_mask(&path).unwrap(), m);
    let side = read_sidecar(&path).unwrap();
    assert_eq!((side.height, side.width, side.seed), (6, 10, Some(2)));
    assert_eq!(side.achieved_sparsity, m.achieved_sparsity());

    let p = random_probs(6, 10, 4);
    let ppath = dir.path().join("p.pgm");
    write_prob_mask(&ppath, &p, 0.3, "loupe", None).unwrap();
    let back = read_prob_mask(&ppath).unwrap();
    for (a, b) in back.data().iter().zip(p.data()) {
        assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn renormalize_hits_alpha_in_range_and_monotone(
        h in 1usize..24, w in 1usize..24, seed in any::<u64>(), k in 0usize..3
    ) {
        let alpha = [0.125, 0.25, 0.5][k];
        let p = random_probs(h, w, seed);
        let out = renormalize(&p, alpha).unwrap();
        prop_assert!((out.mean_f64() - alpha).abs() < 1e-6);
        prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        for i in 0..p.len() {
            for j in 0..p.len() {
                if p.data()[i] <= p.data()[j] {
                    prop_assert!(out.data()[i] <= out.data()[j]);
                }
            }
        }
    }

    #[test]
    fn relaxed_entries_strictly_inside_unit_interval(n in 1usize..200, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Tensor::<f64>::from_fn(&[n], |_| rng.gen());
        let r = sample_relaxed(&p, 5.0, &mut rng);
        prop_assert!(r.values.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn generators_are_budget_exact_and_reproducible(
        h in 2usize..40, w in 2usize..40, alpha in 0.05f64..1.0, seed in any::<u64>(), power in 0.0f64..4.0
    ) {
        let k = budget(alpha, h * w);
        let u = gen_uniform_random(h, w, alpha, seed).unwrap();
        prop_assert_eq!(u.count(), k);
        prop_assert_eq!(&u, &gen_uniform_random(h, w, alpha, seed).unwrap());
        // Points on the outermost radius have zero density when power > 0.
        let r: Vec<f64> = (0..h * w).map(|i| radial_distance(i / w, i % w, h, w)).collect();
        let r_max = r.iter().cloned().fold(0.0, f64::max);
        let reachable = if power > 0.0 { r.iter().filter(|&&v| v < r_max).count() } else { h * w };
        match gen_variable_density(h, w, alpha, power, seed) {
            Ok(v) => {
                prop_assert_eq!(v.count(), k);
                prop_assert_eq!(&v, &gen_variable_density(h, w, alpha, power, seed).unwrap());
            }
            Err(_) => prop_assert!(reachable < k),
        }
        prop_assert_eq!(binarize(&random_probs(h, w, seed), alpha, BinarizeMode::TopK).unwrap().count(), k);
        let lines = budget(alpha, w);
        let c = gen_cartesian_equispaced(h, w, alpha, ReadoutAxis::Rows, 0).unwrap();
        prop_assert_eq!(c.count(), lines * h);
        prop_assert!(c.is_line_structured(ReadoutAxis::Rows));
    }
}
