//! Cross-module invariants: operator PSD preservation on random tensors,
//! connectivity identities, pooled-kernel translation invariance, track
//! equivalence, and Monte Carlo consistency with the analytic kernels.

use nngp_core::arch::{ArchConfig, Connectivity, Nonlinearity, Padding, ReadoutKind, ReadoutSpec};
use nngp_core::data::{synth_dataset, SynthSpec};
use nngp_core::input::InputSet;
use nngp_core::mc::{class_kernel_distance, mc_estimate, mc_estimate_class, mc_readout};
use nngp_core::ops::{conv_step, conv_step_lcn, nonlin_step};
use nngp_core::propagate::{
    class_kernel_streamed, propagate, readout, readout_pool, readout_subsample, readout_vectorize,
    PropagateOptions, Track, TrackChoice,
};
use nngp_core::tensor::{CovFull, SpatialShape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_psd(n: usize, d: usize, seed: u64) -> CovFull {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = n * d;
    let rank = m + 3;
    let g: Vec<f64> = (0..m * rank).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut flat = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            flat[i * m + j] = (0..rank).map(|k| g[i * rank + k] * g[j * rank + k]).sum();
        }
    }
    CovFull::from_flat(&flat, n, SpatialShape::OneD(d), 0).unwrap()
}

fn random_inputs(n: usize, channels: usize, d: usize, seed: u64) -> InputSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| {
            (0..channels * d)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    InputSet::new(
        samples,
        (0..n as u64).collect(),
        channels,
        SpatialShape::OneD(d),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn flatten_unflatten_round_trips(seed in 0u64..1000, n in 1usize..4, d in 1usize..5) {
        let k = random_psd(n, d, seed);
        let flat = k.flatten();
        let back = CovFull::from_flat(&flat, n, SpatialShape::OneD(d), 0).unwrap();
        prop_assert_eq!(back.data(), k.data());
    }

    #[test]
    fn operator_chain_preserves_psd(seed in 0u64..1000) {
        let k = random_psd(2, 4, seed);
        let cfg = ArchConfig::plain(1, 1, 1.3, 0.1, Nonlinearity::Erf);
        let a = conv_step(&k, &cfg).unwrap();
        let c = nonlin_step(&a, cfg.nonlinearity).unwrap();
        for t in [&a, &c] {
            let (min_eig, trace) = t.min_eig_and_trace();
            prop_assert!(min_eig >= -1e-8 * trace);
        }
        let lcn = conv_step_lcn(&k, &cfg).unwrap();
        let (min_eig, trace) = lcn.min_eig_and_trace();
        prop_assert!(min_eig >= -1e-8 * trace);
    }

    #[test]
    fn class_kernels_are_symmetric_psd(seed in 0u64..500) {
        let x = random_inputs(4, 1, 5, seed);
        let cfg = ArchConfig::plain(2, 1, 1.1, 0.2, Nonlinearity::Relu)
            .with_readout(ReadoutKind::Pool);
        let trace = propagate(&x, &cfg, &PropagateOptions::default()).unwrap();
        let k = readout(&trace).unwrap();
        prop_assert!(k.symmetry_defect() <= 1e-12);
        let (min_eig, kernel_trace) = k.min_eig_and_trace();
        prop_assert!(min_eig >= -1e-8 * kernel_trace);
        for i in 0..k.n() {
            prop_assert!(k.get(i, i) > 0.0);
        }
    }
}

#[test]
fn lcn_and_cnn_class_kernels_are_identical() {
    // Without pooling the two connectivities give the same kernel, entrywise.
    for nl in [Nonlinearity::Relu, Nonlinearity::Erf] {
        let x = random_inputs(20, 1, 8, 101);
        let mut cnn = ArchConfig::plain(3, 1, 1.4, 0.15, nl);
        let mut lcn = cnn.clone();
        lcn.connectivity = Connectivity::Lcn;
        let opts = PropagateOptions {
            track: TrackChoice::Full,
            keep_snapshots: false,
        };
        let t_cnn = propagate(&x, &cnn, &opts).unwrap();
        let t_lcn = propagate(&x, &lcn, &opts).unwrap();
        for (a, b) in [
            (
                readout_vectorize(&t_cnn).unwrap(),
                readout_vectorize(&t_lcn).unwrap(),
            ),
            (
                readout_subsample(&t_cnn, 3).unwrap(),
                readout_subsample(&t_lcn, 3).unwrap(),
            ),
        ] {
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() <= 1e-12, "{nl:?}: {u} vs {v}");
            }
        }
        // Pooled kernels differ: pooling is the one readout that sees
        // pixel-pixel covariances.
        cnn.readout = ReadoutSpec::new(ReadoutKind::Pool);
        lcn.readout = ReadoutSpec::new(ReadoutKind::Pool);
        let p_cnn = readout_pool(&t_cnn).unwrap();
        let p_lcn = readout_pool(&t_lcn).unwrap();
        assert!(
            p_cnn
                .data()
                .iter()
                .zip(p_lcn.data())
                .any(|(u, v)| (u - v).abs() > 1e-9),
            "{nl:?}: pooled kernels should differ between cnn and lcn"
        );
    }
}

#[test]
fn pooled_kernel_is_translation_invariant() {
    // Every circular shift of a sample leaves its pooled kernel row intact.
    let d = 8;
    let ds = synth_dataset(
        &SynthSpec::ShiftFamily {
            bases: 2,
            shifts: d,
            channels: 1,
            width: d,
        },
        7,
    )
    .unwrap();
    let x = ds.to_input_set().unwrap();
    let cfg = ArchConfig::plain(2, 1, 1.2, 0.1, Nonlinearity::Erf).with_readout(ReadoutKind::Pool);
    let opts = PropagateOptions {
        track: TrackChoice::Full,
        keep_snapshots: false,
    };
    let k = readout(&propagate(&x, &cfg, &opts).unwrap()).unwrap();
    // Samples s*d + i are shifts of base s; invariance makes the kernel
    // depend only on the orbit, for either argument.
    let mut worst = 0.0f64;
    for base in 0..2 {
        for shift in 0..d {
            for other in 0..x.len() {
                let dev = (k.get(base * d + shift, other) - k.get(base * d, other)).abs();
                worst = worst.max(dev);
            }
        }
    }
    assert!(
        worst < 1e-10,
        "max pooled-kernel deviation under shifts: {worst:e}"
    );
}

#[test]
fn vectorized_kernel_is_not_translation_invariant_for_generic_input() {
    // Contrast case: without pooling, shifting one sample changes nothing
    // only because of the diagonal track -- the kernel is shift invariant in
    // the *joint* shift, not per-sample... here both samples shift, so the
    // vectorized kernel entry is preserved; shifting only one sample against
    // a non-shifted probe preserves it too (diagonal sums are shift
    // invariant under circular padding). Assert the actual property: the
    // vectorized kernel matches its own value on the shifted pair.
    let d = 6;
    let x = random_inputs(2, 1, d, 11);
    let shifted = x.with_shifted_sample(0, 2);
    let cfg = ArchConfig::plain(2, 1, 1.3, 0.2, Nonlinearity::Relu);
    let a = readout_vectorize(&propagate(&x, &cfg, &PropagateOptions::default()).unwrap()).unwrap();
    let b = readout_vectorize(&propagate(&shifted, &cfg, &PropagateOptions::default()).unwrap())
        .unwrap();
    assert!((a.get(0, 0) - b.get(0, 0)).abs() < 1e-12);
    assert!(
        (a.get(0, 1) - b.get(0, 1)).abs() > 1e-6,
        "cross entries should move"
    );
}

#[test]
fn valid_padding_collapse_equals_center_subsample() {
    // When the readout convolution brings the valid-padding trace to a
    // single pixel, the vectorized kernel equals the circular-padding
    // subsample kernel at the surviving pixel's lineage.
    let d = 7;
    let depth = 2; // sizes 7 -> 5 -> 3, readout conv -> 1
    let x = random_inputs(4, 1, d, 13);
    let mut valid_cfg = ArchConfig::plain(depth, 1, 1.2, 0.15, Nonlinearity::Erf);
    valid_cfg.padding = Padding::Valid;
    let circ_cfg = ArchConfig::plain(depth, 1, 1.2, 0.15, Nonlinearity::Erf);
    let center = depth + 1; // lineage shifts by half_width (= 1) per convolution
    let k_valid =
        readout_vectorize(&propagate(&x, &valid_cfg, &PropagateOptions::default()).unwrap())
            .unwrap();
    let k_sub = readout_subsample(
        &propagate(&x, &circ_cfg, &PropagateOptions::default()).unwrap(),
        center,
    )
    .unwrap();
    for (a, b) in k_valid.data().iter().zip(k_sub.data()) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn streamed_kernel_matches_materialized_on_two_d_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let samples: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..2 * 12).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let x = InputSet::new(samples, vec![0, 1, 2], 2, SpatialShape::TwoD(3, 4)).unwrap();
    let mut cfg = ArchConfig::plain(2, 1, 1.1, 0.1, Nonlinearity::Erf);
    cfg.padding = Padding::Same;
    let trace = propagate(&x, &cfg, &PropagateOptions::default()).unwrap();
    assert_eq!(trace.track, Track::Diag);
    let materialized = readout(&trace).unwrap();
    let streamed = class_kernel_streamed(&x, &cfg).unwrap();
    for (a, b) in materialized.data().iter().zip(streamed.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn mc_lcn_estimate_converges_to_cnn_kernel() {
    // The Monte Carlo LCN estimate of the vectorized kernel approaches the
    // analytic CNN kernel as Mn grows; they share the pixel diagonal.
    let x = random_inputs(5, 1, 6, 19);
    let cnn = ArchConfig::plain(1, 1, 1.5, 0.1, Nonlinearity::Erf);
    let mut lcn = cnn.clone();
    lcn.connectivity = Connectivity::Lcn;
    let analytic =
        readout_vectorize(&propagate(&x, &cnn, &PropagateOptions::default()).unwrap()).unwrap();
    let d_small =
        class_kernel_distance(&mc_estimate_class(&x, &lcn, 8, 4, 5).unwrap(), &analytic).unwrap();
    let d_large =
        class_kernel_distance(&mc_estimate_class(&x, &lcn, 128, 64, 5).unwrap(), &analytic)
            .unwrap();
    assert!(d_large < d_small, "Mn 32: {d_small}, Mn 8192: {d_large}");
    assert!(d_large < 1e-2, "large-Mn distance {d_large}");
}

#[test]
fn constant_mn_iso_lines_agree() {
    // Distances at equal Mn agree within a factor of 3 once n >= 16.
    let x = random_inputs(6, 1, 5, 23);
    let cfg = ArchConfig::plain(1, 1, 1.3, 0.1, Nonlinearity::Erf);
    let analytic =
        readout_vectorize(&propagate(&x, &cfg, &PropagateOptions::default()).unwrap()).unwrap();
    let mut distances = Vec::new();
    for (n, m) in [(16usize, 64usize), (32, 32), (64, 16), (128, 8)] {
        let mut per_seed = Vec::new();
        for seed in 0..4u64 {
            let est = mc_estimate_class(&x, &cfg, n, m, 1000 + seed).unwrap();
            per_seed.push(class_kernel_distance(&est, &analytic).unwrap());
        }
        distances.push(per_seed.iter().sum::<f64>() / per_seed.len() as f64);
    }
    let lo = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = distances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(hi / lo < 3.0, "iso-line spread {lo:e} .. {hi:e}");
}

#[test]
fn tensor_estimate_and_class_estimate_agree_through_readout() {
    let x = random_inputs(4, 1, 4, 29);
    let cfg = ArchConfig::plain(1, 1, 1.2, 0.2, Nonlinearity::Relu).with_readout(ReadoutKind::Pool);
    let est = mc_estimate(&x, &cfg, 16, 4, 77, Track::Full, None).unwrap();
    let via_tensor = mc_readout(&est, &cfg).unwrap();
    let via_class = mc_estimate_class(&x, &cfg, 16, 4, 77).unwrap();
    for (a, b) in via_tensor.data().iter().zip(via_class.data()) {
        assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
    }
}

#[test]
fn two_d_mc_estimate_converges_to_analytic() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let samples: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let x = InputSet::new(samples, vec![0, 1, 2, 3], 2, SpatialShape::TwoD(3, 3)).unwrap();
    let mut cfg = ArchConfig::plain(1, 1, 1.4, 0.1, Nonlinearity::Erf);
    cfg.padding = Padding::Same;
    let analytic =
        readout_vectorize(&propagate(&x, &cfg, &PropagateOptions::default()).unwrap()).unwrap();
    let d_small =
        class_kernel_distance(&mc_estimate_class(&x, &cfg, 8, 4, 3).unwrap(), &analytic).unwrap();
    let d_large =
        class_kernel_distance(&mc_estimate_class(&x, &cfg, 128, 32, 3).unwrap(), &analytic)
            .unwrap();
    assert!(
        d_large < d_small,
        "2d estimate should tighten: {d_small} -> {d_large}"
    );
    assert!(d_large < 2e-2, "2d large-Mn distance {d_large}");
}
