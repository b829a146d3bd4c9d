use proptest::prelude::*;

use subfootprint::beam::{discretize_footprint, region_energy_weights, BeamSpec};
use subfootprint::deconv::{convolve, deconvolve, DeconvOptions, SystemResponse};
use subfootprint::forward::{emit_pulse, LrcsSeries, Waveform};
use subfootprint::radiometry::{histogram, incidence_correct, merge_returns, range_correct};
use subfootprint::scene::{controlled_layout, segment_footprint, EdgeShape, SceneLayout};
use subfootprint::unmix::{solve_unmixing, EnergyDensityBasis, ReflectanceBasis, SolverOptions, UnmixingProblem};

fn decreasing_densities() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, 2..6).prop_map(|steps| {
        let mut d = Vec::with_capacity(steps.len());
        let mut level = 0.0;
        for s in steps.iter().rev() {
            level += s;
            d.push(level);
        }
        d.reverse();
        d
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn region_weights_sum_to_grid_energy(
        count in 2usize..=3,
        deg in 0.0f64..45.0,
        arc in any::<bool>(),
        a in 0.1f64..1.0,
        b in 0.1f64..1.0,
    ) {
        let grid = discretize_footprint(&BeamSpec::default(), 50.0, 6, 4.0).unwrap();
        let materials = [("A", a), ("B", b), ("C", 0.4)];
        let shape = if arc { EdgeShape::Arc } else { EdgeShape::Straight };
        let layout = controlled_layout(&materials[..count], count, 0.6, deg.to_radians(), shape).unwrap();
        let (seg, _) = segment_footprint(&grid, &layout).unwrap();
        let w = region_energy_weights(&grid, &seg).unwrap();
        let total: f64 = w.iter().sum();
        prop_assert!((total - grid.total_energy()).abs() <= 1e-9 * grid.total_energy());
        prop_assert!(w.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn layout_json_round_trips(count in 2usize..=3, deg in 0.0f64..45.0, arc in any::<bool>()) {
        let shape = if arc { EdgeShape::Arc } else { EdgeShape::Straight };
        let layout = controlled_layout(&[("A", 0.3), ("B", 0.9), ("C", 0.4)][..count], count, 0.6, deg.to_radians(), shape).unwrap();
        let back: SceneLayout = serde_json::from_str(&serde_json::to_string(&layout).unwrap()).unwrap();
        prop_assert_eq!(back.patches().len(), layout.patches().len());
        prop_assert!((back.incidence() - layout.incidence()).abs() < 1e-12);
        for (p, q) in back.patches().iter().zip(layout.patches()) {
            prop_assert_eq!(&p.label, &q.label);
            prop_assert!((p.tilt - q.tilt).abs() < 1e-12);
        }
    }

    #[test]
    fn convolution_multiplies_integrals(
        a in prop::collection::vec(0.0f64..5.0, 1..40),
        b in prop::collection::vec(0.0f64..5.0, 1..40),
    ) {
        let wa = Waveform::new(a, 0.2e-9, 0.0).unwrap();
        let wb = Waveform::new(b, 0.2e-9, 1e-9).unwrap();
        let c = convolve(&wa, &wb).unwrap();
        let expect = wa.integral() * wb.integral();
        prop_assert!((c.integral() - expect).abs() <= 1e-9 * expect.max(1e-30));
        prop_assert_eq!(c.len(), wa.len() + wb.len() - 1);
    }

    #[test]
    fn deconvolution_is_non_negative_and_refits(
        spikes in prop::collection::vec((0usize..60, 0.1f64..3.0), 1..4),
        gold in any::<bool>(),
    ) {
        let mut values = vec![0.0; 80];
        for (t, v) in &spikes {
            values[t + 10] += v;
        }
        let truth = LrcsSeries::new(values, 0.2e-9, 49.0).unwrap();
        let pulse = emit_pulse(4e-9, 0.2e-9).unwrap();
        let observed = convolve(&truth.to_waveform(), &pulse).unwrap();
        let mut opts = DeconvOptions::default();
        if gold {
            opts.algorithm = subfootprint::deconv::Algorithm::Gold;
        }
        let d = deconvolve(&observed, &SystemResponse::new(pulse).unwrap(), &opts).unwrap();
        prop_assert!(d.lrcs.values.iter().all(|v| *v >= 0.0));
        // Each scheme descends its own objective.
        let objective = if gold { &d.residuals } else { &d.divergences };
        prop_assert!(objective.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-15));
        let total = truth.total();
        prop_assert!((d.lrcs.total() - total).abs() <= 0.02 * total);
    }

    #[test]
    fn merging_preserves_above_floor_energy(values in prop::collection::vec(0.0f64..1.0, 1..60), gap in 0usize..4) {
        let l = LrcsSeries::new(values, 0.2e-9, 10.0).unwrap();
        let (merged, spans) = merge_returns(&l, 0.0, gap).unwrap();
        prop_assert!((merged.total() - l.total()).abs() <= 1e-9 * l.total().max(1e-30));
        prop_assert!(spans.windows(2).all(|w| w[1].start > w[0].end + gap));
        for (t, v) in merged.values.iter().enumerate() {
            prop_assert!(*v == 0.0 || spans.iter().any(|r| r.contains(&t)));
        }
    }

    #[test]
    fn radiometric_corrections_invert(i in 0.0f64..100.0, r in 1.0f64..500.0, reference in 1.0f64..500.0, deg in 0.0f64..80.0) {
        let back = range_correct(range_correct(i, r, reference).unwrap(), reference, r).unwrap();
        prop_assert!((back - i).abs() <= 1e-9 * i.max(1.0));
        let theta = deg.to_radians();
        prop_assert!((incidence_correct(i, theta).unwrap() * theta.cos() - i).abs() <= 1e-9 * i.max(1.0));
    }

    #[test]
    fn histogram_counts_every_value(values in prop::collection::vec(-1e3f64..1e3, 0..200), bins in 2usize..30) {
        let h = histogram(&values, bins).unwrap();
        prop_assert_eq!(h.total(), values.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    /// Ten or more occupied slices take the descent path rather than
    /// enumeration; its output must still satisfy every constraint.
    #[test]
    fn descent_solutions_are_feasible(
        values in prop::collection::vec(0.01f64..1.0, 10..16),
        densities in decreasing_densities(),
        seed in any::<u64>(),
    ) {
        let s = EnergyDensityBasis::new(densities, 0.5).unwrap();
        let psi = ReflectanceBasis::uniform(4).unwrap();
        let lrcs = LrcsSeries::new(values, 0.2e-9, 10.0).unwrap();
        let options = SolverOptions { seed, restarts: 1, ..Default::default() };
        let problem = UnmixingProblem::new(lrcs.clone(), psi.clone(), s.clone()).with_lambdas(1e-3, 1e-3).with_options(options);
        let r = solve_unmixing(&problem).unwrap();

        prop_assert_eq!(r.p1.len(), lrcs.len());
        prop_assert!(r.p1.iter().all(|&c| c < psi.len()));
        let sums = r.p2.column_sums();
        for (got, want) in sums.iter().zip(s.budgets()) {
            prop_assert!((got - want).abs() <= 1e-9 * want, "column sum {} vs {}", got, want);
        }
        for t in 0..lrcs.len() {
            prop_assert!(r.p2.row(t).iter().all(|v| *v >= 0.0));
        }
        prop_assert!(r.history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-15), "{:?}", r.history);
        prop_assert!(r.residual.is_finite() && r.residual >= 0.0);
    }
}
