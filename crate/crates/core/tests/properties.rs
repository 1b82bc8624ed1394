use mvlasov::characteristics::{CommonNoise, Direction, FlowMap};
use mvlasov::coefficients::{Coefficients, InteractionDrift};
use mvlasov::field::{l1_distance, pair, DensityField, Field};
use mvlasov::grid::{Grid1D, TimeGrid};
use mvlasov::mild::MildSolver;
use mvlasov::particles::{simulate, Record};
use mvlasov::sensitivity::{build_propagator, propagate_first_variation};
use mvlasov::spde::{sample_path, PathSolver};
use proptest::prelude::*;

fn noise() -> impl Strategy<Value = CommonNoise> {
    (0..4usize, 0.2f64..1.5).prop_map(|(k, c)| match k {
        0 => CommonNoise::Constant(c),
        1 => CommonNoise::Linear(c),
        2 => CommonNoise::Sine(c),
        _ => CommonNoise::BoundedOdd(c),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn flow_is_a_group(noise in noise(), t in -1.0f64..1.0, s in -1.0f64..1.0, x in -3.0f64..3.0) {
        let f = FlowMap::new(noise);
        let direct = f.flow_solve(t + s, x).unwrap().z;
        let composed = f.flow_solve(t, f.flow_solve(s, x).unwrap().z).unwrap().z;
        prop_assert!((direct - composed).abs() <= 1e-8);
        let back = f.flow_solve(-t, x).unwrap();
        let g = f.gain(-t, x).unwrap() * f.gain(t, back.z).unwrap();
        prop_assert!((g - 1.0).abs() <= 1e-8);
        prop_assert_eq!(f.flow_solve(0.0, x).unwrap().z, x);
    }

    #[test]
    fn pairing_with_one_is_mass(mean in -2.0f64..2.0, std in 0.3f64..2.0, mass in 0.1f64..3.0) {
        let grid = Grid1D::new(-10.0, 10.0, 301).unwrap();
        let y = DensityField::gaussian(grid, mean, std, mass).unwrap();
        let one = DensityField::from_fn(grid, 0.0, |_| 1.0).unwrap();
        prop_assert!((pair(&one, &y).unwrap() - y.mass()).abs() <= 1e-14 * mass.max(1.0));
        prop_assert_eq!(l1_distance(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn brownian_paths_start_at_zero_and_coarsen_by_subsampling(seed in any::<u64>(), factor in 1usize..5) {
        let time = TimeGrid::new(1.0, 8 * factor).unwrap();
        let path = sample_path(seed, time, 2).unwrap();
        let coarse = path.coarsened(factor).unwrap();
        for j in 0..2 {
            prop_assert_eq!(path.component(j)[0], 0.0);
            for (k, w) in coarse.component(j).iter().enumerate() {
                prop_assert_eq!(*w, path.component(j)[k * factor]);
            }
        }
        let again = sample_path(seed, time, 2).unwrap();
        prop_assert_eq!(again.component(1), path.component(1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn forward_conjugation_preserves_mass(w in -1.0f64..1.0, mean in -1.0f64..1.0) {
        let grid = Grid1D::new(-10.0, 10.0, 1001).unwrap();
        let v = DensityField::gaussian(grid, mean, 1.0, 1.0).unwrap();
        let f = FlowMap::new(CommonNoise::BoundedOdd(0.8));
        for dir in [Direction::Forward, Direction::Inverse] {
            let out = f.conjugate(&v, w, dir).unwrap();
            prop_assert!((out.mass() - 1.0).abs() <= 1e-6, "{}", out.mass());
        }
    }

    #[test]
    fn mild_solutions_keep_mass_and_sign(mean in -1.0f64..1.0, std in 0.5f64..1.1, rate in 0.0f64..0.5) {
        let grid = Grid1D::new(-10.0, 10.0, 401).unwrap();
        let coeffs = Coefficients::heat(1.0).unwrap().with_drift(InteractionDrift::mean_reversion(rate));
        let solver = MildSolver::new(grid, TimeGrid::new(1.0, 50).unwrap(), coeffs).unwrap();
        let phi = solver.solve(&DensityField::gaussian(grid, mean, std, 1.0).unwrap(), 1e-8).unwrap();
        for f in phi.fields() {
            prop_assert!((f.mass() - 1.0).abs() <= 1e-6);
            prop_assert!(f.min_value() >= -1e-12);
        }
    }

    #[test]
    fn first_variation_carries_unit_mass(x in -2.0f64..2.0) {
        let grid = Grid1D::new(-10.0, 10.0, 201).unwrap();
        let coeffs = Coefficients::heat(1.0).unwrap().with_drift(InteractionDrift::mean_reversion(0.5));
        let solver = MildSolver::new(grid, TimeGrid::new(0.5, 20).unwrap(), coeffs).unwrap();
        let phi = solver.solve(&DensityField::gaussian(grid, 0.0, 1.0, 1.0).unwrap(), 1e-12).unwrap();
        let prop = build_propagator(&solver, &phi).unwrap();
        let xi = propagate_first_variation(&prop, &[x]).unwrap();
        for m in xi.masses(0) {
            prop_assert!((m - 1.0).abs() <= 1e-5, "{m}");
        }
    }

    #[test]
    fn pathwise_solutions_conserve_mass(seed in 0u64..1000, noise in noise()) {
        let grid = Grid1D::new(-10.0, 10.0, 1001).unwrap();
        let time = TimeGrid::new(0.5, 50).unwrap();
        let coeffs = Coefficients::heat(1.0).unwrap().with_drift(InteractionDrift::mean_reversion(1.0));
        let noise = match noise {
            CommonNoise::Linear(c) => CommonNoise::Linear(c.min(0.6)),
            other => other,
        };
        let solver = PathSolver::new(grid, time, coeffs, FlowMap::new(noise)).unwrap();
        let y = DensityField::gaussian(grid, 0.3, 0.8, 1.0).unwrap();
        let sol = solver.solve(&y, &sample_path(seed, time, 1).unwrap()).unwrap();
        for m in sol.masses() {
            prop_assert!((m - 1.0).abs() <= 1e-5, "{m}");
        }
    }
}

#[test]
fn particle_ensembles_do_not_depend_on_worker_count() {
    let grid = Grid1D::new(-8.0, 8.0, 401).unwrap();
    let time = TimeGrid::new(0.2, 20).unwrap();
    let coeffs = Coefficients::heat(1.0)
        .unwrap()
        .with_drift(InteractionDrift::mean_reversion(1.0));
    let y = DensityField::gaussian(grid, 0.0, 1.0, 1.0).unwrap();
    let path = sample_path(5, time, 1).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            simulate(
                5000,
                &y,
                Some(&coeffs.diffusion),
                &coeffs.drift,
                &CommonNoise::Sine(0.5),
                &path,
                3,
                Record::All,
            )
            .unwrap()
        })
    };
    let (a, b) = (run(1), run(4));
    for k in 0..=time.steps() {
        assert_eq!(a.positions(k), b.positions(k));
    }
}

#[test]
fn rigid_translation_without_idiosyncratic_noise() {
    let grid = Grid1D::new(-8.0, 8.0, 401).unwrap();
    let time = TimeGrid::new(0.5, 50).unwrap();
    let y = DensityField::gaussian(grid, 0.0, 1.0, 1.0).unwrap();
    let path = sample_path(8, time, 1).unwrap();
    let e = simulate(
        200,
        &y,
        None,
        &InteractionDrift::none(),
        &CommonNoise::Constant(0.7),
        &path,
        1,
        Record::All,
    )
    .unwrap();
    let start = e.positions(0).unwrap();
    for k in 0..=time.steps() {
        let shift = 0.7 * path.component(0)[k];
        for (x, x0) in e.positions(k).unwrap().iter().zip(start) {
            assert!((x - x0 - shift).abs() < 1e-12);
        }
    }
}
