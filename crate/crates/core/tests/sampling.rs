use rand::Rng;
use resx_core::flow::{sample, shift_time, TimeSchedule};
use resx_core::grid::Grid;
use resx_core::oracle::{mixture_velocity, velocity_loss, ExactOracle, MixtureSpec};
use resx_core::projection::downsample;
use resx_core::rng;

fn scalar_spec(spread: f64) -> MixtureSpec {
    MixtureSpec {
        data_spread: spread,
        canonical_resolution: 8,
        native_resolution: 8,
        ..MixtureSpec::testbed()
    }
}

fn scalar(v: f64) -> Grid {
    Grid::new(1, 1, 1, vec![v]).unwrap()
}

/// Self-normalized importance estimate of `E[x1 | x_t = x]` from draws of
/// `x1`, weighted by the Gaussian likelihood of `x` given `x1`. Returns the
/// implied velocity and its standard error.
fn monte_carlo_velocity(
    means: &[f64],
    weights: &[f64],
    spread: f64,
    x: f64,
    t: f64,
    n: usize,
    seed: u64,
) -> (f64, f64) {
    let mut r = rng::stream(seed, "mc", 0);
    let sd = 1.0 - t;
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = r.random();
        let mut k = 0;
        let mut acc = weights[0];
        while u >= acc && k + 1 < weights.len() {
            k += 1;
            acc += weights[k];
        }
        let z: f64 = r.sample(rand_distr::StandardNormal);
        let x1 = means[k] + spread * z;
        let w = (-0.5 * ((x - t * x1) / sd).powi(2)).exp();
        draws.push((w, x1));
    }
    let sw: f64 = draws.iter().map(|d| d.0).sum();
    let mean = draws.iter().map(|d| d.0 * d.1).sum::<f64>() / sw;
    let var = draws.iter().map(|d| (d.0 * (d.1 - mean)).powi(2)).sum::<f64>() / (sw * sw);
    ((mean - x) / sd, var.sqrt() / sd)
}

#[test]
fn scalar_velocity_matches_monte_carlo() {
    let spec = scalar_spec(0.6);
    let mix = spec.at_resolution(1).unwrap();
    let means: Vec<f64> = mix.means().iter().map(|m| m.data()[0]).collect();
    for (i, &(x, t)) in [(-1.0, 0.2), (0.4, 0.5), (1.5, 0.7)].iter().enumerate() {
        let exact = mixture_velocity(&scalar(x), t, &spec).unwrap().data()[0];
        let (mc, se) = monte_carlo_velocity(&means, mix.weights(), 0.6, x, t, 100_000, i as u64);
        assert!((exact - mc).abs() < 3.0 * se, "x={x} t={t}: {exact} vs {mc} ± {se}");
    }
}

#[test]
fn euler_error_is_first_order() {
    let mix = scalar_spec(0.5).at_resolution(4).unwrap();
    let oracle = ExactOracle(&mix);
    let x0 = Grid::standard_normal(mix.shape(), &mut rng::stream(4, "x0", 0));
    let reference = sample(&oracle, &TimeSchedule::uniform(4096).unwrap(), &x0, None).unwrap();
    let err = |n: usize| {
        sample(&oracle, &TimeSchedule::uniform(n).unwrap(), &x0, None).unwrap().rms_diff(&reference).unwrap()
    };
    let (coarse, fine) = (err(64), err(128));
    let ratio = fine / coarse;
    assert!((0.3..=0.7).contains(&ratio), "error ratio {ratio}");
}

#[test]
fn single_point_mass_has_zero_loss() {
    let spec = MixtureSpec {
        components: vec![resx_core::oracle::ComponentSpec { weight: 1.0, seed: 7 }],
        ..scalar_spec(0.0)
    };
    let mix = spec.at_resolution(4).unwrap();
    for t in [0.0, 0.3, 0.6, 0.95] {
        assert!(velocity_loss(&ExactOracle(&mix), &mix, t, 16, 2).unwrap() < 1e-10);
    }
}

#[test]
fn pooled_noise_variance_and_time_shift() {
    for s in [2usize, 4] {
        let mut r = rng::stream(11, "pool", s as u64);
        let trials = 2000;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for _ in 0..trials {
            let g = downsample(&Grid::standard_normal((1, 2 * s, 2 * s), &mut r), s).unwrap();
            sum_sq += g.data().iter().map(|v| v * v).sum::<f64>();
            count += g.len();
        }
        let var = sum_sq / count as f64;
        let target = 1.0 / (s * s) as f64;
        assert!((var / target - 1.0).abs() < 0.05, "s={s} var={var}");
    }
    assert_eq!(shift_time(0.5, 2.0), 1.0 / 3.0);
    assert_eq!(shift_time(0.3, 1.0), 0.3);
}
