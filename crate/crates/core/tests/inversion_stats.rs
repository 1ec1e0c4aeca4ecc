use flipconcept::denoiser::{build_denoiser, Denoiser};
use flipconcept::field::{Field, Rng};
use flipconcept::inversion::{
    ddim_invert, ddim_reconstruct, invert, noising_path, replay, variance, NoiseStats,
};
use flipconcept::schedule::{linear_schedule, NoiseSchedule};
use proptest::prelude::*;

fn schedule() -> NoiseSchedule {
    linear_schedule(50, 1e-4, 0.02).unwrap()
}

fn random_image(shape: &[usize], seed: u64) -> Field {
    let mut rng = Rng::new(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (rng.uniform() * 2.0 - 1.0) as f32).collect();
    Field::new(shape, data).unwrap()
}

#[test]
fn noising_path_marginals_match_closed_form() {
    let s = schedule();
    let x0 = random_image(&[4, 4], 11);
    let t = 25;
    let ab = s.alpha_bar(t);
    let runs = 2000;
    let n = x0.data().len();
    let mut sum = vec![0.0f64; n];
    let mut resid = Vec::with_capacity(runs * n);
    for seed in 0..runs as u64 {
        let path = noising_path(&x0, &s, &mut Rng::new(seed)).unwrap();
        for (i, (&x, &base)) in path[t - 1].data().iter().zip(x0.data()).enumerate() {
            sum[i] += f64::from(x);
            resid.push(f64::from(x) - ab.sqrt() * f64::from(base));
        }
    }
    let se = ((1.0 - ab) / runs as f64).sqrt();
    for (i, &base) in x0.data().iter().enumerate() {
        let mean = sum[i] / runs as f64;
        let dev = (mean - ab.sqrt() * f64::from(base)).abs();
        assert!(dev < 4.5 * se, "element {i}: deviation {dev} vs se {se}");
    }
    let pooled = resid.iter().sum::<f64>() / resid.len() as f64;
    assert!(pooled.abs() < 3.0 * se / (n as f64).sqrt());
    let var = resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64 - pooled * pooled;
    let rel = (var - (1.0 - ab)).abs() / (1.0 - ab);
    assert!(rel < 0.05, "variance {var} vs {}", 1.0 - ab);
}

#[test]
fn zeroed_noise_maps_replay_deterministically() {
    let s = schedule();
    let d = Denoiser::default();
    let cond = d.embed("a plain wall");
    let x0 = random_image(&[8, 8, 1], 3);
    let mut track = invert(&x0, &d, &cond, &s, &mut Rng::new(3)).unwrap();
    for z in &mut track.z {
        *z = Field::zeros(z.shape());
    }
    let mut x = track.x_t.clone();
    for t in (1..=s.steps()).rev() {
        let eps = d.predict_noise(&x, t, &cond, None).unwrap();
        x = s.posterior_mean(&x, &eps, t).unwrap();
    }
    let expected = x.add(&track.final_residual).unwrap();
    let got = replay(&track, &d, &cond, &s, None).unwrap();
    assert!(got.max_abs_diff(&expected).unwrap() < 1e-5);
}

#[test]
fn edit_friendly_beats_ddim_round_trip() {
    let s = schedule();
    let d = build_denoiser(5, 4, 32, 2).unwrap();
    let cond = d.embed("a red apple");
    let mut ef_var = 0.0;
    let mut ddim_var = 0.0;
    for seed in 0..10u64 {
        let x0 = random_image(&[8, 8, 1], 100 + seed);
        let track = invert(&x0, &d, &cond, &s, &mut Rng::new(seed)).unwrap();
        let ef_err = replay(&track, &d, &cond, &s, None).unwrap().max_abs_diff(&x0).unwrap();
        let ddim = ddim_invert(&x0, &d, &cond, &s).unwrap();
        let ddim_err = ddim_reconstruct(ddim.trajectory.last().unwrap(), &d, &cond, &s)
            .unwrap()
            .max_abs_diff(&x0)
            .unwrap();
        assert!(ef_err < 1e-4, "seed {seed}: {ef_err}");
        assert!(ddim_err >= ef_err, "seed {seed}: ddim {ddim_err} < ef {ef_err}");
        ef_var += NoiseStats::of(&track).mean_variance();
        ddim_var += NoiseStats::of(&ddim.track).mean_variance();
    }
    assert!(ef_var > ddim_var, "{ef_var} vs {ddim_var}");
}

#[test]
fn noise_maps_have_inflated_variance_and_negative_adjacent_correlation() {
    let s = schedule();
    let d = Denoiser::default();
    let cond = d.embed("a cat");
    let mut corr = 0.0;
    for seed in 0..20u64 {
        let x0 = random_image(&[8, 8, 3], seed);
        let track = invert(&x0, &d, &cond, &s, &mut Rng::new(seed)).unwrap();
        let stats = NoiseStats::of(&track);
        assert!(stats.mean_variance() > 1.0);
        corr += stats.mean_adjacent_corr();
        assert_eq!(variance(&track.z[0]), 0.0);
    }
    assert!(corr / 20.0 < 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn round_trip_holds_for_any_seed(img_seed in any::<u64>(), seed in any::<u64>(), c in prop::sample::select(vec![1usize, 3])) {
        let s = linear_schedule(20, 1e-4, 0.02).unwrap();
        let d = Denoiser::default();
        let cond = d.embed("anything at all");
        let x0 = random_image(&[8, 4, c], img_seed);
        let track = invert(&x0, &d, &cond, &s, &mut Rng::new(seed)).unwrap();
        let err = replay(&track, &d, &cond, &s, None).unwrap().max_abs_diff(&x0).unwrap();
        prop_assert!(err < 1e-4);
    }
}
