use dsk_core::diffusion::*;
use dsk_core::field::Samples;
use dsk_core::pde::SelectionMask;
use dsk_core::rng::stage_rng;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vp() -> VpSchedule {
    VpSchedule::default()
}

#[test]
fn schedule_endpoints() {
    let s = vp();
    assert_eq!(s.sigma(0.0).unwrap(), 0.0);
    assert_eq!(s.s(0.0).unwrap(), 1.0);
    // φ(1) = ½·19.9 + 0.1 = 10.05
    let exact = (10.05f64.exp() - 1.0).sqrt();
    assert!((s.sigma(1.0).unwrap() - exact).abs() < 1e-9);
    // evaluated independently in extended precision
    assert!((s.sigma_max() - 152.166_970_283_946_5).abs() < 1e-9);
    assert!(s.sigma(1.5).is_err());
    assert!(s.s(-0.1).is_err());
}

#[test]
fn vp_identity_and_monotonicity() {
    let s = vp();
    let mut prev = 0.0;
    for i in 0..1000 {
        let t = i as f64 / 999.0;
        let (sigma, st) = (s.sigma(t).unwrap(), s.s(t).unwrap());
        assert!((st - 1.0 / (sigma * sigma + 1.0).sqrt()).abs() < 1e-14, "t = {t}");
        if i > 0 {
            assert!(sigma > prev);
        }
        prev = sigma;
    }
}

#[test]
fn t_of_sigma_inverts_sigma() {
    let s = vp();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let t: f64 = rng.random();
        assert!((s.t_of_sigma(s.sigma(t).unwrap()).unwrap() - t).abs() < 1e-12);
    }
    assert_eq!(s.t_of_sigma(0.0).unwrap(), 0.0);
    assert!(s.t_of_sigma(-1.0).is_err());
    assert!(s.t_of_sigma(1e4).is_err());
}

#[test]
fn derivatives_match_finite_differences() {
    let s = vp();
    let h = 1e-6;
    for t in [0.01, 0.2, 0.5, 0.9] {
        let fd_sigma = (s.sigma(t + h).unwrap() - s.sigma(t - h).unwrap()) / (2.0 * h);
        let fd_s = (s.s(t + h).unwrap() - s.s(t - h).unwrap()) / (2.0 * h);
        assert!((s.sigma_dot(t).unwrap() - fd_sigma).abs() < 1e-6 * fd_sigma.abs().max(1.0));
        assert!((s.s_dot(t).unwrap() - fd_s).abs() < 1e-8);
    }
    assert!(s.sigma_dot(0.0).is_err());
}

#[test]
fn perturb_moments_and_reproducibility() {
    let s = vp();
    let x0 = vec![0.7, -1.2, 0.0, 2.5];
    let (a, ea) = s.perturb(&x0, 0.3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let (b, eb) = s.perturb(&x0, 0.3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ea, eb);

    let (near, _) = s.perturb(&x0, 1e-12, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert!(near.iter().zip(&x0).all(|(x, y)| (x - y).abs() < 1e-5));

    // x0 ~ N(0, 4) per draw; Var(x_t) = s²(4 + σ²)
    let t = 0.4;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let draws: Vec<f64> = (0..10_000)
        .map(|_| {
            let x0: f64 = 2.0 * rng.sample::<f64, _>(rand_distr::StandardNormal);
            s.perturb(&[x0], t, &mut rng).unwrap().0[0]
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / draws.len() as f64;
    let (st, sig) = (s.s(t).unwrap(), s.sigma(t).unwrap());
    let expected = st * st * (4.0 + sig * sig);
    assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
}

#[test]
fn loss_weight_at_sigma_data() {
    for sd in [0.5, 1.0, 3.0] {
        assert!((VpSchedule::loss_weight(sd, sd) - 2.0 / (sd * sd)).abs() < 1e-12);
    }
}

#[test]
fn stratified_times_cover_each_stratum() {
    let s = vp();
    let n = 32;
    let times = s.stratified_times(n, &mut ChaCha8Rng::seed_from_u64(2));
    let dt = (1.0 - s.eps_t) / n as f64;
    for (i, t) in times.iter().enumerate() {
        let lo = s.eps_t + i as f64 * dt;
        assert!(*t >= lo && *t < lo + dt + 1e-15, "stratum {i}: {t}");
    }
}

#[test]
fn exponential_grid_endpoints_and_spacing() {
    let s = vp();
    let (lo, hi) = (s.sigma_min(), s.sigma_max());
    let sig = exponential_sigma_grid(256, lo, hi).unwrap();
    assert_eq!(sig[0], hi);
    assert_eq!(sig[256], lo);
    let step = (lo / hi).ln() / 256.0;
    for (i, v) in sig.iter().enumerate() {
        assert!((v.ln() - (hi.ln() + step * i as f64)).abs() < 1e-12);
    }
    let times = s.exponential_time_grid(256, lo, hi).unwrap();
    assert!((times[0] - 1.0).abs() < 1e-12);
    assert!((times[256] - s.eps_t).abs() < 1e-12);
    assert!(times.windows(2).all(|w| w[1] < w[0]));
    assert!(exponential_sigma_grid(0, lo, hi).is_err());
    assert!(exponential_sigma_grid(4, hi, lo).is_err());
    assert!(exponential_sigma_grid(4, 0.0, hi).is_err());
}

#[test]
fn gaussian_score_matches_closed_form() {
    let s = vp();
    let mean = vec![0.5, -1.0, 2.0];
    let sd = 1.7;
    let den = GaussianDenoiser { mean: mean.clone(), sigma_data: sd };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for t in [0.01, 0.3, 0.77, 1.0] {
        let x = Samples::new(3, (0..6).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect()).unwrap();
        let got = score(&den, &s, &x, t).unwrap();
        let (st, sig) = (s.s(t).unwrap(), s.sigma(t).unwrap());
        // x_t ~ N(s μ, s²(σ_d² + σ²) I)
        let var = st * st * (sd * sd + sig * sig);
        for (r, g) in x.rows().zip(got.rows()) {
            for k in 0..3 {
                let exact = -(r[k] - st * mean[k]) / var;
                assert!((g[k] - exact).abs() < 1e-10, "t={t}: {} vs {exact}", g[k]);
            }
        }
    }
    assert!(score(&den, &s, &Samples::new(3, vec![0.0; 3]).unwrap(), 0.0).is_err());
}

#[test]
fn score_of_identity_denoiser_is_zero_and_scales() {
    let x = vec![0.3, -0.4];
    assert_eq!(score_from_denoised(&x, &x, 0.8, 2.0).unwrap(), vec![0.0, 0.0]);
    let d = vec![1.3, 0.6];
    let a = score_from_denoised(&d, &x, 1.0, 1.0).unwrap();
    let b = score_from_denoised(&d, &x, 1.0, 2.0).unwrap();
    assert!(a.iter().zip(&b).all(|(p, q)| (p / 4.0 - q).abs() < 1e-15));
    assert!(score_from_denoised(&d, &x, 1.0, 0.0).is_err());
}

proptest! {
    #[test]
    fn drift_equals_f_x_minus_g2_score(t in 1e-3f64..1.0, x in -50.0f64..50.0, d in -5.0f64..5.0) {
        let s = vp();
        let (st, sig) = (s.s(t).unwrap(), s.sigma(t).unwrap());
        let (sd, sigd) = (s.s_dot(t).unwrap(), s.sigma_dot(t).unwrap());
        let f = sd / st;
        let g2 = 2.0 * st * st * sigd * sig;
        let sc = score_from_denoised(&[d], &[x / st], st, sig).unwrap()[0];
        let expected = f * x - g2 * sc;
        let got = reverse_drift(x, d, st, sd, sig, sigd);
        prop_assert!((got - expected).abs() <= 1e-10 * expected.abs().max(1.0), "{got} vs {expected}");
    }
}

#[test]
fn gaussian_constraint_gradient_matches_finite_differences() {
    let den = GaussianDenoiser { mean: vec![0.1; 8], sigma_data: 1.0 };
    let mask = SelectionMask::new(8, 4, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Samples::new(8, (0..16).map(|_| rng.random::<f64>()).collect()).unwrap();
    let y = Samples::new(4, (0..8).map(|_| rng.random::<f64>()).collect()).unwrap();
    let sigma = 0.7;
    let (_, grad) = den.denoise_with_constraint_grad(&x, sigma, &mask, &y).unwrap();
    let objective = |x: &Samples, row: usize| {
        let d = den.denoise(x, sigma).unwrap();
        let c = mask.apply(d.row(row)).unwrap();
        c.iter().zip(y.row(row)).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    };
    let h = 1e-6;
    for row in 0..2 {
        for k in 0..8 {
            let mut p = x.clone();
            p.row_mut(row)[k] += h;
            let mut m = x.clone();
            m.row_mut(row)[k] -= h;
            let fd = (objective(&p, row) - objective(&m, row)) / (2.0 * h);
            assert!((grad.row(row)[k] - fd).abs() < 1e-7, "row {row} k {k}");
        }
    }
}

fn oracle_samples(n: usize, steps: usize, seed: u64) -> Samples {
    let den = GaussianDenoiser { mean: vec![0.0; 24], sigma_data: 1.0 };
    let cfg = SamplerConfig { steps, ..SamplerConfig::default() };
    sample_unconditional(&den, &vp(), &cfg, n, |c| stage_rng(seed, "oracle", c as u64)).unwrap()
}

#[test]
fn sampler_reproduces_gaussian() {
    // 20k samples: MC floor of the relative Frobenius error is √((d²+d)/n)/√d ≈ 0.035
    let n = 20_000;
    let x = oracle_samples(n, 256, 11);
    let mean = x.mean();
    assert!(mean.iter().all(|m| m.abs() < 3.0 / (n as f64).sqrt()), "{mean:?}");
    let cov = x.covariance();
    let d = 24;
    let err: f64 = (0..d * d)
        .map(|k| {
            let id = if k / d == k % d { 1.0 } else { 0.0 };
            (cov[k] - id).powi(2)
        })
        .sum::<f64>()
        .sqrt();
    assert!(err / (d as f64).sqrt() < 0.05, "relative Frobenius error {}", err / (d as f64).sqrt());
}

#[test]
fn sampler_smoke_and_determinism() {
    let a = oracle_samples(10, 1, 3);
    assert!(a.data().iter().all(|v| v.is_finite()));
    let b = oracle_samples(70, 8, 5);
    let c = oracle_samples(70, 8, 5);
    assert_eq!(b.data(), c.data());
    // blocking into batches does not change per-chain results
    let den = GaussianDenoiser { mean: vec![0.0; 24], sigma_data: 1.0 };
    let cfg = SamplerConfig { steps: 8, batch: 7, ..SamplerConfig::default() };
    let d = sample_unconditional(&den, &vp(), &cfg, 70, |c| stage_rng(5, "oracle", c as u64)).unwrap();
    assert_eq!(b.data(), d.data());
}
