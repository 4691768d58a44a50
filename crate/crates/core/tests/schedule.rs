use lesion_core::schedule::{
    ddim_jump, ddim_step, ddim_timesteps, ddpm_step, diffuse_with, forward_diffuse, linear_schedule, predict_z0,
    NoiseSchedule,
};
use lesion_core::seed;
use lesion_oracle::reference as oracle;
use lesion_tensor::Tensor;

fn s1(v: f32) -> Tensor {
    Tensor::new(&[1], vec![v]).unwrap()
}

fn randn(shape: &[usize], root: u64, index: u64) -> Tensor {
    Tensor::randn(shape, &mut seed::rng(root, "test", index))
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.numel() as f64
}

#[test]
fn default_schedule_is_monotone_and_matches_product_oracle() {
    let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
    let want = oracle::alpha_bars(s.betas());
    let mut prev = 1.0;
    for t in 1..=1000 {
        let ab = s.alpha_bar(t).unwrap();
        assert!(ab > 0.0 && ab <= 1.0 && ab < prev);
        assert!((ab - want[t - 1]).abs() <= 1e-6 * want[t - 1]);
        prev = ab;
    }
    assert!(s.alpha_bar(1000).unwrap() < 0.01);
}

#[test]
fn single_step_schedule() {
    let s = NoiseSchedule::from_betas(vec![0.3]).unwrap();
    assert!((s.alpha_bar(1).unwrap() - 0.7).abs() < 1e-15);
    assert!(NoiseSchedule::from_betas(vec![1.0]).is_err());
    assert!(NoiseSchedule::from_betas(vec![]).is_err());
}

#[test]
fn forward_diffuse_limits_and_scalar_value() {
    let (z0, eps) = (s1(1.0), s1(2.0));
    assert_eq!(diffuse_with(&z0, &eps, 1.0).unwrap().data(), &[1.0]);
    assert_eq!(diffuse_with(&z0, &eps, 0.0).unwrap().data(), &[2.0]);
    let want = 0.72f64.sqrt() + 2.0 * 0.28f64.sqrt();
    let got = diffuse_with(&z0, &eps, 0.72).unwrap().data()[0] as f64;
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    assert!((want - 1.9068).abs() < 1e-4);
    let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
    let via_t = forward_diffuse(&z0, 2, &eps, &s).unwrap();
    assert_eq!(via_t.data()[0] as f64, got as f64);
    assert!(diffuse_with(&z0, &randn(&[2], 0, 0), 0.5).is_err());
}

#[test]
fn forward_diffuse_energy_interpolates() {
    let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
    let z0 = randn(&[4, 8, 8], 1, 0).map(|v| 0.5 * v);
    let z_energy: f64 = z0.data().iter().map(|v| (*v as f64).powi(2)).sum();
    let dim = z0.numel() as f64;
    for t in [1, 100, 500, 1000] {
        let ab = s.alpha_bar(t).unwrap();
        let mut total = 0.0;
        for i in 0..1000 {
            let zt = forward_diffuse(&z0, t, &randn(z0.shape(), 2, i), &s).unwrap();
            assert_eq!(zt.shape(), z0.shape());
            total += zt.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
        }
        let want = ab * z_energy + (1.0 - ab) * dim;
        let got = total / 1000.0;
        assert!((got - want).abs() <= 0.05 * want, "t={t}: {got} vs {want}");
    }
}

#[test]
fn ddpm_and_ddim_match_scalar_oracle() {
    let betas = [0.1, 0.2];
    let s = NoiseSchedule::from_betas(betas.to_vec()).unwrap();
    for (z, e, n) in [(0.7, -0.3, 0.5), (-1.2, 0.8, -0.1), (0.0, 1.0, 2.0)] {
        for t in [1, 2] {
            let got = ddpm_step(&s1(z), &s1(e), t, &s, &s1(n)).unwrap().data()[0] as f64;
            let want = oracle::ddpm_step(z as f64, e as f64, t, &betas, n as f64);
            assert!((got - want).abs() < 1e-6, "ddpm t={t}: {got} vs {want}");
        }
        for (t, tp) in [(2, 1), (2, 0), (1, 0)] {
            let got = ddim_step(&s1(z), &s1(e), t, tp, &s).unwrap().data()[0] as f64;
            let want = oracle::ddim_step(z as f64, e as f64, t, tp, &betas);
            assert!((got - want).abs() < 1e-6, "ddim {t}->{tp}: {got} vs {want}");
        }
    }
}

#[test]
fn ddpm_final_step_is_noiseless_and_inverts_t1() {
    let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
    let z0 = randn(&[4, 8, 8], 3, 0);
    let eps = randn(&[4, 8, 8], 3, 1);
    let zt = forward_diffuse(&z0, 1, &eps, &s).unwrap();
    let a = ddpm_step(&zt, &eps, 1, &s, &randn(&[4, 8, 8], 3, 2)).unwrap();
    let b = ddpm_step(&zt, &eps, 1, &s, &randn(&[4, 8, 8], 3, 3)).unwrap();
    assert_eq!(a, b);
    for (x, y) in a.data().iter().zip(z0.data()) {
        assert!((x - y).abs() < 1e-5);
    }
    let c = ddpm_step(&zt, &eps, 2, &s, &randn(&[4, 8, 8], 3, 2)).unwrap();
    let d = ddpm_step(&zt, &eps, 2, &s, &randn(&[4, 8, 8], 3, 3)).unwrap();
    assert_ne!(c, d);
}

#[test]
fn ddim_closed_forms() {
    let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
    let zt = randn(&[4, 8, 8], 4, 0);
    let eps = randn(&[4, 8, 8], 4, 1);
    // jump to ᾱ = 1 returns the predicted clean latent
    let full = ddim_jump(&zt, &eps, s.alpha_bar(600).unwrap(), 1.0).unwrap();
    assert_eq!(full, predict_z0(&zt, &eps, s.alpha_bar(600).unwrap()).unwrap());
    // zero noise prediction rescales
    let zero = Tensor::zeros(&[4, 8, 8]);
    let (ab, abp) = (s.alpha_bar(600).unwrap(), s.alpha_bar(300).unwrap());
    let out = ddim_step(&zt, &zero, 600, 300, &s).unwrap();
    let k = (abp / ab).sqrt();
    for (o, z) in out.data().iter().zip(zt.data()) {
        assert!((*o as f64 - k * *z as f64).abs() < 1e-5);
    }
    assert!(ddim_step(&zt, &eps, 300, 600, &s).is_err());
}

fn ulp(v: f32) -> f32 {
    f32::from_bits(v.abs().to_bits() + 1) - v.abs()
}

#[test]
fn single_ddim_jump_recovers_z0() {
    let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
    for i in 0..5 {
        let z0 = randn(&[4, 8, 8], 5, 2 * i);
        let eps = randn(&[4, 8, 8], 5, 2 * i + 1);
        let zt = forward_diffuse(&z0, 1000, &eps, &s).unwrap();
        let rec = ddim_step(&zt, &eps, 1000, 0, &s).unwrap();
        let err = rec.data().iter().zip(z0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        // z_t is stored in f32; its rounding (half an ulp) is amplified by 1/√ᾱ_T
        let floor = zt.data().iter().map(|v| 0.5 * ulp(*v)).fold(0.0, f32::max) / s.alpha_bar(1000).unwrap().sqrt() as f32;
        assert!(err <= 1.01 * floor + 1e-6, "max error {err} vs rounding floor {floor}");
    }
    for t in [10, 250, 500] {
        let z0 = randn(&[4, 8, 8], 6, t as u64);
        let eps = randn(&[4, 8, 8], 7, t as u64);
        let zt = forward_diffuse(&z0, t, &eps, &s).unwrap();
        let rec = ddim_step(&zt, &eps, t, 0, &s).unwrap();
        for (a, b) in rec.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 1e-5, "t={t}");
        }
    }
}

/// Ancestral chain driven by a denoiser that knows z0 and returns the noise
/// consistent with the current z_t.
fn oracle_chain(z0: &Tensor, s: &NoiseSchedule, root: u64) -> Tensor {
    let t_max = s.steps();
    let mut z = randn(z0.shape(), root, 0);
    for t in (1..=t_max).rev() {
        let ab = s.alpha_bar(t).unwrap();
        let eps_hat = z.zip_map(z0, |zt, x| ((zt as f64 - ab.sqrt() * x as f64) / (1.0 - ab).sqrt()) as f32).unwrap();
        z = ddpm_step(&z, &eps_hat, t, s, &randn(z0.shape(), root, t as u64)).unwrap();
    }
    z
}

#[test]
fn oracle_denoiser_chain_beats_noise_baseline_tenfold() {
    let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
    let (mut chain, mut noise) = (0.0, 0.0);
    for i in 0..10 {
        let z0 = randn(&[4, 8, 8], 8, i);
        chain += mse(&oracle_chain(&z0, &s, 100 + i), &z0);
        noise += mse(&randn(&[4, 8, 8], 9, i), &z0);
    }
    assert!(noise >= 10.0 * chain, "chain {chain} vs noise {noise}");
}

#[test]
fn timesteps_cover_schedule() {
    let ts = ddim_timesteps(1000, 50).unwrap();
    assert_eq!(ts.len(), 51);
    assert_eq!((ts[0], ts[50]), (1000, 0));
    assert!(ts.windows(2).all(|w| w[0] - w[1] == 20));
}
