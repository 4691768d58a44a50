use lesion_core::seed;
use lesion_core::synthdata::{gen_from_seed, CorpusStyle, StyleId};
use lesion_core::train::{OptimConfig, Trainer};
use lesion_core::vae::{self, psnr, vae_loss, Vae, VaeConfig, VaeTrainConfig};
use lesion_tensor::{Tape, Tensor};

fn small() -> VaeConfig {
    VaeConfig {
        width: 8,
        latent_channels: 4,
        factor: 4,
    }
}

fn images(n: usize) -> Vec<Tensor> {
    let style = CorpusStyle::preset(StyleId::Kpi);
    (0..n as u64).map(|s| gen_from_seed(&style, s, 32).unwrap().0).collect()
}

fn loss_of(image: &Tensor, recon: &Tensor, mu: &Tensor, logvar: &Tensor, beta: f32) -> f64 {
    let tape = Tape::no_grad();
    let l = vae_loss(
        tape.constant(image.clone()),
        tape.constant(recon.clone()),
        tape.constant(mu.clone()),
        tape.constant(logvar.clone()),
        beta,
    )
    .unwrap();
    l.value().item() as f64
}

#[test]
fn shapes_and_determinism() {
    let v = Vae::new(VaeConfig::default(), 0).unwrap();
    let x = Tensor::rand_uniform(&[3, 64, 64], 0.0, 1.0, &mut seed::rng(0, "test", 0));
    let z = v.encode(&x).unwrap();
    assert_eq!(z.shape(), &[4, 16, 16]);
    assert_eq!(z, v.encode(&x).unwrap());
    let y = v.decode(&z).unwrap();
    assert_eq!(y.shape(), &[3, 64, 64]);
    assert!(v.encode(&Tensor::zeros(&[3, 30, 32])).is_err());
    assert!(v.encode(&Tensor::zeros(&[1, 32, 32])).is_err());
}

#[test]
fn decode_clamps_random_latents() {
    let v = Vae::new(small(), 1).unwrap();
    for i in 0..4 {
        let z = Tensor::randn(&[4, 8, 8], &mut seed::rng(1, "test", i)).map(|v| 20.0 * v);
        let y = v.decode(&z).unwrap();
        assert!(y.min() >= 0.0 && y.max() <= 1.0);
    }
}

#[test]
fn loss_closed_forms() {
    let img = Tensor::rand_uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut seed::rng(2, "test", 0));
    let zeros = Tensor::zeros(&[1, 4, 2, 2]);
    assert_eq!(loss_of(&img, &img, &zeros, &zeros, 1.0), 0.0);
    let ones = Tensor::ones(&[1, 4, 2, 2]);
    assert!((loss_of(&img, &img, &ones, &zeros, 1.0) - 0.5).abs() < 1e-6);
    let lv = Tensor::full(&[1, 4, 2, 2], 4f32.ln());
    let want = 0.5 * (4.0 - 1.0 - 4f64.ln());
    assert!((loss_of(&img, &img, &zeros, &lv, 1.0) - want).abs() < 1e-5);
    assert!((want - 0.8069).abs() < 1e-4);
    // reconstruction term is the plain MSE
    let off = img.map(|v| v + 0.1);
    assert!((loss_of(&img, &off, &zeros, &zeros, 1.0) - 0.01).abs() < 1e-6);
}

#[test]
fn kl_is_nonnegative() {
    let mut rng = seed::rng(3, "test", 0);
    for _ in 0..50 {
        let mu = Tensor::randn(&[1, 4, 2, 2], &mut rng).map(|v| 3.0 * v);
        let lv = Tensor::randn(&[1, 4, 2, 2], &mut rng).map(|v| 3.0 * v);
        let img = Tensor::zeros(&[1, 3, 8, 8]);
        assert!(loss_of(&img, &img, &mu, &lv, 1.0) >= -1e-7);
    }
}

fn train_small(steps: u64, seed_: u64) -> (Vae, Trainer) {
    let imgs = images(16);
    let cfg = VaeTrainConfig {
        optim: OptimConfig {
            lr: 3e-3,
            warmup_steps: 5,
            total_steps: steps,
            weight_decay: 1e-4,
            batch: 8,
        },
        seed: seed_,
        calibrate_images: 16,
        ..VaeTrainConfig::default()
    };
    let mut v = Vae::new(small(), seed_).unwrap();
    let mut tr = Trainer::new(&cfg.optim).unwrap();
    vae::train_vae(&mut v, &mut tr, &imgs, &cfg, 0, |_, _| Ok(())).unwrap();
    (v, tr)
}

#[test]
fn short_training_learns_and_is_reproducible() {
    let (a, tr) = train_small(60, 4);
    let first = tr.log.window_mean(0, 10);
    let last = tr.log.window_mean(50, 60);
    assert!(last < first, "loss {first} -> {last}");
    let (b, _) = train_small(60, 4);
    assert_eq!(a.params_hash(), b.params_hash());
    assert_eq!(a.latent_scale, b.latent_scale);
    // calibration makes the root-mean-square channel std one
    let imgs = images(16);
    let z = a.encode_batch(&vae::stack_images(&imgs, &(0..16).collect::<Vec<_>>()).unwrap()).unwrap();
    let stds = vae::channel_std(&z);
    let rms = (stds.iter().map(|s| s * s).sum::<f64>() / stds.len() as f64).sqrt();
    assert!((rms - 1.0).abs() < 1e-3, "rms {rms}");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = Vae::new(small(), 5).unwrap();
    v.latent_scale = 0.75;
    let p = dir.path().join("vae.pgck");
    v.save(&p).unwrap();
    let w = Vae::load(&p).unwrap();
    assert_eq!(w.params_hash(), v.params_hash());
    assert_eq!(w.latent_scale, 0.75);
    assert_eq!(w.config, v.config);
    assert!(Vae::load(&dir.path().join("missing.pgck")).is_err());
}

#[test]
fn psnr_values() {
    let a = Tensor::zeros(&[3, 4, 4]);
    let b = Tensor::full(&[3, 4, 4], 0.1);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
    assert!(psnr(&a, &Tensor::zeros(&[3, 4, 2])).is_err());
}
