use lesion_core::inpaint::{self, DiffusionModel, LossRegion, MaskConfig, SampleRngs};
use lesion_core::schedule::linear_schedule;
use lesion_core::seed;
use lesion_core::train::{OptimConfig, Trainer};
use lesion_core::unet::{is_attention_param, time_embed, TrainMode, UNet, UNetConfig};
use lesion_core::vae::{Vae, VaeConfig};
use lesion_oracle::unet64;
use lesion_tensor::{ops, Tape, Tensor};

fn tiny() -> UNetConfig {
    UNetConfig {
        latent_channels: 4,
        base_width: 8,
        depth: 2,
        attention: true,
        time_embed_dim: 16,
    }
}

fn randn(shape: &[usize], root: u64, index: u64) -> Tensor {
    Tensor::randn(shape, &mut seed::rng(root, "test", index))
}

#[test]
fn time_embedding_properties() {
    let e0 = time_embed(0, 128).unwrap();
    assert!(e0.data()[..64].iter().all(|&v| v == 0.0));
    assert!(e0.data()[64..].iter().all(|&v| v == 1.0));
    for t in [1, 17, 500, 1000] {
        assert!(time_embed(t, 128).unwrap().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    let (a, b) = (time_embed(100, 128).unwrap(), time_embed(101, 128).unwrap());
    let d: f32 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    assert!(d > 0.0);
    assert!(time_embed(5, 127).is_err());
}

#[test]
fn default_shapes_and_determinism() {
    let net = UNet::new(UNetConfig::default(), 0).unwrap();
    let x = randn(&[9, 16, 32], 1, 0);
    let y = net.predict(&x, 500).unwrap();
    assert_eq!(y.shape(), &[4, 16, 32]);
    assert_eq!(y, net.predict(&x, 500).unwrap());
    assert!(y.is_finite());
}

#[test]
fn shape_violations_are_rejected() {
    let net = UNet::new(tiny(), 0).unwrap();
    let wrong_channels = net.predict(&randn(&[8, 8, 16], 2, 0), 1).unwrap_err();
    assert!(wrong_channels.to_string().contains("channel"), "{wrong_channels}");
    assert!(net.predict(&randn(&[9, 7, 16], 2, 1), 1).is_err());
    assert!(net.predict_batch(&randn(&[2, 9, 8, 16], 2, 2), &[1]).is_err());
    assert!(UNet::new(UNetConfig { time_embed_dim: 15, ..tiny() }, 0).is_err());
}

#[test]
fn no_cross_attention_and_attention_names() {
    let net = UNet::new(UNetConfig::default(), 0).unwrap();
    assert_eq!(net.config.in_channels(), 9);
    for name in net.params.names() {
        assert!(!name.contains("cross"), "{name}");
        assert!(name.starts_with("unet."));
    }
    assert!(net.params.names().any(is_attention_param));
}

#[test]
fn attention_partition() {
    let net = UNet::new(UNetConfig::default(), 0).unwrap();
    let all = net.trainable_params(TrainMode::All);
    let attn = net.trainable_params(TrainMode::AttentionOnly);
    let frozen: Vec<&String> = all.iter().filter(|n| !attn.contains(n)).collect();
    assert_eq!(attn.len() + frozen.len(), all.len());
    assert!(attn.iter().all(|n| all.contains(n) && is_attention_param(n)));
    assert!(frozen.iter().all(|n| !is_attention_param(n)));
    let count = |names: &[String]| -> usize { names.iter().map(|n| net.params.get(n).unwrap().numel()).sum() };
    let frac = count(&attn) as f64 / count(&all) as f64;
    assert!(frac > 0.0 && frac < 0.3, "attention fraction {frac}");
}

#[test]
fn batch_permutation_commutes() {
    let net = UNet::new(tiny(), 3).unwrap();
    let a = randn(&[9, 8, 16], 4, 0);
    let b = randn(&[9, 8, 16], 4, 1);
    let ab = net.predict_batch(&Tensor::stack(&[a.clone(), b.clone()]).unwrap(), &[10, 700]).unwrap();
    let ba = net.predict_batch(&Tensor::stack(&[b, a]).unwrap(), &[700, 10]).unwrap();
    assert_eq!(ab.index0(0).unwrap(), ba.index0(1).unwrap());
    assert_eq!(ab.index0(1).unwrap(), ba.index0(0).unwrap());
}

#[test]
fn zero_weights_give_zero_output() {
    let mut net = UNet::new(tiny(), 5).unwrap();
    let names: Vec<String> = net.params.names().map(str::to_string).collect();
    for n in names {
        let t = net.params.get_mut(&n).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let y = net.predict(&randn(&[9, 8, 16], 6, 0), 321).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

fn to_arr(t: &Tensor) -> unet64::Arr {
    unet64::Arr::new(t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect())
}

/// Tape gradients of `sum(eps_hat²)` against f64 central differences of an
/// independent double-precision forward pass.
#[test]
fn tiny_unet_gradients_match_finite_differences() {
    let cfg = tiny();
    let spec = unet64::UNetSpec {
        depth: cfg.depth,
        attention: cfg.attention,
        time_embed_dim: cfg.time_embed_dim,
    };
    let mut worst = 0f64;
    for instance in 0..5u64 {
        let net = UNet::new(cfg.clone(), 100 + instance).unwrap();
        // randomize the zero-initialized biases and norm shifts too
        let mut params = net.params.clone();
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for (k, n) in names.iter().enumerate() {
            let t = params.get_mut(n).unwrap();
            let noise = randn(t.shape(), 200 + instance, k as u64);
            *t = t.zip_map(&noise, |a, b| a + 0.1 * b).unwrap();
        }
        let net = UNet { params, ..net };
        let x = randn(&[1, 9, 8, 16], 7, instance);
        let t = 1 + 137 * instance as usize;

        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let p = net.params.bind(&tape, |_| true);
        let y = net.forward(&p, xv, &[t]).unwrap();
        let mut grads = tape.backward(ops::sum_all(ops::square(y))).unwrap();
        let gx = grads.take(xv).unwrap();
        let gp = p.collect_grads(&mut grads);

        let x64 = unet64::Arr::new(vec![9, 8, 16], x.data().iter().map(|&v| v as f64).collect());
        let params64: unet64::Params = net.params.iter().map(|(n, t)| (n.to_string(), to_arr(t))).collect();
        let y64 = unet64::forward(&spec, &params64, &x64, t);
        let y32 = net.predict(&x.clone().reshape(&[9, 8, 16]).unwrap(), t).unwrap();
        for (a, b) in y32.data().iter().zip(&y64.data) {
            assert!((*a as f64 - b).abs() < 1e-4, "reference forward disagrees: {a} vs {b}");
        }

        let mut pick = seed::rng(instance, "probe", 0);
        let mut probes: Vec<(unet64::Probe, f64)> = Vec::new();
        for _ in 0..8 {
            let i = rand::Rng::random_range(&mut pick, 0..x.numel());
            probes.push((unet64::Probe::Input(i), gx.data()[i] as f64));
        }
        for n in &names {
            let g = &gp[n.as_str()];
            for _ in 0..3 {
                let i = rand::Rng::random_range(&mut pick, 0..g.numel());
                probes.push((unet64::Probe::Param(n.clone(), i), g.data()[i] as f64));
            }
        }
        for (probe, analytic) in &probes {
            let numeric = unet64::energy_derivative(&spec, &params64, &x64, t, probe, 1e-3);
            let rel = (analytic - numeric).abs() / numeric.abs().max(1e-6);
            assert!(rel < 1e-2, "instance {instance} {probe:?}: analytic {analytic:e} numeric {numeric:e}");
            worst = worst.max(rel);
        }
        println!("instance {instance}: {} probes", probes.len());
    }
    println!("max relative error {worst:.2e}");
}

#[test]
fn attention_only_training_freezes_the_rest() {
    let vae = Vae::new(
        VaeConfig {
            width: 8,
            ..VaeConfig::default()
        },
        0,
    )
    .unwrap();
    let mut model = DiffusionModel::new(tiny(), 9).unwrap();
    let before = model.unet.params.clone();
    let sched = linear_schedule(1000, 1e-4, 0.02).unwrap();
    let images: Vec<Tensor> = (0..4).map(|i| Tensor::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut seed::rng(8, "img", i))).collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    let mut trainer = Trainer::new(&OptimConfig {
        lr: 1e-2,
        warmup_steps: 1,
        total_steps: 100,
        weight_decay: 1e-2,
        batch: 4,
    })
    .unwrap();
    for step in 0..100 {
        let mut rngs = SampleRngs::new(1, step);
        let batch = inpaint::make_train_batch(&refs, None, &mut rngs, &vae, &sched, &MaskConfig::default()).unwrap();
        inpaint::train_step(&mut model, &batch, &sched, &mut trainer, LossRegion::Full, TrainMode::AttentionOnly, false)
            .unwrap();
    }
    let mut changed = 0;
    for (name, t) in before.iter() {
        let now = model.unet.params.get(name).unwrap();
        if is_attention_param(name) {
            changed += (now != t) as usize;
        } else {
            assert_eq!(now, t, "{name} changed");
        }
    }
    assert!(changed > 0, "no attention parameter moved");
}
