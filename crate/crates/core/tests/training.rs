//! Optimisation behaviour of the trainer on tiny problems.

use lrad::datasets::{synth_generate, LabeledImages, SynthSpec};
use lrad::losses::{DiscriminatorLoss, LossWeights};
use lrad::networks::{build_networks, Mode};
use lrad::tensor::{adam_step, AdamState, Graph};
use lrad::trainer::{train_with, TrainConfig};
use lrad::{Precision, Tensor};

fn tiny_data(n: usize) -> LabeledImages<f32> {
    let d = synth_generate(&SynthSpec {
        image_size: 16,
        radius_min: 3,
        radius_max: 6,
        stripe_size: 6,
        normal_count: n,
        anomaly_count: 0,
        ..SynthSpec::default()
    })
    .unwrap();
    d
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        latent_dim: 8,
        base_width: 4,
        rank: lrad::losses::RankBudget(2),
        precision: Precision::F64,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn autoencoder_objective_decreases_every_iteration() {
    let config = TrainConfig {
        epochs: 20,
        lr: 1e-3,
        weights: LossWeights { irec: 1.0, adv: 0.0, zrec: 0.0, rank: 0.0 },
        ..tiny_config()
    };
    let (_, h) = train_with::<f64>(&config, &tiny_data(16), |_, _, _| Ok(())).unwrap();
    assert_eq!(h.records.len(), 20);
    for w in h.records.windows(2) {
        assert!(
            w[1].loss.irec < w[0].loss.irec,
            "iteration {}: {} -> {}",
            w[1].iteration,
            w[0].loss.irec,
            w[1].loss.irec
        );
    }
}

#[test]
fn generator_update_leaves_the_discriminator_alone() {
    // The discriminator after one full step must equal one Adam step on
    // adv_d alone, computed here without any generator update.
    let config = TrainConfig { epochs: 1, ..tiny_config() };
    let data = tiny_data(16);
    let (trained, _) = train_with::<f64>(&config, &data, |_, _, _| Ok(())).unwrap();

    let mut st = build_networks::<f64>(&config.network_spec(1, 16), config.seed).unwrap();
    let x: Tensor<f64> = data.images.cast();
    let train = Mode::Train { update_running: true };
    let mut g = Graph::new();
    let xv = g.constant(x);
    let pe = st.encoder.bind(&mut g, false);
    let pd = st.decoder.bind(&mut g, false);
    let z = st.encoder.forward_graph(&mut g, &pe, xv, train).unwrap();
    let r = st.decoder.forward_graph(&mut g, &pd, z, train).unwrap();
    let fake = g.constant(g.value(r).clone());
    let p = st.discriminator.bind(&mut g, true);
    let dr = st.discriminator.forward_graph(&mut g, &p, xv, train).unwrap();
    let df = st.discriminator.forward_graph(&mut g, &p, fake, train).unwrap();
    let loss = g.apply(DiscriminatorLoss, &[dr, df]).unwrap();
    let grads = g.backward(loss).unwrap();
    let gs: Vec<Tensor<f64>> = p.iter().map(|&v| grads.get_or_zeros(v, g.value(v))).collect();
    let refs: Vec<&Tensor<f64>> = gs.iter().collect();
    let mut opt = AdamState::new(config.adam(), st.discriminator.params());
    adam_step(&mut st.discriminator.params_mut(), &refs, &mut opt).unwrap();

    for ((name, want), (_, got)) in st
        .discriminator
        .named_tensors("d")
        .into_iter()
        .zip(trained.discriminator.named_tensors("d"))
    {
        assert!(want.max_abs_diff(got).unwrap() <= 1e-12, "{name} differs");
    }
}

#[test]
fn same_seed_gives_identical_histories() {
    let config = TrainConfig { epochs: 2, precision: Precision::F32, ..tiny_config() };
    let data = tiny_data(40);
    let (a, ha) = train_with::<f32>(&config, &data, |_, _, _| Ok(())).unwrap();
    let (b, hb) = train_with::<f32>(&config, &data, |_, _, _| Ok(())).unwrap();
    assert_eq!(ha.to_csv(), hb.to_csv());
    assert_eq!(a.named_tensors(), b.named_tensors());
    let other = TrainConfig { seed: 4, ..config };
    let (_, hc) = train_with::<f32>(&other, &data, |_, _, _| Ok(())).unwrap();
    assert_ne!(ha.to_csv(), hc.to_csv());
}
