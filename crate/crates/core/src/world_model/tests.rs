use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn tiny() -> WorldModelConfig {
    WorldModelConfig {
        h_dim: 8,
        e_dim: 8,
        g_dim: 8,
        hidden: 8,
        n_categoricals: 2,
        n_classes: 4,
        n_heads: 2,
        n_attention_layers: 1,
        ..WorldModelConfig::default()
    }
}

fn model(config: WorldModelConfig, n_agents: usize) -> WorldModel {
    WorldModel::new(config, n_agents, 4, 3, 11).unwrap()
}

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

fn one_hot_z(rows: usize, config: &WorldModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probs = Array2::from_elem((rows, config.z_dim()), 1.0 / config.n_classes as f64);
    sample_one_hot(&probs, config.n_classes, LatentSampling::Sample, &mut rng)
}

fn sequence(t: usize, batch: usize, n_agents: usize, seed: u64) -> SequenceBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = batch * n_agents;
    SequenceBatch {
        batch,
        obs: (0..t)
            .map(|_| Array2::from_shape_fn((rows, 4), |_| rng.gen_range(0.0..1.0)))
            .collect(),
        actions: (1..t).map(|_| (0..rows).map(|_| rng.gen_range(0..3)).collect()).collect(),
        rewards: (1..t).map(|_| (0..batch).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        continuations: (1..t)
            .map(|_| (0..batch).map(|_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 }).collect())
            .collect(),
    }
}

#[test]
fn act_fusion_single_agent() {
    let m = model(tiny(), 1);
    let z = one_hot_z(1, &m.config, 0);
    let e = m.act_fusion(&z, &[2]).unwrap();
    assert_eq!(e.dim(), (1, 8));
    assert!(e.iter().all(|x| x.is_finite()));
    assert_eq!(e, m.act_fusion(&z, &[2]).unwrap());
}

#[test]
fn act_fusion_permutation_equivariant_without_identity() {
    let config = WorldModelConfig {
        agent_identity: false,
        ..tiny()
    };
    let m = model(config, 2);
    let z = one_hot_z(2, &m.config, 1);
    let e = m.act_fusion(&z, &[0, 2]).unwrap();
    let swapped = array_swap_rows(&z);
    let e_swapped = m.act_fusion(&swapped, &[2, 0]).unwrap();
    for c in 0..e.ncols() {
        assert!((e[[0, c]] - e_swapped[[1, c]]).abs() < 1e-12);
        assert!((e[[1, c]] - e_swapped[[0, c]]).abs() < 1e-12);
    }
    // and every output row depends on the other agent
    let e_other = m.act_fusion(&z, &[0, 1]).unwrap();
    assert_ne!(e.row(0), e_other.row(0));
}

fn array_swap_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    out.row_mut(0).assign(&t.row(1));
    out.row_mut(1).assign(&t.row(0));
    out
}

#[test]
fn act_fusion_rejects_bad_shapes() {
    let m = model(tiny(), 2);
    let z = one_hot_z(2, &m.config, 1);
    assert!(matches!(m.act_fusion(&z, &[0]), Err(GawmError::Shape(_))));
    assert!(matches!(m.act_fusion(&z, &[0, 3]), Err(GawmError::Input(_))));
    let odd = one_hot_z(3, &m.config, 1);
    assert!(matches!(m.act_fusion(&odd, &[0, 0, 0]), Err(GawmError::Shape(_))));
}

#[test]
fn obs_fusion_ablation_is_local() {
    let config = WorldModelConfig {
        obs_fusion_enabled: false,
        ..tiny()
    };
    let m = model(config, 2);
    let h = random(2, 8, 3);
    let o = random(2, 4, 4);
    let g = m.obs_fusion(&h, &o).unwrap();
    let mut zeroed = o.clone();
    zeroed.row_mut(1).fill(0.0);
    let g2 = m.obs_fusion(&h, &zeroed).unwrap();
    assert_eq!(g.row(0), g2.row(0));
    assert_ne!(g.row(1), g2.row(1));
}

#[test]
fn obs_fusion_enabled_mixes_agents() {
    let m = model(tiny(), 2);
    let h = random(2, 8, 3);
    let o = random(2, 4, 4);
    let g = m.obs_fusion(&h, &o).unwrap();
    let mut perturbed = o.clone();
    perturbed[[1, 0]] += 0.5;
    let g2 = m.obs_fusion(&h, &perturbed).unwrap();
    let change: f64 = g.row(0).iter().zip(g2.row(0)).map(|(a, b)| (a - b).abs()).sum();
    assert!(change > 1e-6, "agent 0 ignored agent 1: {change}");
}

#[test]
fn obs_fusion_single_agent_and_shape_errors() {
    let m = model(tiny(), 1);
    let g = m.obs_fusion(&random(1, 8, 1), &random(1, 4, 2)).unwrap();
    assert_eq!(g.dim(), (1, 8));
    assert!(matches!(
        m.obs_fusion(&random(1, 8, 1), &random(2, 4, 2)),
        Err(GawmError::Shape(_))
    ));
}

#[test]
fn ablated_jacobian_is_exactly_zero() {
    let config = WorldModelConfig {
        obs_fusion_enabled: false,
        ..tiny()
    };
    let m = model(config, 3);
    let h = random(3, 8, 5);
    let o = random(3, 4, 6);
    // gradient of agent 0's fused features w.r.t. every observation
    let mut joint = m.params.clone();
    let obs_id = joint.add("__obs", o);
    let mut g = Graph::new(&joint);
    let hv = g.constant(h);
    let ov = g.param(obs_id);
    let out = m.obs_fusion_var(&mut g, hv, ov);
    let mask = g.constant(array![[1.0], [0.0], [0.0]]);
    let masked = g.mul_col(out, mask);
    let loss = g.sum(masked);
    let grads = g.backward(loss);
    let d = grads.get(obs_id).unwrap();
    assert!(d.row(1).iter().all(|&x| x == 0.0));
    assert!(d.row(2).iter().all(|&x| x == 0.0));
    assert!(d.row(0).iter().any(|&x| x != 0.0));
}

#[test]
fn recurrent_step_bounded_and_deterministic() {
    let m = model(tiny(), 2);
    let h0 = Array2::zeros((2, 8));
    let e = random(2, 8, 7) * 50.0;
    let h1 = m.recurrent_step(&h0, &e).unwrap();
    assert!(h1.iter().all(|&x| x > -1.0 && x < 1.0));
    assert_eq!(h1, m.recurrent_step(&h0, &e).unwrap());
    let h2 = m.recurrent_step(&h1, &e).unwrap();
    assert!(h2.iter().all(|&x| x > -1.0 && x < 1.0));
    assert!(matches!(
        m.recurrent_step(&h0, &random(4, 8, 1)),
        Err(GawmError::Shape(_))
    ));
}

#[test]
fn posterior_and_prior_blocks_normalized() {
    let m = model(tiny(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (logits, z) = m.posterior(&random(2, 8, 1), LatentSampling::Sample, &mut rng).unwrap();
    let (plogits, pz) = m.prior(&random(2, 8, 2), LatentSampling::Sample, &mut rng).unwrap();
    for (l, s) in [(logits, z), (plogits, pz)] {
        let p = block_probs(&l, 4);
        for row in p.rows() {
            for b in 0..2 {
                let total: f64 = row.slice(ndarray::s![b * 4..b * 4 + 4]).sum();
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
        for row in s.rows() {
            for b in 0..2 {
                let blk = row.slice(ndarray::s![b * 4..b * 4 + 4]);
                assert_eq!(blk.sum(), 1.0);
                assert!(blk.iter().all(|&x| x == 0.0 || x == 1.0));
            }
        }
    }
}

#[test]
fn posterior_rejects_non_finite() {
    let m = model(tiny(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = random(1, 8, 1);
    g[[0, 3]] = f64::NAN;
    assert!(matches!(
        m.posterior(&g, LatentSampling::Sample, &mut rng),
        Err(GawmError::Numeric(_))
    ));
}

fn set_param(m: &mut WorldModel, name: &str, f: impl Fn(&mut Tensor)) {
    let id = m.params.id(name).unwrap();
    f(m.params.get_mut(id));
}

#[test]
fn equal_logits_sample_uniformly() {
    for head in ["posterior", "prior"] {
        let mut m = model(tiny(), 1);
        set_param(&mut m, &format!("{head}.1.w"), |t| t.fill(0.0));
        set_param(&mut m, &format!("{head}.1.b"), |t| t.fill(0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let input = random(1, 8, 9);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let (_, z) = if head == "posterior" {
                m.posterior(&input, LatentSampling::Sample, &mut rng).unwrap()
            } else {
                m.prior(&input, LatentSampling::Sample, &mut rng).unwrap()
            };
            for k in 0..4 {
                if z[[0, k]] == 1.0 {
                    counts[k] += 1;
                }
            }
        }
        let p = 0.25;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{head}: {counts:?}");
        }
    }
}

#[test]
fn dominant_logit_almost_always_wins() {
    for head in ["posterior", "prior"] {
        let mut m = model(tiny(), 1);
        set_param(&mut m, &format!("{head}.1.w"), |t| t.fill(0.0));
        set_param(&mut m, &format!("{head}.1.b"), |t| {
            t.fill(0.0);
            t[[0, 2]] = 20.0;
        });
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random(1, 8, 9);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| {
                let (_, z) = if head == "posterior" {
                    m.posterior(&input, LatentSampling::Sample, &mut rng).unwrap()
                } else {
                    m.prior(&input, LatentSampling::Sample, &mut rng).unwrap()
                };
                z[[0, 2]] == 1.0
            })
            .count();
        assert!(hits as f64 / n as f64 > 0.999, "{head}: {hits}");
    }
}

#[test]
fn reconstruct_codomain_and_locality() {
    let m = model(tiny(), 2);
    let h = random(2, 8, 1);
    let z = one_hot_z(2, &m.config, 2);
    let r = m.reconstruct(&h, &z).unwrap();
    assert_eq!(r.obs_mean.dim(), (2, 4));
    assert_eq!(r.reward_mean.len(), 1);
    assert!(r.continuation_prob.iter().all(|p| (0.0..=1.0).contains(p)));

    let mut z2 = z.clone();
    let block = z2.row(1).iter().position(|&x| x == 1.0).unwrap();
    z2[[1, block]] = 0.0;
    z2[[1, (block + 1) % 4]] = 1.0;
    let r2 = m.reconstruct(&h, &z2).unwrap();
    assert_eq!(r.obs_mean.row(0), r2.obs_mean.row(0));
    assert_ne!(r.obs_mean.row(1), r2.obs_mean.row(1));
    assert!((r.reward_mean[0] - r2.reward_mean[0]).abs() > 1e-9);
}

#[test]
fn continuation_prob_in_unit_interval_for_random_inputs() {
    let m = model(tiny(), 3);
    for seed in 0..20 {
        let h = random(6, 8, seed) * 3.0;
        let z = one_hot_z(6, &m.config, seed);
        let r = m.reconstruct(&h, &z).unwrap();
        assert!(r.continuation_prob.iter().all(|p| (0.0..=1.0).contains(p)));
        let per = m.reconstruct_per_agent(&h, &z).unwrap();
        assert_eq!(per.reward_mean.len(), 6);
    }
}

#[test]
fn observe_sequence_alignment() {
    let m = model(tiny(), 2);
    for len in [1usize, 2, 7, 64] {
        let seq = sequence(len, 2, 2, len as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = m.observe_sequence(&seq, LatentSampling::Sample, &mut rng).unwrap();
        assert_eq!(out.len(), len);
        for step in &out {
            assert_eq!(step.latent.h.dim(), (4, 8));
            assert_eq!(step.reconstruction.reward_mean.len(), 2);
        }
    }
}

#[test]
fn observe_sequence_deterministic_and_validated() {
    let m = model(tiny(), 2);
    let seq = sequence(5, 3, 2, 1);
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        m.observe_sequence(&seq, LatentSampling::Sample, &mut rng).unwrap()
    };
    assert_eq!(run(), run());

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let empty = SequenceBatch {
        batch: 1,
        obs: vec![],
        actions: vec![],
        rewards: vec![],
        continuations: vec![],
    };
    assert!(matches!(
        m.observe_sequence(&empty, LatentSampling::Sample, &mut rng),
        Err(GawmError::Input(_))
    ));
}

#[test]
fn kl_zero_when_prior_matches_posterior() {
    let config = WorldModelConfig {
        free_nats: 0.0,
        ..tiny()
    };
    let logits = random(2, 8, 3);
    let step = ObservedStep {
        latent: LatentState {
            h: Array2::zeros((2, 8)),
            z: Array2::zeros((2, 8)),
            z_logits: logits.clone(),
        },
        reconstruction: Reconstruction {
            obs_mean: Array2::zeros((2, 4)),
            reward_mean: vec![0.0],
            continuation_prob: vec![0.5],
            continuation_logit: vec![0.0],
        },
        prior_logits: logits.clone(),
        posterior_logits: logits,
    };
    let targets = SequenceBatch {
        batch: 1,
        obs: vec![Array2::zeros((2, 4))],
        actions: vec![],
        rewards: vec![],
        continuations: vec![],
    };
    let loss = world_model_loss(&[step], &targets, &config).unwrap();
    assert!(loss.kl.abs() < 1e-9);
    assert!(loss.kl_raw.abs() < 1e-9);
    // perfect reconstruction: Gaussian terms at their minimum of 0
    assert_eq!(loss.obs_nll, 0.0);
    assert_eq!(loss.reward_nll, 0.0);
}

#[test]
fn gaussian_nll_convention() {
    let config = WorldModelConfig {
        n_categoricals: 1,
        n_classes: 2,
        free_nats: 0.0,
        ..tiny()
    };
    let step = ObservedStep {
        latent: LatentState {
            h: Array2::zeros((1, 8)),
            z: Array2::zeros((1, 2)),
            z_logits: Array2::zeros((1, 2)),
        },
        reconstruction: Reconstruction {
            obs_mean: array![[0.0, 0.0]],
            reward_mean: vec![0.0],
            continuation_prob: vec![0.5],
            continuation_logit: vec![0.0],
        },
        prior_logits: Array2::zeros((1, 2)),
        posterior_logits: Array2::zeros((1, 2)),
    };
    let targets = SequenceBatch {
        batch: 1,
        obs: vec![array![[1.0, 1.0]]],
        actions: vec![],
        rewards: vec![],
        continuations: vec![],
    };
    let loss = world_model_loss(&[step], &targets, &config).unwrap();
    assert!((loss.obs_nll - 1.0).abs() < 1e-12);
    assert!((loss.total - 1.0).abs() < 1e-12);
}

#[test]
fn loss_length_mismatch_is_input_error() {
    let m = model(tiny(), 2);
    let seq = sequence(3, 1, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = m.observe_sequence(&seq, LatentSampling::Sample, &mut rng).unwrap();
    let short = SequenceBatch {
        obs: seq.obs[..2].to_vec(),
        actions: seq.actions[..1].to_vec(),
        rewards: seq.rewards[..1].to_vec(),
        continuations: seq.continuations[..1].to_vec(),
        ..seq.clone()
    };
    assert!(matches!(
        world_model_loss(&out, &short, &m.config),
        Err(GawmError::Input(_))
    ));
    let full = world_model_loss(&out, &seq, &m.config).unwrap();
    let direct = {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        m.loss_and_gradients(&seq, &mut rng).unwrap().0
    };
    assert!((full.total - direct.total).abs() < 1e-12);
}

#[test]
fn imagine_rollout_shapes_and_determinism() {
    let m = model(tiny(), 2);
    let rollout = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut latent = m.initial_state(1, LatentSampling::Sample, &mut rng).unwrap();
        let mut records = Vec::new();
        for k in 0..5 {
            let (next, recon) = m
                .imagine_step(&latent, &[k % 3, (k + 1) % 3], LatentSampling::Sample, &mut rng)
                .unwrap();
            records.push(recon);
            latent = next;
        }
        records
    };
    let a = rollout(3);
    assert_eq!(a.len(), 5);
    for r in &a {
        assert_eq!(r.obs_mean.dim(), (2, 4));
        assert_eq!(r.reward_mean.len(), 1);
        assert_eq!(r.continuation_prob.len(), 1);
    }
    assert_eq!(a, rollout(3));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let latent = m.initial_state(1, LatentSampling::Sample, &mut rng).unwrap();
    assert!(matches!(
        m.imagine_step(&latent, &[0, 9], LatentSampling::Sample, &mut rng),
        Err(GawmError::Input(_))
    ));
}

#[test]
fn train_step_reduces_loss_on_fixed_batch() {
    let mut m = model(tiny(), 2);
    let seq = sequence(4, 4, 2, 9);
    let mut opt = Adam::new(&m.params, 3e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let first = m.train_step(&mut opt, &seq, 10.0, &mut rng).unwrap().total;
    let mut last = first;
    for _ in 0..150 {
        last = m.train_step(&mut opt, &seq, 10.0, &mut rng).unwrap().total;
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut m = model(tiny(), 2);
    let before = m.params.clone();
    let seq = sequence(3, 2, 2, 4);
    let mut opt = Adam::new(&m.params, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    m.train_step(&mut opt, &seq, 10.0, &mut rng).unwrap();
    for ((_, a), (_, b)) in before.iter().zip(m.params.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn config_validation() {
    assert!(WorldModelConfig { n_heads: 3, ..tiny() }.validate().is_err());
    assert!(WorldModelConfig { beta: -0.1, ..tiny() }.validate().is_err());
    assert!(WorldModelConfig { h_dim: 0, ..tiny() }.validate().is_err());
    assert!(WorldModelConfig { kl_balance: 1.0, ..tiny() }.validate().is_err());
    assert!(tiny().validate().is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_never_negative(seed in any::<u64>(), scale in 0.0f64..20.0) {
        let post = random(3, 8, seed) * scale;
        let prior = random(3, 8, seed.wrapping_add(1)) * scale;
        let mut g = Graph::detached();
        let p = g.constant(post);
        let q = g.constant(prior);
        let (kl, raw) = balanced_kl(&mut g, p, q, 4, 0.8, 0.0);
        prop_assert!(g.scalar(raw) >= -1e-12);
        prop_assert!(g.scalar(kl) >= 0.0);
        let mut g2 = Graph::detached();
        let p = g2.constant(random(3, 8, seed) * scale);
        let q = g2.constant(random(3, 8, seed.wrapping_add(1)) * scale);
        let (floored, _) = balanced_kl(&mut g2, p, q, 4, 0.8, 0.1);
        prop_assert!(g2.scalar(floored) >= 0.1 * 6.0 - 1e-12);
    }

    #[test]
    fn sampled_blocks_are_one_hot(seed in any::<u64>()) {
        let m = model(tiny(), 2);
        let seq = sequence(3, 2, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for step in m.observe_sequence(&seq, LatentSampling::Sample, &mut rng).unwrap() {
            for row in step.latent.z.rows() {
                for b in 0..2 {
                    let blk = row.slice(ndarray::s![b * 4..b * 4 + 4]);
                    prop_assert_eq!(blk.sum(), 1.0);
                    prop_assert!(blk.iter().all(|&x| x == 0.0 || x == 1.0));
                }
            }
        }
    }
}

#[test]
fn straight_through_output_is_exact_one_hot() {
    let m = model(tiny(), 1);
    let mut g = Graph::new(&m.params);
    let logits = g.constant(array![[0.3, 1.2, -0.5, 0.1, 2.0, 0.0, 0.0, -1.0]]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = m.sample_var(&mut g, logits, LatentSampling::Mode, &mut rng);
    assert_eq!(g.value(z), &array![[0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]]);
}
