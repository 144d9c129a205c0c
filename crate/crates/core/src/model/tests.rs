use super::*;
use crate::selector::SelectorKind;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 4x4 input, one pooled stage, 2x2 = 4 tokens.
fn tiny_config() -> ModelConfig {
    ModelConfig {
        timesteps: 3,
        depth: 2,
        embed_dim: 8,
        heads: 2,
        mlp_ratio: 2.0,
        image_hw: 4,
        in_channels: 3,
        sps_stages: vec![SpsStage { channels: 8, pool: true }],
        rpe: true,
        patch_tokens: 4,
        num_classes: 3,
        selector_layers: vec![2],
        ..ModelConfig::compact()
    }
}

fn build(cfg: ModelConfig, rho: f64, seed: u64) -> (Spikformer, ParamStore) {
    let sel = SelectorConfig { rho, ..SelectorConfig::default() };
    Spikformer::new(cfg, sel, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_image(cfg: &ModelConfig, rng: &mut impl Rng) -> Frames {
    let px = cfg.image_hw * cfg.image_hw;
    Frames::new(Matrix::from_fn(px, cfg.in_channels, |_, _| rng.random_range(0.0..1.5)), 1).unwrap()
}

fn random_spikes(t: usize, n: usize, d: usize, rate: f64, rng: &mut impl Rng) -> SpikeTensor {
    let m = Matrix::from_fn(t * n, d, |_, _| if rng.random_bool(rate) { 1.0 } else { 0.0 });
    SpikeTensor::new(m, t, n).unwrap()
}

fn token_rows(x: &SpikeTensor, n: usize) -> Vec<f32> {
    (0..x.timesteps()).flat_map(|t| x.matrix().row(t * x.tokens() + n).to_vec()).collect()
}

#[test]
fn zero_image_gives_zero_spikes() {
    let (m, p) = build(tiny_config(), 0.7, 1);
    let img = Frames::new(Matrix::zeros(16, 3), 1).unwrap();
    let s = m.sps_forward(&p, &img).unwrap();
    assert!(s.matrix().as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn desk_sps_yields_64_tokens_and_binary_output() {
    let cfg = ModelConfig::desk();
    let (m, p) = build(cfg.clone(), 0.7, 2);
    let img = random_image(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
    let s = m.sps_forward(&p, &img).unwrap();
    assert_eq!((s.timesteps(), s.tokens(), s.channels()), (4, 64, 96));
    assert!(s.matrix().is_binary());
}

#[test]
fn sps_rejects_wrong_shape() {
    let (m, p) = build(tiny_config(), 0.7, 1);
    let img = Frames::new(Matrix::zeros(25, 3), 1).unwrap();
    assert!(matches!(m.sps_forward(&p, &img), Err(Error::Dimension { .. })));
}

#[test]
fn static_frame_matches_explicit_repetition() {
    let cfg = tiny_config();
    let (m, p) = build(cfg.clone(), 0.7, 4);
    let one = random_image(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
    let mut rep = Matrix::zeros(16 * 3, 3);
    for t in 0..3 {
        for r in 0..16 {
            rep.row_mut(t * 16 + r).copy_from_slice(one.data().row(r));
        }
    }
    let rep = Frames::new(rep, 3).unwrap();
    assert_eq!(m.sps_forward(&p, &one).unwrap(), m.sps_forward(&p, &rep).unwrap());
}

#[test]
fn ones_mask_is_neutral_in_ssa() {
    let cfg = tiny_config();
    let (m, p) = build(cfg, 0.7, 6);
    let x = random_spikes(3, 4, 8, 0.5, &mut ChaCha8Rng::seed_from_u64(7));
    let b = m.layout.blocks[0];
    let mut tape = Tape::new();
    let xn = tape.input(x.matrix());
    let plain = m.ssa_tape(&mut tape, &p, &b, xn, None).unwrap();
    let ones = tape.constant(Matrix::filled(4, 1, 1.0));
    let masked = m.ssa_tape(&mut tape, &p, &b, xn, Some(ones)).unwrap();
    assert_eq!(tape.value(plain), tape.value(masked));
}

#[test]
fn ssa_kept_positions_match_gather_oracle() {
    let cfg = tiny_config();
    let (m, p) = build(cfg, 0.7, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let x = random_spikes(3, 4, 8, 0.5, &mut rng);
        let keep = TokenDecision::from_hard(vec![true, true, false, false]);
        let full = m.ssa_forward(&p, 1, &x, &keep).unwrap();
        let compact = m.ssa_forward(&p, 1, &x.gather_tokens(&[0, 1]), &TokenDecision::keep_all(2)).unwrap();
        for (j, i) in [0usize, 1].into_iter().enumerate() {
            assert_eq!(token_rows(&full, i), token_rows(&compact, j));
        }
        for i in [2, 3] {
            assert_eq!(token_rows(&full, i), token_rows(&x, i));
        }
    }
}

#[test]
fn ssa_of_silence_is_silence() {
    let (m, p) = build(tiny_config(), 0.7, 10);
    let x = SpikeTensor::zeros(3, 4, 8);
    let out = m.ssa_forward(&p, 1, &x, &TokenDecision::keep_all(4)).unwrap();
    assert!(out.matrix().as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn mask_length_mismatch_is_dimension_error() {
    let (m, p) = build(tiny_config(), 0.7, 10);
    let x = SpikeTensor::zeros(3, 4, 8);
    let err = m.mlp_forward(&p, 1, &x, &TokenDecision::keep_all(3)).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }));
}

#[test]
fn mlp_with_nothing_kept_is_the_residual() {
    let (m, p) = build(tiny_config(), 0.7, 11);
    let x = random_spikes(3, 4, 8, 0.4, &mut ChaCha8Rng::seed_from_u64(12));
    let keep = TokenDecision::from_hard(vec![false; 4]);
    assert_eq!(m.mlp_forward(&p, 1, &x, &keep).unwrap(), x);
}

#[test]
fn mlp_with_zero_weights_is_the_residual() {
    let (m, mut p) = build(tiny_config(), 0.7, 13);
    let b = m.layout.blocks[0];
    for id in [b.fc1.weight, b.fc2.weight] {
        p.get_mut(id).values.as_mut_slice().fill(0.0);
    }
    let x = random_spikes(3, 4, 8, 0.4, &mut ChaCha8Rng::seed_from_u64(14));
    assert_eq!(m.mlp_forward(&p, 1, &x, &TokenDecision::keep_all(4)).unwrap(), x);
}

#[test]
fn mlp_matches_gather_oracle() {
    let (m, p) = build(tiny_config(), 0.7, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random_spikes(3, 4, 8, 0.5, &mut rng);
    let keep = TokenDecision::from_hard(vec![false, true, false, true]);
    let full = m.mlp_forward(&p, 2, &x, &keep).unwrap();
    let compact = m.mlp_forward(&p, 2, &x.gather_tokens(&[1, 3]), &TokenDecision::keep_all(2)).unwrap();
    assert_eq!(token_rows(&full, 1), token_rows(&compact, 0));
    assert_eq!(token_rows(&full, 3), token_rows(&compact, 1));
}

#[test]
fn block_without_selector_keeps_decision() {
    let (m, p) = build(tiny_config(), 0.5, 17);
    let x = random_spikes(3, 4, 8, 0.5, &mut ChaCha8Rng::seed_from_u64(18));
    let keep = TokenDecision::from_hard(vec![true, false, true, true]);
    let (_, out) = m.encoder_block_forward(&p, 1, &x, &keep, &RunOptions::eval(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(out.hard, keep.hard);
}

#[test]
fn block_selector_with_unit_ratio_keeps_everything() {
    let (m, p) = build(tiny_config(), 1.0, 19);
    let x = random_spikes(3, 4, 8, 0.5, &mut ChaCha8Rng::seed_from_u64(20));
    let keep = TokenDecision::keep_all(4);
    let (_, out) = m.encoder_block_forward(&p, 2, &x, &keep, &RunOptions::eval(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(out.hard, keep.hard);
}

#[test]
fn block_selector_halves_eight_tokens() {
    let (m, p) = build(tiny_config(), 0.5, 21);
    let x = random_spikes(3, 8, 8, 0.5, &mut ChaCha8Rng::seed_from_u64(22));
    let (y, out) = m
        .encoder_block_forward(&p, 2, &x, &TokenDecision::keep_all(8), &RunOptions::eval(), &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert_eq!(out.kept(), 4);
    assert_eq!(out.layer_history.len(), 1);
    assert!(y.matrix().is_binary());
}

#[test]
fn zero_head_gives_bias_logits() {
    let (m, mut p) = build(tiny_config(), 0.7, 23);
    p.get_mut(m.layout.head_w).values.as_mut_slice().fill(0.0);
    p.get_mut(m.layout.head_b).values = Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]);
    let x = SpikeTensor::new(Matrix::filled(12, 8, 1.0), 3, 4).unwrap();
    assert_eq!(m.classify(&p, &x, &TokenDecision::keep_all(4)).unwrap(), vec![0.5, -1.0, 2.0]);
}

#[test]
fn classify_ignores_dropped_tokens_and_rejects_empty_sets() {
    let (m, p) = build(tiny_config(), 0.7, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let x = random_spikes(3, 4, 8, 0.5, &mut rng);
    let keep = TokenDecision::from_hard(vec![true, false, true, false]);
    let mut garbage = x.clone().into_matrix();
    for t in 0..3 {
        for n in [1, 3] {
            garbage.row_mut(t * 4 + n).fill(1.0);
        }
    }
    let y = SpikeTensor::new(garbage, 3, 4).unwrap();
    let a = m.classify(&p, &x, &keep).unwrap();
    assert_eq!(a, m.classify(&p, &y, &keep).unwrap());
    let oracle = m.classify(&p, &x.gather_tokens(&[0, 2]), &TokenDecision::keep_all(2)).unwrap();
    for (u, v) in a.iter().zip(&oracle) {
        assert!((u - v).abs() <= 1e-6 * u.abs().max(1.0));
    }
    let none = TokenDecision::from_hard(vec![false; 4]);
    assert!(matches!(m.classify(&p, &x, &none), Err(Error::EmptyTokenSet)));
}

#[test]
fn unit_ratio_matches_selector_free_build() {
    let cfg = ModelConfig { depth: 3, selector_layers: vec![2, 3], ..tiny_config() };
    let (with, pw) = build(cfg.clone(), 1.0, 26);
    let (without, po) = build(ModelConfig { selector_layers: vec![], ..cfg.clone() }, 1.0, 26);
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    for _ in 0..5 {
        let img = random_image(&cfg, &mut rng);
        let a = with.forward(&pw, &img, &RunOptions::eval(), &mut rng).unwrap();
        let b = without.forward(&po, &img, &RunOptions::eval(), &mut rng).unwrap();
        assert_eq!(a.logits, b.logits);
    }
}

#[test]
fn gather_execution_matches_masked() {
    let cfg = ModelConfig { depth: 3, selector_layers: vec![1, 2, 3], ..tiny_config() };
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    for kind in [SelectorKind::Spiking, SelectorKind::Random] {
        let sel = SelectorConfig { rho: 0.6, kind, ..SelectorConfig::default() };
        let (m, p) = Spikformer::new(cfg.clone(), sel, &mut rng).unwrap();
        for s in 0..5 {
            let img = random_image(&cfg, &mut rng);
            let opts = RunOptions { capture: true, ..RunOptions::eval() };
            let a = m.forward(&p, &img, &opts, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            let g = RunOptions { capture: true, ..RunOptions::gather() };
            let b = m.forward(&p, &img, &g, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            assert_eq!(a.logits, b.logits);
            assert_eq!(a.decision.hard, b.decision.hard);
            assert_eq!(a.captures, b.captures);
        }
    }
}

#[test]
fn gather_is_inference_only() {
    let cfg = tiny_config();
    let (m, p) = build(cfg.clone(), 0.5, 29);
    let img = random_image(&cfg, &mut ChaCha8Rng::seed_from_u64(30));
    let opts = RunOptions { execution: Execution::Gather, ..RunOptions::train(1.0) };
    assert!(matches!(m.forward(&p, &img, &opts, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Usage(_))));
}

#[test]
fn straight_through_reaches_the_scorer() {
    let cfg = ModelConfig { depth: 2, selector_layers: vec![1, 2], ..tiny_config() };
    let (m, p) = build(cfg.clone(), 0.5, 31);
    let img = random_image(&cfg, &mut ChaCha8Rng::seed_from_u64(32));
    let g = m.sample_gradients(&p, &img, 1, &RunOptions::train(1.0), 2.0, &mut ChaCha8Rng::seed_from_u64(33)).unwrap();
    let scorer = m.scorer_params();
    let max = g
        .grads
        .iter()
        .filter(|(i, _)| scorer.contains(i))
        .flat_map(|(_, gm)| gm.as_slice().iter().map(|v| v.abs()))
        .fold(0.0f32, f32::max);
    assert!(max > 0.0);
    assert!(g.loss.is_finite());
}

#[test]
fn train_decisions_are_hard_and_monotone() {
    let cfg = ModelConfig { depth: 2, selector_layers: vec![1, 2], ..tiny_config() };
    let (m, p) = build(cfg.clone(), 0.5, 34);
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    for _ in 0..20 {
        let img = random_image(&cfg, &mut rng);
        let out = m.forward(&p, &img, &RunOptions::train(0.5), &mut rng).unwrap();
        let h = &out.decision.layer_history;
        assert!(h[1].hard.iter().zip(&h[0].hard).all(|(&b, &a)| !b || a));
        assert!(out.decision.kept() >= 1);
    }
}

#[test]
fn bind_checks_layout() {
    let (m, p) = build(tiny_config(), 0.7, 36);
    assert_eq!(Spikformer::bind(tiny_config(), *m.selector(), &p).unwrap(), m);
    let other = ModelConfig { depth: 3, ..tiny_config() };
    assert!(Spikformer::bind(other, *m.selector(), &p).is_err());
}
