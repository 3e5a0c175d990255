use lrtts::acoustic::{kl_anneal_weight, AcousticConfig, AcousticModel, KlSchedule};
use lrtts::adversarial::{loss_discriminator, loss_generator};
use lrtts::duration::quantize_durations;
use lrtts::optim::{lr_at, LrSchedule};
use lrtts::synth::gap_closure;
use lrtts_nn::Graph;
use ndarray::Array2;
use proptest::prelude::*;

proptest! {
    #[test]
    fn gap_closure_ignores_affine_rescaling(
        b in 0.0..50.0f64,
        gap in 1.0..50.0f64,
        frac in -0.5..1.5f64,
        scale in 0.1..10.0f64,
        shift in -100.0..100.0f64,
    ) {
        let (r, c) = (b + gap, b + frac * gap);
        let plain = gap_closure(r, b, c).unwrap();
        let moved = gap_closure(scale * r + shift, scale * b + shift, scale * c + shift).unwrap();
        prop_assert!((plain - 100.0 * frac).abs() < 1e-9);
        prop_assert!((plain - moved).abs() < 1e-7);
    }

    #[test]
    fn kl_weight_is_monotone_and_bounded(start in 0u64..5_000, span in 1u64..20_000, gamma in 1e-4..1.0f64, step in 0u64..30_000) {
        let s = KlSchedule { start, end: start + span, gamma_max: gamma };
        let (a, b) = (kl_anneal_weight(step, &s), kl_anneal_weight(step + 1, &s));
        prop_assert!(b >= a);
        prop_assert!((0.0..=gamma).contains(&a));
    }

    #[test]
    fn lr_multiplier_stays_in_range(warmup in 0u64..5_000, span in 1u64..50_000, step in 0u64..80_000) {
        let s = LrSchedule { warmup_steps: warmup, decay_end: warmup + span, ..LrSchedule::default() };
        let m = lr_at(step, &s);
        prop_assert!(m >= s.floor && m <= 1.0);
        if step >= warmup {
            prop_assert!(lr_at(step + 1, &s) <= m);
        }
    }

    #[test]
    fn adversarial_losses(real in prop::collection::vec(-5.0..5.0f64, 1..8), shift in -3.0..3.0f64) {
        let fake: Vec<f64> = real.iter().map(|r| r + shift).collect();
        prop_assert!(loss_discriminator(&real, &fake) >= 0.0);
        prop_assert!((loss_generator(&real, &fake) + shift).abs() < 1e-12);
        prop_assert!((loss_generator(&real, &fake) + loss_generator(&fake, &real)).abs() < 1e-12);
    }

    #[test]
    fn quantization_rounds_positive_predictions(pred in prop::collection::vec(0.5..40.0f64, 1..12)) {
        let q = quantize_durations(&pred);
        for (&p, &d) in pred.iter().zip(q.frames()) {
            prop_assert_eq!(d, p.round() as u32);
        }
    }
}

#[test]
fn recurrent_decoder_tail_is_causal() {
    let cfg = AcousticConfig::scaled(10, 12, 4, 16);
    let model = AcousticModel::new(cfg.clone(), 5).unwrap();
    let t = 20;
    let input = Array2::from_shape_fn((t, cfg.decoder_hidden), |(i, j)| ((i * 7 + j * 3) as f64 * 0.37).sin());
    let run = |x: Array2<f64>| {
        let mut g = Graph::new(&model.params);
        let v = g.constant(x);
        let out = model.decode_tail(&mut g, v);
        g.value(out).clone()
    };
    let base = run(input.clone());
    for at in [0, 7, t - 1] {
        let mut changed = input.clone();
        changed.row_mut(at).mapv_inplace(|v| v + 0.5);
        let out = run(changed);
        for i in 0..at {
            assert_eq!(out.row(i), base.row(i), "frame {i} moved after changing frame {at}");
        }
        assert_ne!(out.row(at), base.row(at));
    }
}
