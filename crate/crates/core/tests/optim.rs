use mpdiff::mp_ops::mp_linear;
use mpdiff::optim::*;
use mpdiff::params::{Param, ParamKind, ParamSet};
use mpdiff::{Rng, Tape, Tensor};
use proptest::prelude::*;

fn one_weight(shape: &[usize], rng: &mut Rng) -> ParamSet {
    let mut s = ParamSet::new();
    s.insert(Param::new("w", ParamKind::Weight, Tensor::randn(shape, rng))).unwrap();
    s
}

#[test]
fn lr_schedule_examples() {
    let s = LrSchedule::inverse_sqrt(0.01, 1000.0);
    assert_eq!(lr_at(500.0, &s), 0.01);
    assert!((lr_at(4000.0, &s) - 0.005).abs() < 1e-15);
    let c = LrSchedule::constant(2e-4);
    for t in [0.0, 1.0, 1e9] {
        assert_eq!(lr_at(t, &c), 2e-4);
    }
    let r = LrSchedule::inverse_sqrt(0.01, 1000.0).with_rampup(100);
    assert!((lr_at(50.0, &r) - 0.005).abs() < 1e-15);
    assert_eq!(lr_at(100.0, &r), 0.01);
    let mut prev = f64::INFINITY;
    for t in (1000..20000).step_by(500) {
        let v = lr_at(t as f64, &s);
        assert!(v <= prev);
        prev = v;
    }
    assert!(LrSchedule::constant(0.0).validate().is_err());
}

#[test]
fn adam_zero_grads_leave_params() {
    let mut rng = Rng::new(1);
    let mut p = one_weight(&[3, 4], &mut rng);
    let before = p.clone();
    let mut st = AdamState::new(&p, AdamConfig::default());
    adam_step(&mut p, &[Tensor::zeros(&[3, 4])], &mut st, 0.1).unwrap();
    assert_eq!(p, before);
    assert_eq!(st.step_count(), 1);
}

#[test]
fn adam_constant_gradient_moves_by_lr() {
    let mut rng = Rng::new(2);
    let mut p = one_weight(&[2, 3], &mut rng);
    let mut st = AdamState::new(&p, AdamConfig::default());
    let g = Tensor::new(&[2, 3], vec![0.5, -2.0, 1e-3, -7.0, 3.0, 0.1]).unwrap();
    let lr = 1e-3;
    for _ in 0..200 {
        let before = p.get(0).value.clone();
        adam_step(&mut p, std::slice::from_ref(&g), &mut st, lr).unwrap();
        let delta = p.get(0).value.sub(&before).unwrap();
        for (d, gv) in delta.data().iter().zip(g.data()) {
            assert!(d.signum() == -gv.signum());
            assert!((d.abs() - lr).abs() < 1e-3 * lr + lr * 1e-8 / gv.abs());
        }
    }
}

#[test]
fn adam_is_deterministic() {
    let run = || {
        let mut rng = Rng::new(3);
        let mut p = one_weight(&[4, 4], &mut rng);
        let mut st = AdamState::new(&p, AdamConfig::default());
        for _ in 0..10 {
            let g = Tensor::randn(&[4, 4], &mut rng);
            adam_step(&mut p, &[g], &mut st, 0.01).unwrap();
        }
        p.checksum()
    };
    assert_eq!(run(), run());
}

#[test]
fn shape_mismatch_rejected() {
    let mut rng = Rng::new(4);
    let mut p = one_weight(&[2, 2], &mut rng);
    let mut st = AdamState::new(&p, AdamConfig::default());
    assert!(adam_step(&mut p, &[Tensor::zeros(&[4])], &mut st, 0.1).is_err());
    assert!(sgd_step(&mut p, &[], 0.1).is_err());
}

#[test]
fn forced_renormalize_examples() {
    let mut rng = Rng::new(5);
    let mut p = one_weight(&[6, 1, 3, 3], &mut rng);
    forced_renormalize(&mut p);
    for n in p.get(0).row_norms() {
        assert!((n - 3.0).abs() < 1e-9);
    }
    let once = p.clone();
    forced_renormalize(&mut p);
    for (a, b) in p.get(0).value.data().iter().zip(once.get(0).value.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    // gains are not touched
    let mut s = ParamSet::new();
    s.insert(Param::new("g", ParamKind::Gain, Tensor::scalar(5.0))).unwrap();
    forced_renormalize(&mut s);
    assert_eq!(s.get(0).value.item(), 5.0);
}

#[test]
fn sanitize_examples() {
    let mut g = vec![Tensor::from_slice(&[1.0, 2.0])];
    assert_eq!(sanitize_grads(&mut g), 0);
    assert_eq!(g[0].data(), &[1.0, 2.0]);
    let mut g = vec![Tensor::from_slice(&[1.0, f64::NAN, 3.0])];
    assert_eq!(sanitize_grads(&mut g), 1);
    assert_eq!(g[0].data(), &[1.0, 0.0, 3.0]);
    let mut g = vec![Tensor::full(&[4], f64::INFINITY), Tensor::full(&[1], f64::NEG_INFINITY)];
    assert_eq!(sanitize_grads(&mut g), 5);
    assert!(g.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

/// Gradient of a random smooth loss through a weight-normalized layer.
fn wn_grad(p: &ParamSet, a: &Tensor, target: &Tensor) -> Tensor {
    let tape = Tape::new();
    let w = tape.param(p.get(0).value.clone());
    let y = mp_linear(tape.constant(a.clone()), w).unwrap();
    let loss = y.sub(tape.constant(target.clone())).unwrap().sqr().mean();
    tape.backward(loss).take(w).unwrap()
}

fn row_sq(t: &Tensor, fan_in: usize) -> Vec<f64> {
    t.data().chunks(fan_in).map(|r| r.iter().map(|v| v * v).sum()).collect()
}

#[test]
fn weight_growth_lemma_exact_for_sgd() {
    let mut rng = Rng::new(6);
    for trial in 0..20 {
        let (out, fan_in) = (3 + trial % 4, 5 + trial % 7);
        let mut p = one_weight(&[out, fan_in], &mut rng);
        let a = Tensor::randn(&[16, fan_in], &mut rng);
        let target = Tensor::randn(&[16, out], &mut rng);
        let lr = 0.05 + rng.uniform();
        for _ in 0..25 {
            let g = wn_grad(&p, &a, &target);
            let before = row_sq(&p.get(0).value, fan_in);
            let gsq = row_sq(&g, fan_in);
            sgd_step(&mut p, std::slice::from_ref(&g), lr).unwrap();
            let after = row_sq(&p.get(0).value, fan_in);
            for i in 0..out {
                let expect = before[i] + lr * lr * gsq[i];
                assert!((after[i] - expect).abs() <= 1e-10 * expect, "{} vs {}", after[i], expect);
                assert!(after[i] >= before[i]);
            }
        }
    }
}

#[test]
fn adam_without_forcing_grows_weight_norms() {
    let mut rng = Rng::new(7);
    let (out, fan_in) = (8, 16);
    let mut p = one_weight(&[out, fan_in], &mut rng);
    let mut st = AdamState::new(&p, AdamConfig::default());
    let start: f64 = row_sq(&p.get(0).value, fan_in).iter().sum();
    let mut increases = 0;
    let mut prev = start;
    for _ in 0..1000 {
        // fresh minibatch every step, as in training
        let a = Tensor::randn(&[8, fan_in], &mut rng);
        let target = Tensor::randn(&[8, out], &mut rng);
        let g = wn_grad(&p, &a, &target);
        adam_step(&mut p, &[g], &mut st, 0.01).unwrap();
        let now: f64 = row_sq(&p.get(0).value, fan_in).iter().sum();
        increases += (now > prev) as usize;
        prev = now;
    }
    assert!(prev > start * 1.05, "{start} -> {prev}");
    assert!(increases > 600, "{increases}");
}

#[test]
fn forced_adam_keeps_norms_and_tangent_gradients() {
    let mut rng = Rng::new(8);
    let (out, fan_in) = (6, 12);
    let mut p = one_weight(&[out, fan_in], &mut rng);
    let a = Tensor::randn(&[32, fan_in], &mut rng);
    let target = Tensor::randn(&[32, out], &mut rng);
    let mut st = AdamState::new(&p, AdamConfig::default());
    let target_norm = (fan_in as f64).sqrt();
    for step in 0..1000 {
        forced_renormalize(&mut p);
        for n in p.get(0).row_norms() {
            assert!((n / target_norm - 1.0).abs() < 1e-6, "step {step}: {n}");
        }
        let g = wn_grad(&p, &a, &target);
        let w = &p.get(0).value;
        for (wr, gr) in w.data().chunks(fan_in).zip(g.data().chunks(fan_in)) {
            let dot: f64 = wr.iter().zip(gr).map(|(x, y)| x * y).sum();
            let nw = wr.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ng = gr.iter().map(|v| v * v).sum::<f64>().sqrt();
            if ng > 0.0 {
                assert!(dot.abs() / (nw * ng) <= 1e-6);
            }
        }
        adam_step(&mut p, &[g], &mut st, 0.01).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn forced_renormalize_any_nonzero(w in prop::collection::vec(-100.0f64..100.0, 18)) {
        prop_assume!(w.chunks(9).all(|r| r.iter().any(|v| v.abs() > 1e-6)));
        let mut s = ParamSet::new();
        s.insert(Param::new("w", ParamKind::Weight, Tensor::new(&[2, 1, 3, 3], w).unwrap())).unwrap();
        forced_renormalize(&mut s);
        for n in s.get(0).row_norms() {
            prop_assert!((n - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn lr_never_exceeds_reference(t in 0.0f64..1e7, tref in 1.0f64..1e5) {
        let s = LrSchedule::inverse_sqrt(0.01, tref);
        prop_assert!(lr_at(t, &s) <= 0.01);
    }
}
