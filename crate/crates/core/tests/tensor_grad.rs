//! Reverse-mode gradients against central differences, randomized over seeds.

use mpdiff::tensor::{grad_check, NormKind, Tape, Tensor, Var};
use mpdiff::{Result, Rng};

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

type Op = for<'t> fn(&'t Tape, Var<'t>) -> Result<Var<'t>>;

fn weighted_sum<'t>(tape: &'t Tape, y: Var<'t>) -> Result<Var<'t>> {
    // Fixed pseudo-random weights so every output element matters.
    let n = y.value().len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 13) as f64 - 6.0) / 6.0 + 0.1).collect();
    let w = tape.constant(Tensor::new(&y.shape(), w)?);
    Ok(y.mul(w)?.sum())
}

fn ops() -> Vec<(&'static str, Vec<usize>, Op)> {
    vec![
        ("add", vec![2, 3], |t, x| weighted_sum(t, x.add(x.sqr())?)),
        ("sub", vec![2, 3], |t, x| weighted_sum(t, x.sub(x.sin())?)),
        ("mul", vec![2, 3], |t, x| weighted_sum(t, x.mul(x.cos())?)),
        ("div", vec![2, 3], |t, x| weighted_sum(t, x.div(x.sqr().add_scalar(1.0))?)),
        ("sqrt", vec![4], |t, x| weighted_sum(t, x.sqr().add_scalar(0.5).sqrt())),
        ("exp", vec![4], |t, x| weighted_sum(t, x.exp())),
        ("ln", vec![4], |t, x| weighted_sum(t, x.sqr().add_scalar(0.3).ln())),
        ("cos", vec![4], |t, x| weighted_sum(t, x.cos())),
        ("silu", vec![5], |t, x| weighted_sum(t, x.silu())),
        ("sigmoid", vec![5], |t, x| weighted_sum(t, x.sigmoid())),
        ("clamp", vec![5], |t, x| weighted_sum(t, x.scale(3.0).clamp(-100.0, 100.0))),
        ("mean", vec![3, 2], |_, x| Ok(x.sqr().mean())),
        ("sum_axis", vec![2, 3, 2], |t, x| weighted_sum(t, x.sum_axis(1)?.sqr())),
        ("expand_axis", vec![2, 1, 3], |t, x| weighted_sum(t, x.expand_axis(1, 4)?.sin())),
        ("reshape", vec![2, 3], |t, x| weighted_sum(t, x.reshape(&[3, 2])?.sqr())),
        ("matmul", vec![3, 3], |t, x| weighted_sum(t, x.matmul(x.sin())?)),
        ("transpose", vec![2, 3], |t, x| weighted_sum(t, x.transpose()?.sqr())),
        ("bmm", vec![2, 2, 2], |t, x| weighted_sum(t, x.bmm(x.transpose()?)?)),
        ("concat", vec![2, 2], |t, x| weighted_sum(t, Var::concat(&[x, x.sqr()], 1)?)),
        ("slice", vec![2, 4], |t, x| weighted_sum(t, x.slice(1, 1, 3)?.sqr())),
        ("softmax", vec![2, 4], |t, x| weighted_sum(t, x.softmax(1)?)),
        ("rms_normalize", vec![2, 4, 3], |t, x| weighted_sum(t, x.normalize_axis(1, NormKind::Rms { eps: 1e-4 })?)),
        ("l2_normalize", vec![3, 4], |t, x| weighted_sum(t, x.normalize_axis(1, NormKind::L2 { eps: 1e-4 })?)),
        ("mul_scalar", vec![4], |t, x| {
            let s = x.slice(0, 0, 1)?;
            weighted_sum(t, x.mul_scalar(s)?)
        }),
        ("scale_channels", vec![2, 3, 2, 2], |t, x| {
            let s = x.slice(0, 0, 1)?.reshape(&[12])?.slice(0, 0, 3)?;
            weighted_sum(t, x.scale_channels(s)?)
        }),
        ("shift_channels", vec![2, 3, 2, 2], |t, x| {
            let s = x.sum_axis(3)?.sum_axis(2)?.reshape(&[2, 3])?;
            weighted_sum(t, x.shift_channels(s)?.sqr())
        }),
        ("conv2d_k3", vec![1, 2, 4, 4], |t, x| {
            let w = x.slice(2, 0, 3)?.slice(3, 0, 3)?; // [1, 2, 3, 3]
            let w = Var::concat(&[w, w.sin()], 0)?;
            weighted_sum(t, x.conv2d(w)?)
        }),
        ("conv2d_k1", vec![2, 3, 2, 2], |t, x| {
            let w = x.reshape(&[24])?.slice(0, 0, 6)?.reshape(&[2, 3, 1, 1])?;
            weighted_sum(t, x.conv2d(w)?)
        }),
        ("avg_pool2", vec![1, 2, 4, 4], |t, x| weighted_sum(t, x.avg_pool2()?.sqr())),
        ("upsample2", vec![1, 2, 2, 2], |t, x| weighted_sum(t, x.upsample2()?.sqr())),
    ]
}

#[test]
fn every_op_matches_central_differences_over_100_seeds() {
    for (name, shape, op) in ops() {
        for seed in 0..100u64 {
            let mut rng = Rng::new(seed);
            let x = Tensor::randn(&shape, &mut rng);
            let report = grad_check(op, &x, H, TOL).unwrap();
            assert!(
                report.passed,
                "{name} seed {seed}: max rel error {} at {} (analytic {:?}, numeric {:?})",
                report.max_rel_error, report.worst_index, report.analytic, report.numeric
            );
        }
    }
}

#[test]
fn d_sum_of_squares() {
    let tape = Tape::new();
    let x = tape.param(Tensor::from_slice(&[1.0, 2.0]));
    let y = x.sqr().sum();
    let g = tape.backward(y);
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);

    // finite-difference oracle with h = 1e-6
    let f = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let h = 1e-6;
    for (i, want) in [2.0, 4.0].iter().enumerate() {
        let mut p = vec![1.0, 2.0];
        let mut m = p.clone();
        p[i] += h;
        m[i] -= h;
        assert!(((f(&p) - f(&m)) / (2.0 * h) - want).abs() < 1e-6);
    }
}

#[test]
fn sum_has_exact_constant_gradient() {
    let mut rng = Rng::new(11);
    let x = Tensor::randn(&[3, 4], &mut rng);
    let r = grad_check(|_, x| Ok(x.sum()), &x, 1e-5, 1e-9).unwrap();
    assert!(r.passed, "{}", r.max_rel_error);
}

#[test]
fn clamp_gradient_is_indicator_of_interval() {
    let tape = Tape::new();
    let x = tape.param(Tensor::from_slice(&[-300.0, -256.0, 0.0, 255.0, 256.0, 1e4]));
    let y = x.clamp(-256.0, 256.0).sum();
    let g = tape.backward(y);
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
}

#[test]
fn untraced_tensors_get_no_gradient() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::from_slice(&[1.0, 2.0]));
    let p = tape.param(Tensor::from_slice(&[3.0, 4.0]));
    let y = c.mul(p).unwrap().sum();
    let g = tape.backward(y);
    assert!(g.get(c).is_none());
    assert_eq!(g.get(p).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn non_finite_function_is_reported_not_passed() {
    let x = Tensor::from_slice(&[-1.0, 2.0]);
    let r = grad_check(|_, x| Ok(x.ln().sum()), &x, 1e-5, 1e-5).unwrap();
    assert!(!r.finite);
    assert!(!r.passed);
}

#[test]
fn basic_values() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::from_slice(&[1.0, 2.0]));
    let b = tape.constant(Tensor::from_slice(&[3.0, 4.0]));
    assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);

    let mut rng = Rng::new(2);
    let x = Tensor::randn(&[3, 5], &mut rng);
    let i3 = tape.constant(Tensor::eye(3));
    let y = i3.matmul(tape.constant(x.clone())).unwrap();
    assert_eq!(y.value().data(), x.data());
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    let msg = a.add(b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    let msg = a.matmul(a).unwrap_err().to_string();
    assert!(msg.contains("matmul"), "{msg}");
}
