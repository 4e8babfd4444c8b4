use mpdiff::loss::*;
use mpdiff::{Rng, Tape, Tensor};

const SD: f64 = 0.5;

#[test]
fn dsm_loss_trivial_denoisers() {
    let mut rng = Rng::new(1);
    let tape = Tape::new();
    let y = tape.constant(Tensor::randn(&[4, 3], &mut rng));
    assert_eq!(dsm_loss(y, y).unwrap().item(), 0.0);
    let n = Tensor::randn(&[4, 3], &mut rng);
    let x = y.add(tape.constant(n.clone())).unwrap();
    let l = dsm_loss(x, y).unwrap().item();
    let expect = n.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
    assert!((l - expect).abs() < 1e-12);
}

#[test]
fn ideal_gaussian_denoiser_loss_and_lambda_calibration() {
    let mut rng = Rng::new(2);
    let n = 1_000_000;
    for sigma in [0.05, 0.5, 3.0] {
        let cs = SD * SD / (sigma * sigma + SD * SD);
        let mut acc = 0.0;
        for _ in 0..n {
            let y = SD * rng.normal();
            let x = y + sigma * rng.normal();
            acc += (cs * x - y).powi(2);
        }
        let mc = acc / n as f64;
        let closed = sigma * sigma * SD * SD / (sigma * sigma + SD * SD);
        assert!((mc / closed - 1.0).abs() < 0.01, "sigma {sigma}: {mc} vs {closed}");
        let lam = lambda_weight(sigma, SD).unwrap();
        assert!((lam * closed - 1.0).abs() < 1e-12);
        assert!((lam * mc - 1.0).abs() < 0.01);
    }
}

#[test]
fn lambda_examples() {
    assert!((lambda_weight(0.5, 0.5).unwrap() - 8.0).abs() < 1e-12);
    assert!((lambda_weight(1e8, 0.5).unwrap() - 4.0).abs() < 1e-9);
    assert!(matches!(lambda_weight(0.0, 0.5), Err(mpdiff::Error::Domain(_))));
}

#[test]
fn zero_uncertainty_reduces_to_lambda_weighting() {
    let tape = Tape::new();
    let sigma = [0.1, 1.0, 5.0];
    let l = tape.constant(Tensor::from_slice(&[0.3, 0.2, 0.1]));
    let u = tape.constant(Tensor::zeros(&[3]));
    let w = weighted_loss_terms(l, u, &sigma, SD).unwrap().item();
    let expect: f64 = sigma
        .iter()
        .zip([0.3, 0.2, 0.1])
        .map(|(&s, l)| lambda_weight(s, SD).unwrap() * l)
        .sum::<f64>()
        / 3.0;
    assert!((w - expect).abs() < 1e-12);
}

#[test]
fn optimum_uncertainty_is_log_lambda_loss() {
    // d/du [lambda L e^-u + u] = 0 at e^u = lambda L
    for (sigma, l) in [(0.2, 0.03), (2.0, 0.2)] {
        let tape = Tape::new();
        let lam = lambda_weight(sigma, SD).unwrap();
        let u = tape.param(Tensor::from_slice(&[(lam * l).ln()]));
        let lv = tape.constant(Tensor::from_slice(&[l]));
        let total = weighted_loss_terms(lv, u, &[sigma], SD).unwrap();
        let g = tape.backward(total).take(u).unwrap().item();
        assert!(g.abs() < 1e-12, "{g}");
    }
}

#[test]
fn gradient_scaling_at_optimal_uncertainty() {
    // toy model D = c_skip x + c_out (a + b c_in x); at the optimal u the
    // theta-gradient equals grad(L) / L for every sigma
    let mut rng = Rng::new(5);
    let theta = [0.3, -0.2];
    let mut ratios = Vec::new();
    for sigma in [0.1, 3.0] {
        let tape = Tape::new();
        let th = tape.param(Tensor::from_slice(&theta));
        let n = 256;
        let y = Tensor::randn(&[n], &mut rng).scale(SD);
        let x = y.add(&Tensor::randn(&[n], &mut rng).scale(sigma)).unwrap();
        let s2 = sigma * sigma + SD * SD;
        let (cs, co, ci) = (SD * SD / s2, sigma * SD / s2.sqrt(), 1.0 / s2.sqrt());
        let xv = tape.constant(x.clone());
        let a = th.slice(0, 0, 1).unwrap().expand_axis(0, n).unwrap();
        let b = th.slice(0, 1, 2).unwrap().expand_axis(0, n).unwrap();
        let f = a.add(b.mul(xv.scale(ci)).unwrap()).unwrap();
        let d = xv.scale(cs).add(f.scale(co)).unwrap();
        let yv = tape.constant(y);
        let l = d.sub(yv).unwrap().sqr().mean().reshape(&[1]).unwrap();
        let lval = l.item();
        let lam = lambda_weight(sigma, SD).unwrap();
        let u = tape.constant(Tensor::from_slice(&[(lam * lval).ln()]));
        let total = weighted_loss_terms(l, u, &[sigma], SD).unwrap();
        let gw = tape.backward(total).take(th).unwrap();

        let tape2 = Tape::new();
        let th2 = tape2.param(Tensor::from_slice(&theta));
        let a = th2.slice(0, 0, 1).unwrap().expand_axis(0, n).unwrap();
        let b = th2.slice(0, 1, 2).unwrap().expand_axis(0, n).unwrap();
        let xv = tape2.constant(x);
        let f = a.add(b.mul(xv.scale(ci)).unwrap()).unwrap();
        let d = xv.scale(cs).add(f.scale(co)).unwrap();
        let l2 = d.sub(tape2.constant((*yv.value()).clone())).unwrap().sqr().mean();
        let gl = tape2.backward(l2).take(th2).unwrap().scale(1.0 / lval);
        ratios.push(gw.norm() / gl.norm());
    }
    for r in &ratios {
        assert!((r - 1.0).abs() < 0.05, "{ratios:?}");
    }
    assert!((ratios[0] / ratios[1] - 1.0).abs() < 0.05);
}

#[test]
fn weighted_loss_finite_over_sigma_range() {
    let head = UncertaintyHead::new(32, &mut Rng::new(3)).unwrap();
    let tape = Tape::new();
    let w = head.bind(&tape, true);
    let mut rng = Rng::new(4);
    let y = tape.constant(Tensor::randn(&[6, 1, 4, 4], &mut rng).scale(SD));
    for dist in [NoiseDist::new(0.002f64.ln(), 1e-9).unwrap(), NoiseDist::new(80f64.ln(), 1e-9).unwrap()] {
        let out = weighted_loss(
            |x, sigma| {
                let cs: Vec<f64> = sigma.iter().map(|s| SD * SD / (s * s + SD * SD)).collect();
                mpdiff::network::scale_samples(x, &cs)
            },
            &head,
            w,
            y,
            &dist,
            SD,
            &mut rng,
        )
        .unwrap();
        assert!(out.total.item().is_finite());
        assert_eq!(out.u.len(), 6);
        let g = tape.backward(out.total).take(w).unwrap();
        assert!(g.all_finite());
    }
}

#[test]
fn uncertainty_head_is_scalar_per_sigma() {
    let head = UncertaintyHead::new(32, &mut Rng::new(9)).unwrap();
    let u = head.u(&[0.01, 0.5, 10.0]).unwrap();
    assert_eq!(u.len(), 3);
    assert!(u.iter().all(|v| v.is_finite()));
    assert!(head.u(&[0.0]).is_err());
}

#[test]
fn noise_dist_is_positive_lognormal() {
    let d = NoiseDist::default();
    let mut rng = Rng::new(6);
    let s = d.sample_n(&mut rng, 100_000);
    assert!(s.iter().all(|&v| v > 0.0));
    let m = s.iter().map(|v| v.ln()).sum::<f64>() / s.len() as f64;
    assert!((m + 0.4).abs() < 0.02);
    assert!(NoiseDist::new(0.0, 0.0).is_err());
}

#[test]
fn sigma_bucket_csv() {
    let mut b = SigmaBuckets::log_spaced(0.01, 100.0, 4);
    b.record(0.02, 0.1, 0.0, SD).unwrap();
    b.record(50.0, 0.2, 1.0, SD).unwrap();
    b.record(1e4, 0.2, 1.0, SD).unwrap();
    let csv = b.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], SigmaBuckets::HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[4].split(',').nth(2) == Some("2"));
}
