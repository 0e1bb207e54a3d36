//! The exit gate: nine numbered end-to-end checks covering the suppression
//! operator, calibration, water removal, network gradients and training,
//! method orderings, the low-rank model, the timing protocol, and the full
//! phantom pipeline. Each check prints one `criterion N: PASS/FAIL` line
//! (run with `--nocapture` to watch); the test fails if any check fails.
//!
//! Checks that assert wall-clock budgets or train real networks only make
//! sense optimized, so the whole gate is ignored in debug builds: run it
//! with `cargo test --release --test acceptance`.

use mrsi_scrub::lipid::{build_basis, build_operator, calibrate_beta, LipidBasis, LipidOperator};
use mrsi_scrub::lowrank;
use mrsi_scrub::metrics::{band_abs_integral, nrmse};
use mrsi_scrub::simgen::{
    build_phantom, build_phantom_pair, encode_and_reconstruct, make_training_set, LipidConfig,
    MetabConfig, MetaboliteBasis, NuisanceMode, PhantomConfig, SpectrumSource, TrainingSample,
    WaterConfig,
};
use mrsi_scrub::spectrum::{Domain, SpectralAxis, Spectrum};
use mrsi_scrub::volume::{volume_to_bytes, MrsiVolume};
use mrsi_scrub::ynet::{
    backward, forward, forward_eval, infer, mse, mse_grad, train, train_epochs, TrainConfig,
    TrainState, YNetConfig, YNetWeights,
};
use mrsi_scrub::{cli, Error};
use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

const METAB_BAND: (f64, f64) = (1.9, 4.2);
const LIPID_BAND: (f64, f64) = (0.7, 1.9);
const WATER_BAND: (f64, f64) = (4.2, 5.2);

/// Weights and fixtures criteria pass forward (6 and 9 reuse 5's network).
#[derive(Default)]
struct Ctx {
    axis128: Option<SpectralAxis>,
    op128: Option<LipidOperator>,
    walinet: Option<YNetWeights>,
}

fn axis(n: usize) -> SpectralAxis {
    SpectralAxis::new(n, 2500.0, 297.22, 4.7).expect("valid axis")
}

fn freq_spectrum(samples: Vec<Complex64>, ax: SpectralAxis) -> Spectrum {
    Spectrum { samples, domain: Domain::Frequency, axis: ax }
}

fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) }
}

/// Sum of |pred - truth| over a ppm band: how much of the band's content is
/// not explained by the truth.
fn band_residual(pred: &Spectrum, truth: &Spectrum, band: (f64, f64)) -> f64 {
    let diff: Vec<Complex64> =
        pred.samples.iter().zip(&truth.samples).map(|(a, b)| a - b).collect();
    band_abs_integral(&freq_spectrum(diff, pred.axis), band)
}

// ---------------------------------------------------------------------------
// independent oracles: dense complex solve and one-sided Jacobi singular
// values, implemented here so they share no code with the library paths
// ---------------------------------------------------------------------------

/// Solve A x = b by Gauss-Jordan with partial pivoting, then two passes of
/// iterative refinement (A is well-conditioned enough for fixed-precision
/// refinement to pay off at large beta).
fn dense_solve(a: &Array2<Complex64>, b: &[Complex64]) -> Vec<Complex64> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n);
    let solve_once = |rhs: &[Complex64]| -> Vec<Complex64> {
        let mut m = a.clone();
        let mut x = rhs.to_vec();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| m[[i, col]].norm().total_cmp(&m[[j, col]].norm()))
                .unwrap();
            if piv != col {
                for j in 0..n {
                    let t = m[[piv, j]];
                    m[[piv, j]] = m[[col, j]];
                    m[[col, j]] = t;
                }
                x.swap(piv, col);
            }
            let d = m[[col, col]];
            assert!(d.norm() > 0.0, "singular system");
            for j in 0..n {
                m[[col, j]] /= d;
            }
            x[col] /= d;
            for i in 0..n {
                if i == col {
                    continue;
                }
                let f = m[[i, col]];
                if f.norm() == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let v = m[[col, j]];
                    m[[i, j]] -= f * v;
                }
                let xc = x[col];
                x[i] -= f * xc;
            }
        }
        x
    };
    let mut x = solve_once(b);
    for _ in 0..2 {
        // r = b - A x, x += A^{-1} r
        let mut r = b.to_vec();
        for i in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for j in 0..n {
                acc += a[[i, j]] * x[j];
            }
            r[i] -= acc;
        }
        let dx = solve_once(&r);
        for i in 0..n {
            x[i] += dx[i];
        }
    }
    x
}

/// `I + beta L L^H` as a dense matrix, from the basis columns.
fn dense_system(basis: &LipidBasis, beta: f64) -> Array2<Complex64> {
    let (n, m) = basis.l.dim();
    let mut a = Array2::from_elem((n, n), Complex64::new(0.0, 0.0));
    for i in 0..n {
        a[[i, i]] = Complex64::new(1.0, 0.0);
        for j in 0..n {
            let mut g = Complex64::new(0.0, 0.0);
            for k in 0..m {
                g += basis.l[[i, k]] * basis.l[[j, k]].conj();
            }
            a[[i, j]] += beta * g;
        }
    }
    a
}

/// Singular values by one-sided Jacobi on the columns, descending.
fn singular_values(a: &Array2<Complex64>) -> Vec<f64> {
    // work on the orientation with fewer columns
    let mut m = if a.nrows() >= a.ncols() { a.clone() } else { a.t().mapv(|z| z.conj()) };
    let (rows, cols) = m.dim();
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..cols {
            for q in p + 1..cols {
                let (mut alpha, mut beta) = (0.0f64, 0.0f64);
                let mut gamma = Complex64::new(0.0, 0.0);
                for s in 0..rows {
                    alpha += m[[s, p]].norm_sqr();
                    beta += m[[s, q]].norm_sqr();
                    gamma += m[[s, p]].conj() * m[[s, q]];
                }
                let scale = (alpha * beta).sqrt();
                if scale == 0.0 || gamma.norm() <= 1e-15 * scale {
                    continue;
                }
                off = off.max(gamma.norm() / scale);
                // phase q so the pair's Gram matrix is real, then rotate
                let phase = gamma / gamma.norm();
                let g = gamma.norm();
                let (c, s) = if alpha == beta {
                    (std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2)
                } else {
                    let tau = (beta - alpha) / (2.0 * g);
                    let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    (c, c * t)
                };
                for r in 0..rows {
                    let up = m[[r, p]];
                    let uq = m[[r, q]] * phase.conj();
                    m[[r, p]] = c * up - s * uq;
                    m[[r, q]] = s * up + c * uq;
                }
            }
        }
        if off < 1e-14 {
            break;
        }
    }
    let mut sv: Vec<f64> =
        (0..cols).map(|j| (0..rows).map(|i| m[[i, j]].norm_sqr()).sum::<f64>().sqrt()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

fn frob(a: &Array2<Complex64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// A random basis of `m` smooth-ish complex columns over `n` points, scaled
/// to unit maximum magnitude like the library's own basis builder.
fn random_basis(n: usize, m: usize, rng: &mut ChaCha8Rng) -> LipidBasis {
    let ax = axis(n);
    let mut l = Array2::from_elem((n, m), Complex64::new(0.0, 0.0));
    for j in 0..m {
        for i in 0..n {
            l[[i, j]] = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let peak = (0..n).map(|i| l[[i, j]].norm()).fold(0.0f64, f64::max);
        for i in 0..n {
            l[[i, j]] /= peak;
        }
    }
    LipidBasis { l, axis: ax, excluded: 0 }
}

// ---------------------------------------------------------------------------
// the nine criteria
// ---------------------------------------------------------------------------

fn criterion_1(_ctx: &mut Ctx) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for i in 0..50 {
        let n = rng.gen_range(16..=64usize);
        let m = rng.gen_range(1..=16usize);
        let basis = random_basis(n, m, &mut rng);
        let beta = match i {
            0 => 0.0,
            1 => 1e6,
            _ => 10f64.powf(rng.gen_range(-2.0..6.0)),
        };
        let op = build_operator(&basis, beta).expect("operator builds");
        let v: Vec<Complex64> = (0..n)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let sp = freq_spectrum(v.clone(), basis.axis);
        let ours = op.apply(&sp).expect("apply succeeds");
        let reference = dense_solve(&dense_system(&basis, beta), &v);
        let worst = ours
            .samples
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0f64, f64::max);
        assert!(
            worst <= 1e-8,
            "instance {i} (n={n}, m={m}, beta={beta:.3e}): eigen vs dense differ by {worst:.3e}"
        );

        let id = build_operator(&basis, 0.0).expect("identity operator builds");
        let out = id.apply(&sp).expect("apply succeeds");
        let worst =
            out.samples.iter().zip(&v).map(|(a, b)| (a - b).norm()).fold(0.0f64, f64::max);
        assert!(worst <= 1e-12, "instance {i}: beta = 0 is not the identity ({worst:.3e})");
    }
    let took = t0.elapsed();
    assert!(took < Duration::from_secs(5), "operator checks took {took:.2?}, budget 5 s");
}

fn criterion_2(_ctx: &mut Ctx) {
    let target = 0.938;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for i in 0..20 {
        let n = rng.gen_range(48..=64usize);
        let m = rng.gen_range(4..=12usize);
        let basis = random_basis(n, m, &mut rng);
        let beta = calibrate_beta(&basis, target, 1e-3).expect("calibration converges");
        let op = build_operator(&basis, beta).expect("operator builds");
        let lib_diag = op.mean_abs_diag();

        // dense-inverse oracle: mean |diag| of (I + beta L L^H)^{-1}
        let a = dense_system(&basis, beta);
        let mut acc = 0.0;
        for k in 0..n {
            let mut e = vec![Complex64::new(0.0, 0.0); n];
            e[k] = Complex64::new(1.0, 0.0);
            acc += dense_solve(&a, &e)[k].norm();
        }
        let dense_diag = acc / n as f64;
        assert!(
            (lib_diag - dense_diag).abs() <= 1e-8,
            "instance {i}: eigen diagonal {lib_diag:.9} vs dense {dense_diag:.9}"
        );
        assert!(
            (lib_diag - target).abs() <= 1e-3,
            "instance {i}: calibrated mean |diag| {lib_diag:.5} misses {target} +- 0.001"
        );

        // more suppression (larger beta) always lowers the mean diagonal
        let lo = build_operator(&basis, beta * 0.25).unwrap().mean_abs_diag();
        let hi = build_operator(&basis, beta * 4.0).unwrap().mean_abs_diag();
        assert!(
            lo > lib_diag && lib_diag > hi,
            "instance {i}: mean |diag| not monotone in beta ({lo:.5}, {lib_diag:.5}, {hi:.5})"
        );
    }
}

fn criterion_3(_ctx: &mut Ctx) {
    let t0 = Instant::now();
    let ax = axis(512);
    let dt = 1.0 / ax.bandwidth_hz;

    // three well-separated noiseless damped sinusoids, decomposed at rank 6
    let truth = [(-400.0, 8.0, 2.5, 0.4), (150.0, 15.0, 1.0, -1.2), (600.0, 25.0, 4.0, 2.0)];
    let mut fid = vec![Complex64::new(0.0, 0.0); ax.n_points];
    for &(f, d, a, ph) in &truth {
        for (t, z) in fid.iter_mut().enumerate() {
            let tt = t as f64 * dt;
            *z += a * (Complex64::new(-d * tt, TAU * f * tt + ph)).exp();
        }
    }
    let fid = Spectrum { samples: fid, domain: Domain::Time, axis: ax };
    let comps = mrsi_scrub::hlsvd::hsvd_decompose(&fid, 6).expect("decomposition succeeds");
    for &(f, _, a, _) in &truth {
        let best = comps
            .iter()
            .min_by(|x, y| (x.frequency_hz - f).abs().total_cmp(&(y.frequency_hz - f).abs()))
            .expect("components exist");
        assert!(
            (best.frequency_hz - f).abs() <= 0.1,
            "frequency {f} Hz recovered as {:.3} Hz",
            best.frequency_hz
        );
        assert!(
            (best.amplitude - a).abs() <= 0.01 * a,
            "amplitude {a} recovered as {:.4}",
            best.amplitude
        );
    }

    // a pure water draw loses at least 40 dB of energy
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let energy = |s: &Spectrum| s.samples.iter().map(|z| z.norm_sqr()).sum::<f64>();
    for _ in 0..5 {
        let water = SpectrumSource::WaterGen(WaterConfig::default())
            .draw(ax, &mut rng)
            .expect("water draws");
        let before = water.to_time();
        let after = mrsi_scrub::hlsvd::remove_water(&before, 32, WATER_BAND)
            .expect("water removal succeeds");
        let ratio = energy(&after) / energy(&before);
        assert!(ratio <= 1e-4, "water energy only dropped to {ratio:.3e} (needs <= 1e-4)");
    }

    // a lone out-of-band peak passes through nearly untouched
    let f = ax.ppm_to_freq(2.0);
    let lone: Vec<Complex64> = (0..ax.n_points)
        .map(|t| {
            let tt = t as f64 * dt;
            3.0 * Complex64::new(-10.0 * tt, TAU * f * tt + 0.7).exp()
        })
        .collect();
    let lone = Spectrum { samples: lone, domain: Domain::Time, axis: ax };
    let after = mrsi_scrub::hlsvd::remove_water(&lone, 32, WATER_BAND).expect("removal succeeds");
    let change = (energy(&after) - energy(&lone)).abs() / energy(&lone);
    assert!(change < 0.01, "out-of-band peak energy changed by {change:.3e}");

    let took = t0.elapsed();
    assert!(took < Duration::from_secs(10), "water-removal checks took {took:.2?}, budget 10 s");
}

fn criterion_4(_ctx: &mut Ctx) {
    let t0 = Instant::now();
    let ycfg = YNetConfig { depth: 2, base_channels: 4, padded_length: 32, ..YNetConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let w = YNetWeights::init(&ycfg, &mut rng).expect("weights init");
    let batch = 2;
    let mut draw = |shape: (usize, usize, usize)| {
        Array3::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    };
    let x1 = draw((2, batch, 32));
    let x2 = draw((2, batch, 32));
    let target = draw((2, batch, 32));

    let (y, cache) = forward(&w, &x1, &x2, false, &mut rng).expect("forward succeeds");
    let analytic = backward(&w, &cache, &mse_grad(&y, &target)).expect("backward succeeds");
    assert_eq!(analytic.len(), w.num_params());

    let h = 1e-5;
    let base = w.params_flat();
    let mut probe = w.clone();
    let mut worst = (0.0f64, 0usize);
    for k in 0..base.len() {
        let mut p = base.clone();
        p[k] = base[k] + h;
        probe.set_params_flat(&p).unwrap();
        let plus = mse(&forward_eval(&probe, &x1, &x2).unwrap(), &target);
        p[k] = base[k] - h;
        probe.set_params_flat(&p).unwrap();
        let minus = mse(&forward_eval(&probe, &x1, &x2).unwrap(), &target);
        let numeric = (plus - minus) / (2.0 * h);
        let rel = (analytic[k] - numeric).abs() / (analytic[k].abs() + numeric.abs()).max(1e-8);
        if rel > worst.0 {
            worst = (rel, k);
        }
    }
    assert!(
        worst.0 <= 1e-4,
        "parameter {} disagrees with central differences: rel {:.3e}",
        worst.1,
        worst.0
    );
    let took = t0.elapsed();
    assert!(took < Duration::from_secs(60), "gradient check took {took:.2?}, budget 60 s");
}

/// The operator every network criterion shares: calibrated on a pocket
/// phantom over the 128-point axis.
fn pocket_operator(ax: SpectralAxis) -> LipidOperator {
    let basis = MetaboliteBasis::default_brain();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let ph = build_phantom(&PhantomConfig::new(16, 16, ax), &basis, &mut rng).expect("phantom");
    let lb = build_basis(&ph).expect("scalp basis");
    let beta = calibrate_beta(&lb, 0.938, 1e-3).expect("calibration");
    build_operator(&lb, beta).expect("operator")
}

fn training_samples(
    n: usize,
    ax: SpectralAxis,
    op: &LipidOperator,
    mode: NuisanceMode,
    seed: u64,
) -> Vec<TrainingSample> {
    let basis = MetaboliteBasis::default_brain();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    make_training_set(
        n,
        &basis,
        &MetabConfig::default(),
        &SpectrumSource::LipidGen(LipidConfig::default()),
        &SpectrumSource::WaterGen(WaterConfig::default()),
        op,
        mode,
        ax,
        &mut rng,
    )
    .expect("training set generates")
}

/// The stable desk-scale optimizer settings: the default rate of 0.01 is
/// tuned for far larger corpora and diverges on 2 000 samples.
fn toy_train_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs, lr: 1e-3, seed, ..TrainConfig::default() }
}

fn criterion_5(ctx: &mut Ctx) {
    let t0 = Instant::now();
    let ax = axis(128);
    let op = pocket_operator(ax);
    let samples = training_samples(2000, ax, &op, NuisanceMode::LipidAndWater, 2002);
    let (tr, va) = samples.split_at(1800);
    let ycfg = YNetConfig::with_padded_length(128);
    let tcfg = toy_train_config(50, 7);

    let (weights, history) = train(tr, va, &tcfg, &ycfg).expect("training runs");
    let took = t0.elapsed();

    assert_eq!(history.len(), 51, "epoch 0 baseline plus 50 trained epochs");
    let before = history[0].val_mse;
    let after = history.last().unwrap().val_mse;
    assert!(
        after <= 0.2 * before,
        "validation MSE fell only from {before:.4e} to {after:.4e} (needs <= 20%)"
    );
    assert!(took <= Duration::from_secs(30 * 60), "training took {took:.2?}, budget 30 min");

    // determinism: a fresh state replays the first epochs loss-for-loss
    // bitwise; the library's split-run test extends this to full weights
    let mut st = TrainState::fresh(&tcfg, &ycfg).expect("fresh state");
    let h3 = train_epochs(&mut st, tr, va, &toy_train_config(3, 7)).expect("replay runs");
    for (replay, original) in h3.iter().zip(&history[1..]) {
        assert!(
            replay.train_mse == original.train_mse && replay.val_mse == original.val_mse,
            "epoch {} differs between runs with one seed",
            replay.epoch
        );
    }

    ctx.axis128 = Some(ax);
    ctx.op128 = Some(op);
    ctx.walinet = Some(weights);
}

fn criterion_6(ctx: &mut Ctx) {
    let ax = *ctx.axis128.as_ref().expect("criterion 5 supplies the axis");
    let op = ctx.op128.as_ref().expect("criterion 5 supplies the operator");
    let walinet = ctx.walinet.as_ref().expect("criterion 5 supplies the trained network");

    // the lipid-only twin trains on lipid-only samples
    let lip_samples = training_samples(2000, ax, op, NuisanceMode::LipidOnly, 3003);
    let (tr, va) = lip_samples.split_at(1800);
    let ycfg = YNetConfig::with_padded_length(128);
    let (lipnet, _) = train(tr, va, &toy_train_config(25, 8), &ycfg).expect("training runs");

    // held-out draws the training never saw
    let held_wal = training_samples(128, ax, op, NuisanceMode::LipidAndWater, 4004);
    let (mut net_err, mut l2_err) = (Vec::new(), Vec::new());
    for s in &held_wal {
        let (cleaned, _) = infer(walinet, &s.x1, op).expect("inference succeeds");
        net_err.push(nrmse(&cleaned, &s.clean_m, METAB_BAND).expect("nrmse"));
        l2_err.push(nrmse(&s.x2, &s.clean_m, METAB_BAND).expect("nrmse"));
    }
    let (net_med, l2_med) = (median(&mut net_err), median(&mut l2_err));
    assert!(
        net_med < l2_med,
        "metabolite-band NRMSE: network median {net_med:.3} not below projection median {l2_med:.3}"
    );

    let held_lip = training_samples(128, ax, op, NuisanceMode::LipidOnly, 5005);
    let (mut net_res, mut l2_res) = (Vec::new(), Vec::new());
    for s in &held_lip {
        let (cleaned, _) = infer(&lipnet, &s.x1, op).expect("inference succeeds");
        net_res.push(band_residual(&cleaned, &s.clean_m, LIPID_BAND));
        l2_res.push(band_residual(&s.x2, &s.clean_m, LIPID_BAND));
    }
    let (net_med, l2_med) = (median(&mut net_res), median(&mut l2_res));
    assert!(
        net_med < l2_med,
        "lipid-band residual: network median {net_med:.3e} not below projection median {l2_med:.3e}"
    );
}

fn criterion_7(_ctx: &mut Ctx) {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let (nx, ny, npts) = (8usize, 6usize, 96usize);
    let ax = axis(npts);

    // the oracle itself must reproduce a known spectrum before it judges
    let mut known = Array2::from_elem((10, 4), Complex64::new(0.0, 0.0));
    for (i, s) in [5.0, 3.0, 2.0, 0.5].iter().enumerate() {
        known[[i, i]] = Complex64::new(*s, 0.0);
    }
    let sv = singular_values(&known);
    for (got, want) in sv.iter().zip(&[5.0, 3.0, 2.0, 0.5]) {
        assert!((got - want).abs() < 1e-12, "oracle self-check failed: {got} vs {want}");
    }

    let mut volume_from = |data: &Array2<Complex64>| {
        let mut v = MrsiVolume::zeros(nx, ny, ax);
        v.data.assign(data);
        v.brain_mask = vec![true; nx * ny];
        v.scalp_mask = vec![false; nx * ny];
        v.has_masks = true;
        v
    };

    // exact rank: a rank-5 matrix reconstructs to rounding
    let low = {
        let b = Array2::from_shape_fn((nx * ny, 5), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let c = Array2::from_shape_fn((5, npts), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        b.dot(&c)
    };
    let model = lowrank::fit(&volume_from(&low), 5).expect("fit succeeds");
    let err = frob(&(&model.u.dot(&model.v) - &low)) / frob(&low);
    assert!(err <= 1e-10, "rank-5 input reconstructed with relative error {err:.3e}");

    // Eckart-Young: the rank-12 fit error matches the optimum from the
    // trailing singular values
    let full = Array2::from_shape_fn((nx * ny, npts), |_| {
        Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    });
    let k = 12;
    let model = lowrank::fit(&volume_from(&full), k).expect("fit succeeds");
    let ours = frob(&(&model.u.dot(&model.v) - &full));
    let optimal = singular_values(&full)[k..].iter().map(|s| s * s).sum::<f64>().sqrt();
    let gap = (ours - optimal) / frob(&full);
    assert!(gap.abs() <= 1e-8, "rank-{k} error {ours:.9e} vs optimal {optimal:.9e}");

    // the post-cleanup denoise step defaults to rank 40
    use clap::Parser;
    let parsed = cli::Cli::try_parse_from([
        "mrsi-scrub", "remove", "--rank", "--input", "in.mrsx", "--out", "out.mrsx",
    ])
    .expect("parses");
    match parsed.cmd {
        cli::Cmd::Remove(a) => assert_eq!(a.rank, Some(40), "bare --rank must mean rank 40"),
        _ => unreachable!("remove was requested"),
    }
}

fn criterion_8(_ctx: &mut Ctx) {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = dir.path().join("bench");
    let code = cli::run([
        "mrsi-scrub",
        "bench",
        "--seed",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "bench must succeed");
    let summary = std::fs::read_to_string(out.join("summary.txt")).expect("summary exists");
    let field = |key: &str| -> f64 {
        summary
            .lines()
            .find_map(|l| l.strip_prefix(key)?.strip_prefix(" = ")?.trim().parse().ok())
            .unwrap_or_else(|| panic!("summary lacks `{key}`:\n{summary}"))
    };
    let r2 = field("hlsvd_scaling_r2");
    assert!(r2 >= 0.95, "water-removal scaling R^2 = {r2}");
    let speedup = field("speedup_walinet_vs_hlsvd");
    assert!(speedup >= 5.0, "network speedup over rank-32 water removal = {speedup}");
}

fn criterion_9(ctx: &mut Ctx) {
    let ax = *ctx.axis128.as_ref().expect("criterion 5 supplies the axis");
    let weights = ctx.walinet.as_ref().expect("criterion 5 supplies the trained network");
    let basis = MetaboliteBasis::default_brain();

    let run_chain = || -> Result<(MrsiVolume, MrsiVolume, MrsiVolume), Error> {
        let mut rng = ChaCha8Rng::seed_from_u64(606);
        let (vol, truth) = build_phantom_pair(&PhantomConfig::new(16, 16, ax), &basis, &mut rng)?;
        let vol = encode_and_reconstruct(&vol).b0_correct();
        let lb = build_basis(&vol)?;
        let op = build_operator(&lb, calibrate_beta(&lb, 0.938, 1e-3)?)?;
        let mut cleaned = vol.clone();
        for x in 0..vol.nx {
            for y in 0..vol.ny {
                let fid = vol.spectrum_at(x, y);
                if fid.samples.iter().all(|z| z.re == 0.0 && z.im == 0.0) {
                    continue;
                }
                let (m_tilde, _) = infer(weights, &fid.to_frequency(), &op)?;
                cleaned.set_fid(x, y, &m_tilde.to_time().samples);
            }
        }
        let model = lowrank::fit(&cleaned, 40)?;
        let rows = model.u.dot(&model.v);
        for (row, &(x, y)) in model.voxel_index.iter().enumerate() {
            let idx = cleaned.voxel_index(x, y);
            for t in 0..ax.n_points {
                cleaned.data[[idx, t]] = rows[[row, t]];
            }
        }
        Ok((vol, cleaned, truth))
    };

    let (vol, cleaned, truth) = run_chain().expect("pipeline runs");
    let (_, cleaned2, _) = run_chain().expect("pipeline runs twice");
    assert_eq!(
        volume_to_bytes(&cleaned).unwrap(),
        volume_to_bytes(&cleaned2).unwrap(),
        "one seed must give one cleaned volume"
    );

    let (mut brain, mut water_down, mut lipid_down) = (0usize, 0usize, 0usize);
    for x in 0..vol.nx {
        for y in 0..vol.ny {
            if !vol.brain_mask[vol.voxel_index(x, y)] {
                continue;
            }
            brain += 1;
            let before = vol.spectrum_at(x, y).to_frequency();
            let after = cleaned.spectrum_at(x, y).to_frequency();
            let t = truth.spectrum_at(x, y).to_frequency();
            if band_residual(&after, &t, WATER_BAND) < band_residual(&before, &t, WATER_BAND) {
                water_down += 1;
            }
            if band_residual(&after, &t, LIPID_BAND) < band_residual(&before, &t, LIPID_BAND) {
                lipid_down += 1;
            }
        }
    }
    assert!(brain > 0, "the phantom has brain voxels");
    let need = (0.95 * brain as f64).ceil() as usize;
    assert!(
        water_down >= need,
        "water-band residual fell in {water_down}/{brain} brain voxels (needs {need})"
    );
    assert!(
        lipid_down >= need,
        "lipid-band residual fell in {lipid_down}/{brain} brain voxels (needs {need})"
    );
}

// ---------------------------------------------------------------------------

fn payload(e: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = e.downcast_ref::<String>() {
        s.clone()
    } else if let Some(s) = e.downcast_ref::<&str>() {
        (*s).to_string()
    } else {
        "panic with a non-string payload".to_string()
    }
}

#[test]
#[cfg_attr(debug_assertions, ignore = "wall-clock budgets need optimized code: cargo test --release --test acceptance")]
fn gate() {
    let mut ctx = Ctx::default();
    let mut failures = Vec::new();
    let mut run = |n: usize, name: &str, body: &mut dyn FnMut(&mut Ctx)| {
        match catch_unwind(AssertUnwindSafe(|| body(&mut ctx))) {
            Ok(()) => println!("criterion {n}: PASS — {name}"),
            Err(e) => {
                println!("criterion {n}: FAIL — {name} — {}", payload(e));
                failures.push(n);
            }
        }
    };
    run(1, "suppression operator matches the dense inverse", &mut criterion_1);
    run(2, "calibration hits the target diagonal, monotonically", &mut criterion_2);
    run(3, "water removal recovers, suppresses and spares", &mut criterion_3);
    run(4, "network gradients match central differences", &mut criterion_4);
    run(5, "toy training converges deterministically on budget", &mut criterion_5);
    run(6, "trained networks beat projection on held-out draws", &mut criterion_6);
    run(7, "low-rank fit is Eckart-Young optimal, default rank 40", &mut criterion_7);
    run(8, "network at least 5x faster than water removal, linear scaling", &mut criterion_8);
    run(9, "phantom pipeline deterministic, residuals fall brain-wide", &mut criterion_9);
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
