//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use lsgvae_cli::commands::{cmd_ablate, cmd_eval, cmd_train, CHECKPOINT_FILE, MSE_VARIANT, NLL_VARIANT};
use lsgvae_cli::config::{DataSource, RunConfig};
use lsgvae_core::autodiff::Graph;
use lsgvae_core::data::{gen_synthetic, FirstColumn, SplitRatios};
use lsgvae_core::gradcheck::{check_gradients, GradCheckOptions};
use lsgvae_core::metrics::{crps_samples, default_levels, nmae, qice};
use lsgvae_core::objective::{attenuation_weight, gaussian_nll, nll_graph, optimal_sigma};
use lsgvae_core::training::batch_noise;
use lsgvae_core::{
    revin, Checkpoint, Dataset, Mode, Model, ModelConfig, RngStream, SyntheticKind, SyntheticSpec, Tensor,
};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    format!("error: {e}")
}

/// Synthetic run shared by the volatility and ablation criteria.
fn synthetic_run(kind: SyntheticKind, seed: u64, out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        out: out.to_path_buf(),
        ..Default::default()
    };
    cfg.data.synthetic = SyntheticSpec {
        kind,
        length: 4000,
        dt: 0.1,
        seed,
        regime_len: 100,
    };
    cfg.model.latent_dim = 64;
    cfg.model.hidden_width = 64;
    cfg.train.beta = 0.01;
    cfg.train.grad_clip = Some(5.0);
    cfg.set_seed(seed);
    cfg
}

fn volatility(kind: SyntheticKind, threshold: f64, dir: &Path) -> Outcome {
    let cfg = synthetic_run(kind, 1, dir);
    let trained = cmd_train(&cfg).map_err(fail)?;
    let r = cmd_eval(&cfg, &trained.checkpoint_path).map_err(fail)?;
    let rho = r.volatility_rho.ok_or("no volatility correlation reported")?;
    check(
        rho >= threshold,
        format!(
            "rho = {rho:.4} (>= {threshold}), best epoch {} of {}",
            trained.report.best_epoch,
            trained.report.epochs.len()
        ),
    )
}

fn ablation(dir: &Path) -> Outcome {
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 1..=5u64 {
        let mut cfg = synthetic_run(SyntheticKind::Periodic, seed, &dir.join(format!("seed{seed}")));
        cfg.train.max_epochs = 15;
        let rows = cmd_ablate(&cfg).map_err(fail)?;
        let crps = |v: &str| rows.iter().find(|r| r.variant == v).map(|r| r.crps);
        let (nll, mse) = (
            crps(NLL_VARIANT).ok_or("missing nll row")?,
            crps(MSE_VARIANT).ok_or("missing mse row")?,
        );
        if nll < mse {
            wins += 1;
        }
        detail.push(format!("{nll:.4}/{mse:.4}"));
    }
    check(
        wins >= 4,
        format!("nll wins {wins} of 5 (>= 4); crps nll/mse {}", detail.join(" ")),
    )
}

fn theory() -> Outcome {
    // (a) autodiff gradient of the mean NLL against the closed form
    let mut rng = RngStream::new(41);
    let (t, c) = (24, 3);
    let u = rng.normal_tensor(&[t, c]);
    let mu0 = rng.normal_tensor(&[t, c]);
    let sigma0 = rng.normal_tensor(&[t, c]).map(|v| 0.2 + v.abs());
    let n = (t * c) as f64;
    let mut g = Graph::new();
    let mu = g.param("mu", mu0.clone()).map_err(fail)?;
    let sigma = g.constant(sigma0.clone()).map_err(fail)?;
    let loss = nll_graph(&mut g, mu, sigma, u.clone(), Tensor::full(&[t, c], 1.0 / n)).map_err(fail)?;
    let grads = g.backward(loss).map_err(fail)?;
    let auto = grads.get("mu").ok_or("no gradient for mu")?;
    let closed = attenuation_weight(&u, &mu0, &sigma0).map_err(fail)?;
    let mut err_a: f64 = 0.0;
    for i in 0..u.numel() {
        let (x, m, s) = (u.data()[i], mu0.data()[i], sigma0.data()[i]);
        let hand = -(x - m) / (s * s) / n;
        err_a = err_a
            .max((auto.data()[i] - hand).abs())
            .max((closed.data()[i] - hand).abs());
    }

    // (b) grid search over σ at r = 2
    let r = 2.0;
    let step = 1e-3;
    let nll_at = |s: f64| {
        gaussian_nll(
            &Tensor::from_vec(vec![r]),
            &Tensor::from_vec(vec![0.0]),
            &Tensor::from_vec(vec![s]),
        )
    };
    let mut best = (f64::INFINITY, 0.0);
    for k in 1..=10_000 {
        let s = k as f64 * step;
        let v = nll_at(s).map_err(fail)?;
        if v < best.0 {
            best = (v, s);
        }
    }
    let argmin = best.1;

    // (c) NLL at the optimal scale
    let mut err_c: f64 = 0.0;
    for r in [0.01, 0.5, 2.0, 10.0, 1e4] {
        let (u, m) = (Tensor::from_vec(vec![r]), Tensor::from_vec(vec![0.0]));
        let s = optimal_sigma(&u, &m, 1e-12).map_err(fail)?;
        let v = gaussian_nll(&u, &m, &s).map_err(fail)?;
        err_c = err_c.max((v - (r.ln() + 0.5)).abs());
    }

    // (d) attenuation shrinks as σ grows
    let grid: Vec<f64> = (0..=30).map(|k| 0.1 * 10f64.powf(k as f64 / 10.0)).collect();
    let mut monotone = true;
    for r in [0.3, 2.0, -5.0] {
        let mut prev = f64::INFINITY;
        for &s in &grid {
            let w = attenuation_weight(
                &Tensor::from_vec(vec![r]),
                &Tensor::from_vec(vec![0.0]),
                &Tensor::from_vec(vec![s]),
            )
            .map_err(fail)?
            .data()[0]
                .abs();
            monotone &= w < prev;
            prev = w;
        }
    }

    let ok = err_a < 1e-10 && (argmin - r).abs() <= step && err_c < 1e-12 && monotone;
    check(
        ok,
        format!(
            "(a) max |err| {err_a:.1e} (< 1e-10); (b) argmin σ = {argmin:.3} (step {step}); (c) max |err| {err_c:.1e} (< 1e-12); (d) monotone {monotone}"
        ),
    )
}

fn small_config(channels: usize) -> ModelConfig {
    ModelConfig {
        lookback: 48,
        horizon: 24,
        channels,
        patch_len: 12,
        latent_dim: 16,
        hidden_width: 16,
        enc_layers: 2,
        dec_layers: 2,
        embed_dim: 4,
        ..Default::default()
    }
}

fn two_channel_series(len: usize, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed);
    let data = (0..len * 2)
        .map(|i| {
            let (t, c) = ((i / 2) as f64, (i % 2) as f64);
            (0.2 * t + c).sin() * (1.0 + c) + (0.3 + 0.2 * c) * rng.normal() + 3.0 * c
        })
        .collect();
    Dataset::new(
        Tensor::new(vec![len, 2], data).expect("shape matches"),
        vec!["a".into(), "b".into()],
    )
    .expect("valid dataset")
}

fn gradients() -> Outcome {
    let model = Model::init(small_config(2), 5).map_err(fail)?;
    let ds = two_channel_series(160, 2);
    let windows: Vec<_> = [0, 40, 88]
        .iter()
        .map(|&o| ds.window(o, 48, 24))
        .collect::<Result<_, _>>()
        .map_err(fail)?;
    let refs: Vec<_> = windows.iter().collect();
    let noise = batch_noise(&model, refs.len(), &mut RngStream::new(6));
    let opts = GradCheckOptions::default();
    let r = check_gradients(&model, &refs, Some(&noise), &opts, &mut RngStream::new(7)).map_err(fail)?;
    let worst = r.max_relative_error();
    check(
        worst < 1e-4 && r.samples.len() == 50,
        format!(
            "max relative error {worst:.2e} over {} parameters (< 1e-4)",
            r.samples.len()
        ),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = RngStream::new(61);
    let s = 100_000;
    let phi0 = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mut worst_a: f64 = 0.0;
    for sigma in [0.5, 1.0, 2.0] {
        let samples = Tensor::new(vec![s, 1, 1], (0..s).map(|_| 1.0 + sigma * rng.normal()).collect()).map_err(fail)?;
        let got = crps_samples(&samples, &Tensor::new(vec![1, 1], vec![1.0]).map_err(fail)?).map_err(fail)?;
        let want = sigma * (2.0 * phi0 - 1.0 / std::f64::consts::PI.sqrt());
        worst_a = worst_a.max((got / want - 1.0).abs());
    }

    let cells = 10_000;
    let mu: Vec<f64> = (0..cells).map(|i| (i as f64 * 0.37).cos() * 2.0).collect();
    let truth = Tensor::new(vec![cells, 1], mu.iter().map(|m| m + rng.normal()).collect()).map_err(fail)?;
    let mut draws = Vec::with_capacity(100 * cells);
    for _ in 0..100 {
        draws.extend(mu.iter().map(|m| m + rng.normal()));
    }
    let q = qice(
        &Tensor::new(vec![100, cells, 1], draws).map_err(fail)?,
        &truth,
        &default_levels(),
    )
    .map_err(fail)?;

    let cases: [(&[f64], &[f64], f64); 3] = [
        (&[1.0, 2.0, 3.0, 4.0], &[2.0, 2.0, 2.0, 2.0], 0.5),
        (&[0.0, 0.0], &[1.0, -3.0], 1.0),
        (&[1.5], &[-2.0], 1.75),
    ];
    let mut exact = true;
    for (f, y, want) in cases {
        let got = nmae(&Tensor::from_vec(f.to_vec()), &Tensor::from_vec(y.to_vec())).map_err(fail)?;
        exact &= got == want;
    }

    check(
        worst_a < 0.02 && q < 0.02 && exact,
        format!("(a) crps max relative error {worst_a:.4} (< 0.02); (b) qice {q:.4} (< 0.02); (c) nmae exact {exact}"),
    )
}

fn structural(dir: &Path) -> Outcome {
    let model = Model::init(small_config(2), 9).map_err(fail)?;
    let ds = two_channel_series(200, 3);
    let w = ds.window(10, 48, 24).map_err(fail)?;
    let mut failures = Vec::new();

    // horizon never enters the forward pass
    let mut touched = w.clone();
    touched.horizon = touched.horizon.map(|v| -7.0 * v + 1e3);
    let a = model.forward(&w, Mode::Sample, &mut RngStream::new(1)).map_err(fail)?;
    let b = model
        .forward(&touched, Mode::Sample, &mut RngStream::new(1))
        .map_err(fail)?;
    if a != b {
        failures.push("horizon leaks");
    }

    // one decoder drives both spans
    let mean = |m: &Model| m.forward(&w, Mode::Mean, &mut RngStream::new(0));
    let base = mean(&model).map_err(fail)?;
    let mut bumped = model.clone();
    for v in bumped
        .params
        .get_mut("dec.out.w")
        .ok_or("no decoder output weight")?
        .data_mut()
    {
        *v *= 1.5;
    }
    let moved = mean(&bumped).map_err(fail)?;
    if base.recon.mu == moved.recon.mu || base.pred.mu == moved.pred.mu {
        failures.push("decoder not shared");
    }

    // RevIN round trip
    let x = w.lookback.map(|v| 40.0 * v - 13.0);
    let stats = revin::fit(&x, revin::DEFAULT_EPS).map_err(fail)?;
    let back = revin::denorm_location(&revin::normalize(&x, &stats).map_err(fail)?, &stats).map_err(fail)?;
    let revin_err = back
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
        .fold(0.0, f64::max);
    if revin_err > 1e-12 {
        failures.push("revin round trip");
    }

    // affine equivariance of the predictive pair
    let noise = RngStream::new(2).normal_tensor(&model.noise_shape());
    let (sa, sb) = (3.5, -20.0);
    let p0 = model.forward_with_noise(&w.lookback, &noise).map_err(fail)?;
    let p1 = model
        .forward_with_noise(&w.lookback.map(|v| sa * v + sb), &noise)
        .map_err(fail)?;
    let rel = |x: f64, y: f64| (x - y).abs() / (1.0 + y.abs());
    let mut affine_err: f64 = 0.0;
    for (d0, d1) in [(&p0.pred, &p1.pred), (&p0.recon, &p1.recon)] {
        for (m0, m1) in d0.mu.data().iter().zip(d1.mu.data()) {
            affine_err = affine_err.max(rel(*m1, sa * m0 + sb));
        }
        for (s0, s1) in d0.sigma.data().iter().zip(d1.sigma.data()) {
            affine_err = affine_err.max(rel(*s1, sa * s0));
        }
    }
    if affine_err > 1e-9 {
        failures.push("affine equivariance");
    }

    // checkpoint round trip
    let ck = Checkpoint {
        model: model.clone(),
        train_config: None,
        fixed_sigma: None,
    };
    let text = ck.to_text().map_err(fail)?;
    let back = Checkpoint::parse(&text).map_err(fail)?;
    let reload_same = back.to_text().map_err(fail)? == text
        && back.model.forward_with_noise(&w.lookback, &noise).map_err(fail)? == p0;
    if !reload_same {
        failures.push("checkpoint round trip");
    }

    // seeded end-to-end reproducibility through train and eval
    let run = |sub: &str| -> Result<(String, lsgvae_core::EvalResult), String> {
        let mut cfg = RunConfig {
            out: dir.join(sub),
            ..Default::default()
        };
        cfg.data.synthetic = SyntheticSpec {
            length: 900,
            ..Default::default()
        };
        cfg.model = small_config(1);
        cfg.train.max_epochs = 2;
        cfg.train.patience = 2;
        cfg.eval.samples = 50;
        cfg.set_seed(17);
        let trained = cmd_train(&cfg).map_err(fail)?;
        let r = cmd_eval(&cfg, &cfg.out.join(CHECKPOINT_FILE)).map_err(fail)?;
        let text = std::fs::read_to_string(&trained.checkpoint_path).map_err(fail)?;
        Ok((text, r))
    };
    if run("first")? != run("second")? {
        failures.push("end-to-end reproducibility");
    }

    check(
        failures.is_empty(),
        format!(
            "revin error {revin_err:.1e}, affine relative error {affine_err:.1e}, failed checks: {}",
            if failures.is_empty() {
                "none".to_string()
            } else {
                failures.join(", ")
            }
        ),
    )
}

/// Writes an hourly seven-channel CSV laid out like the ETT files.
fn write_ett_like(path: &Path, rows: usize) -> std::io::Result<()> {
    let (ds, _) = gen_synthetic(&SyntheticSpec {
        length: rows,
        seed: 3,
        ..Default::default()
    })
    .expect("synthetic generation");
    let mut rng = RngStream::new(4);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT")?;
    let month_days = [31, 31, 30, 31, 30, 31];
    for i in 0..rows {
        let (mut day, hour) = (i / 24, i % 24);
        let mut month = 0;
        while day >= month_days[month] {
            day -= month_days[month];
            month += 1;
        }
        write!(out, "2016-{:02}-{:02} {hour:02}:00:00", month + 7, day + 1)?;
        let base = ds.values().data()[i];
        for c in 0..7 {
            let v = 5.0 + c as f64 + (1.0 + 0.3 * c as f64) * base + 0.2 * rng.normal();
            write!(out, ",{v:.3}")?;
        }
        writeln!(out)?;
    }
    out.flush()
}

fn real_data_smoke(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(fail)?;
    let path = dir.join("ETTh_like.csv");
    write_ett_like(&path, 1500).map_err(fail)?;
    let mut cfg = RunConfig {
        out: dir.join("run"),
        ..Default::default()
    };
    cfg.data.source = DataSource::Csv;
    cfg.data.path = Some(path);
    cfg.data.first_column = FirstColumn::Auto;
    cfg.data.split = SplitRatios::ett();
    cfg.data.standardize = true;
    cfg.train.max_epochs = 2;
    cfg.train.patience = 2;
    let trained = cmd_train(&cfg).map_err(fail)?;
    let channels = trained.checkpoint.model.config.channels;
    let r = cmd_eval(&cfg, &trained.checkpoint_path).map_err(fail)?;
    let finite = r.crps.is_finite() && r.nmae.is_finite() && r.qice.is_finite();
    check(
        finite && channels == 7 && trained.report.epochs.len() == 2,
        format!(
            "C = {channels}, {} epochs, crps {:.4} nmae {:.4} qice {:.4}",
            trained.report.epochs.len(),
            r.crps,
            r.nmae,
            r.qice
        ),
    )
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let root = dir.path();
    let criteria: Vec<Criterion> = vec![
        (
            "1 volatility recovery, regime switching",
            Box::new(|| volatility(SyntheticKind::RegimeSwitching, 0.90, &root.join("c1"))),
        ),
        (
            "2 volatility recovery, periodic",
            Box::new(|| volatility(SyntheticKind::Periodic, 0.95, &root.join("c2"))),
        ),
        (
            "3 nll beats mse on heteroscedastic data",
            Box::new(|| ablation(&root.join("c3"))),
        ),
        ("4 attenuation and optimality", Box::new(theory)),
        ("5 gradient correctness", Box::new(gradients)),
        ("6 metric oracles", Box::new(metric_oracles)),
        ("7 structural invariants", Box::new(|| structural(&root.join("c7")))),
        ("8 real-data smoke", Box::new(|| real_data_smoke(&root.join("c8")))),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
