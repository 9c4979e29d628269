//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hypsep::autodiff::{finite_diff_check, Bindings, Graph, Tensor};
use hypsep::certainty::{MC_DROPOUT_RATE, MC_PASSES};
use hypsep::data::{self, build_manifest, generate_split, Track, TEST, TRAIN, VALIDATION};
use hypsep::dsp::{snr_db, DspConfig, Stft, Waveform};
use hypsep::geometry::{
    distance, exp0, log0, mlr_logits, mobius_add, Curvature, Hyperplane, MlrMode, PoincarePoint, TangentVector,
};
use hypsep::model::HierarchySpec;
use hypsep::objectives::{hierarchical_term, HeadTargets, LossConfig, LossKind};
use hypsep::pipeline::{self, certainty_compare, evaluate_report, threshold_sweep, EvaluationReport, RunConfig};

const DATA_SEED: u64 = 0;
const GEOMETRY_SAMPLES: usize = 10_000;
const MC_TRACKS: usize = 10;

type Outcome = Result<String, String>;

struct Suite {
    failed: usize,
}

impl Suite {
    fn record(&mut self, name: &str, outcome: Outcome) {
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    if elapsed < limit {
        Ok(())
    } else {
        Err(format!(
            "{what} took {:.1} s, limit {} s",
            elapsed.as_secs_f64(),
            limit.as_secs()
        ))
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Uniform direction, radius up to `frac` of the ball radius.
fn ball_point(rng: &mut ChaCha8Rng, dim: usize, c: Curvature, frac: f64) -> PoincarePoint {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = rng.random_range(0.0..frac) / c.sqrt();
    let n = norm(&v).max(1e-12);
    PoincarePoint::new(v.iter().map(|x| x / n * r).collect(), c).expect("inside the ball")
}

/// `d(x, y) = acosh(1 + 2c|x-y|² / ((1-c|x|²)(1-c|y|²))) / √c`.
fn acosh_distance(x: &[f64], y: &[f64], c: f64) -> f64 {
    let d2 = gap(x, y).powi(2);
    let nx = norm(x).powi(2);
    let ny = norm(y).powi(2);
    (1.0 + 2.0 * c * d2 / ((1.0 - c * nx) * (1.0 - c * ny))).acosh() / c.sqrt()
}

fn geometry_suite() -> Outcome {
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let curvatures = [0.1, 0.5, 1.0, 2.0];
    let mut worst = [0.0f64; 6];
    for i in 0..GEOMETRY_SAMPLES {
        let c = Curvature::new(curvatures[i % curvatures.len()]).map_err(|e| e.to_string())?;
        let dim = 2 + i % 7;
        let x = ball_point(&mut rng, dim, c, 0.9);
        let y = ball_point(&mut rng, dim, c, 0.9);
        let z = ball_point(&mut rng, dim, c, 0.9);
        let o = PoincarePoint::origin(dim, c);
        let scale = 1.0 / c.sqrt();
        let err = |e: hypsep::Error| e.to_string();

        // identities of the Möbius addition
        let e0 = gap(mobius_add(&x, &o).map_err(err)?.coords(), x.coords())
            .max(gap(mobius_add(&o, &x).map_err(err)?.coords(), x.coords()))
            .max(norm(mobius_add(&x.neg(), &x).map_err(err)?.coords()));
        let xy = mobius_add(&x, &y).map_err(err)?;
        let e1 = gap(mobius_add(&x.neg(), &xy).map_err(err)?.coords(), y.coords());
        worst[0] = worst[0].max(e0 / scale);
        worst[1] = worst[1].max(e1 / scale);

        // exp0 and log0 are inverse
        let back = exp0(&log0(&y).map_err(err)?, c).map_err(err)?;
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0) * scale).collect();
        let v_back = log0(&exp0(&TangentVector(v.clone()), c).map_err(err)?).map_err(err)?;
        worst[2] = worst[2]
            .max(gap(back.coords(), y.coords()) / scale)
            .max(gap(&v_back.0, &v) / norm(&v).max(scale));

        // metric axioms and the closed form
        let dxy = distance(&x, &y).map_err(err)?;
        let dyx = distance(&y, &x).map_err(err)?;
        let dyz = distance(&y, &z).map_err(err)?;
        let dxz = distance(&x, &z).map_err(err)?;
        let dxx = distance(&x, &x).map_err(err)?;
        ensure(dxy > 0.0 && dxx.abs() < 1e-9 * scale, || {
            format!("identity of indiscernibles at sample {i}")
        })?;
        worst[3] = worst[3].max((dxy - dyx).abs() / dxy.max(scale));
        worst[4] = worst[4].max((dxz - dxy - dyz).max(0.0) / dxz.max(scale));
        worst[5] = worst[5].max((dxy - acosh_distance(x.coords(), y.coords(), c.value())).abs() / dxy.max(scale));
    }
    let limits = [1e-12, 1e-9, 1e-9, 1e-12, 1e-12, 1e-8];
    let names = [
        "neutral/inverse",
        "left cancellation",
        "exp0/log0",
        "symmetry",
        "triangle",
        "closed-form distance",
    ];
    for ((w, l), n) in worst.iter().zip(limits).zip(names) {
        ensure(*w <= l, || format!("{n}: error {w:.2e} above {l:.0e}"))?;
    }

    // c → 0: the hyperbolic logit approaches 4<z - p, a>
    let c = Curvature::new(1e-8).map_err(|e| e.to_string())?;
    let mut hyp = Vec::new();
    let mut flat = Vec::new();
    for _ in 0..GEOMETRY_SAMPLES {
        let z: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let plane = Hyperplane::new(PoincarePoint::new(p.clone(), c).map_err(|e| e.to_string())?, a.clone())
            .map_err(|e| e.to_string())?;
        hyp.push(mlr_logits(&z, std::slice::from_ref(&plane), MlrMode::Hyperbolic).map_err(|e| e.to_string())?[0]);
        flat.push(4.0 * ((z[0] - p[0]) * a[0] + (z[1] - p[1]) * a[1]));
    }
    let limit_err = gap(&hyp, &flat) / norm(&flat);
    ensure(limit_err < 1e-4, || format!("c→0 logit relative error {limit_err:.2e}"))?;

    within(clock.elapsed(), Duration::from_secs(10), "geometry suite")?;
    Ok(format!(
        "{GEOMETRY_SAMPLES} samples, max errors {:?}, c→0 relative error {limit_err:.1e}, {:.2} s",
        worst.map(|w| format!("{w:.1e}")),
        clock.elapsed().as_secs_f64()
    ))
}

fn toy_hierarchy() -> HierarchySpec {
    HierarchySpec {
        parents: vec!["a".into(), "b".into()],
        leaves: vec!["a1".into(), "a2".into(), "b1".into()],
        leaf_parent: vec![0, 0, 1],
    }
}

/// Gradient check of one loss through both MLR heads on a 4 x 4 spectrogram.
fn loss_check(kind: LossKind, composite: bool, seed: u64) -> Result<f64, String> {
    let err = |e: hypsep::Error| e.to_string();
    let dsp = DspConfig {
        sample_rate: 8000,
        fft_size: 6,
        hop: 3,
    };
    let st = Stft::new(dsp).map_err(err)?;
    let h = toy_hierarchy();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = 9;
    let leaves: Vec<Waveform> = (0..3)
        .map(|_| Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 8000))
        .collect();
    let (mix, parents) = data::mix_track(&leaves, &h).map_err(err)?;
    let x = st.analyze(&mix).map_err(err)?;
    let spec = |ws: &[Waveform]| ws.iter().map(|w| st.analyze(w)).collect::<hypsep::Result<Vec<_>>>();
    let pt = HeadTargets::build(kind, &st, &x, &spec(&parents).map_err(err)?, &parents).map_err(err)?;
    let lt = HeadTargets::build(kind, &st, &x, &spec(&leaves).map_err(err)?, &leaves).map_err(err)?;

    let c = 0.5;
    let mut b = Bindings::new();
    let mut ball = |rows: usize| {
        Tensor::matrix(rows, 2, (0..rows * 2).map(|_| rng.random_range(-0.8..0.8)).collect()).expect("sized")
    };
    b.insert("z", ball(x.frames * x.bins));
    for (name, rows) in [("pp", 2), ("pa", 2), ("lp", 3), ("la", 3)] {
        b.insert(name, ball(rows));
    }
    let mut g = Graph::new();
    let z = g.param("z");
    let (pp, pa, lp, la) = (g.param("pp"), g.param("pa"), g.param("lp"), g.param("la"));
    let plog = g.mlr_logits(z, pp, pa, c, MlrMode::Hyperbolic);
    let llog = g.mlr_logits(z, lp, la, c, MlrMode::Hyperbolic);
    let pm = g.softmax(plog);
    let lm = g.softmax(llog);
    let leaf = lt.term(&mut g, lm, llog);
    let out = if composite {
        let parent = pt.term(&mut g, pm, plog);
        hierarchical_term(
            &mut g,
            parent,
            leaf,
            &LossConfig {
                kind,
                ..LossConfig::default()
            },
        )
    } else {
        leaf
    };
    Ok(finite_diff_check(&mut g, out, &b, 1e-6).map_err(err)?.max_rel_error)
}

/// Gradient check of a weighted sum of MLR logits w.r.t. z, p and a.
fn mlr_check(c: f64, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k, l) = (6, 4, 3);
    let r = 0.7 / c.sqrt() / (l as f64).sqrt();
    let mut tensor = |rows: usize, cols: usize, bound: f64| {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect(),
        )
        .expect("sized")
    };
    let mut b = Bindings::new();
    b.insert("z", tensor(n, l, r));
    b.insert("p", tensor(k, l, r));
    b.insert("a", tensor(k, l, 1.0));
    let w = tensor(n, k, 1.0);
    let mut g = Graph::new();
    let (z, p, a) = (g.param("z"), g.param("p"), g.param("a"));
    let logits = g.mlr_logits(z, p, a, c, MlrMode::Hyperbolic);
    let wn = g.constant(w);
    let weighted = g.mul(logits, wn);
    let out = g.sum(weighted);
    let report = finite_diff_check(&mut g, out, &b, 1e-6).map_err(|e| e.to_string())?;
    for name in ["z", "p", "a"] {
        ensure(report.entries.iter().any(|e| e.name == name), || {
            format!("no gradient for {name}")
        })?;
    }
    Ok(report.max_rel_error)
}

fn gradient_suite() -> Outcome {
    let clock = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for kind in LossKind::ALL {
        for composite in [false, true] {
            for seed in 0..3 {
                let e = loss_check(kind, composite, seed)?;
                ensure(e < 1e-4, || {
                    format!("{} composite={composite} seed={seed}: {e:.2e}", kind.as_str())
                })?;
                worst = worst.max(e);
                checks += 1;
            }
        }
    }
    for c in [0.1, 1.0, 2.0] {
        for seed in 0..3 {
            let e = mlr_check(c, seed)?;
            ensure(e < 1e-4, || format!("MLR logits at c={c} seed={seed}: {e:.2e}"))?;
            worst = worst.max(e);
            checks += 1;
        }
    }
    within(clock.elapsed(), Duration::from_secs(60), "gradient checks")?;
    Ok(format!(
        "{checks} checks, max relative error {worst:.1e}, {:.2} s",
        clock.elapsed().as_secs_f64()
    ))
}

fn stft_suite(tracks: &[Track]) -> Outcome {
    let st = Stft::new(DspConfig::default()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 8000 * 3;
    let mut signals: Vec<(String, Waveform)> = vec![
        (
            "noise".into(),
            Waveform::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), 8000),
        ),
        (
            "tone".into(),
            Waveform::new(
                (0..n)
                    .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 8000.0).sin())
                    .collect(),
                8000,
            ),
        ),
    ];
    for t in tracks.iter().take(2) {
        for (k, name) in t.spec.leaves.iter().map(|l| &l.class).enumerate() {
            signals.push((format!("track {} {name}", t.spec.id), t.leaves[k].clone()));
        }
    }
    let mut worst = f64::INFINITY;
    for (name, w) in &signals {
        let back = st
            .synthesize(&st.analyze(w).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let snr = snr_db(&w.samples, &back.samples[..w.len()]);
        ensure(snr > 100.0, || format!("{name}: {snr:.1} dB"))?;
        worst = worst.min(snr);
    }
    Ok(format!("{} signals, minimum SNR {worst:.1} dB", signals.len()))
}

struct Splits {
    manifest: data::DatasetManifest,
    train: Vec<Track>,
    val: Vec<Track>,
    test: Vec<Track>,
}

fn load_splits() -> hypsep::Result<Splits> {
    let manifest = build_manifest(data::DEFAULT_TRACKS, data::DEFAULT_DURATION, DATA_SEED)?;
    Ok(Splits {
        train: generate_split(&manifest, TRAIN)?,
        val: generate_split(&manifest, VALIDATION)?,
        test: generate_split(&manifest, TEST)?,
        manifest,
    })
}

struct Trained {
    model: hypsep::model::SeparationModel,
    report: EvaluationReport,
}

fn train_and_evaluate(cfg: &RunConfig, s: &Splits) -> hypsep::Result<Trained> {
    let out = pipeline::train(
        cfg,
        &s.manifest.hierarchy,
        DspConfig::default(),
        &s.train,
        &s.val,
        |r| {
            eprintln!(
                "  [{}] epoch {:>2} train {:.4} val {:.4}  {:.1} s",
                cfg.loss.as_str(),
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.seconds
            )
        },
    )?;
    let report = evaluate_report(&out.model, &s.test)?;
    Ok(Trained {
        model: out.model,
        report,
    })
}

fn desk_training(weighted: &Trained, unweighted: &Trained, elapsed: Duration) -> Outcome {
    let r = &weighted.report;
    let model = r.model.averages.leaves.si_sdr;
    let base = r.no_proc.averages.leaves.si_sdr;
    let gain = model - base;
    within(
        elapsed,
        Duration::from_secs(45 * 60),
        "dataset, training and evaluation",
    )?;
    ensure(gain >= 3.0, || {
        format!("leaf SI-SDR {model:.2} dB vs No-Proc {base:.2} dB: +{gain:.2} dB < 3 dB")
    })?;
    for (label, t) in [("CE_IBM,W", weighted), ("CE_IBM", unweighted)] {
        for (class, o) in &t.report.oracle_psf.classes {
            let m = &t.report.model.classes[class];
            ensure(o.si_sdr >= m.si_sdr, || {
                format!("Oracle-PSF {class} {:.2} dB below {label} {:.2} dB", o.si_sdr, m.si_sdr)
            })?;
        }
    }
    let wce = weighted.report.model.averages.leaves.si_sdr;
    let ce = unweighted.report.model.averages.leaves.si_sdr;
    ensure(wce >= ce - 0.5, || {
        format!("weighted CE {wce:.2} dB vs unweighted {ce:.2} dB")
    })?;
    Ok(format!(
        "leaf SI-SDR {model:.2} dB vs No-Proc {base:.2} dB (+{gain:.2} dB); Oracle-PSF {:.2} dB; CE {ce:.2} dB; {:.1} min",
        r.oracle_psf.averages.leaves.si_sdr,
        elapsed.as_secs_f64() / 60.0
    ))
}

fn fig3_trend(report: &EvaluationReport) -> Outcome {
    let h = report.norm_histograms.as_ref().ok_or("no norm histograms")?;
    let pooled = |labels: &[&str]| {
        let (mut sum, mut n) = (0.0, 0u64);
        for b in h.buckets.iter().filter(|b| labels.contains(&b.label.as_str())) {
            if let Some(m) = b.mean {
                sum += m * b.population as f64;
                n += b.population;
            }
        }
        (n > 0).then(|| (sum / n as f64, n))
    };
    let (one, n1) = pooled(&["1"]).ok_or("no bins with one active source")?;
    let (many, n3) = pooled(&["3", "4+"]).ok_or("no bins with three or more active sources")?;
    ensure(one > many, || format!("one source {one:.3} vs three or more {many:.3}"))?;
    Ok(format!(
        "mean normalized norm: 1 source {one:.3} (n={n1}), ≥3 sources {many:.3} (n={n3})"
    ))
}

fn fig4_trend(t: &Trained, test: &[Track]) -> Outcome {
    let sweep = threshold_sweep(&t.model, test, None).map_err(|e| e.to_string())?;
    let at = |theta: f64| {
        sweep
            .points
            .iter()
            .find(|p| (p.theta - theta).abs() < 1e-9)
            .map(|p| p.metrics.averages.leaves)
            .ok_or(format!("theta {theta} missing from the grid"))
    };
    let (zero, high) = (at(0.0)?, at(0.9)?);
    ensure(sweep.nested, || "silenced bins are not nested".into())?;
    ensure(high.si_sir > zero.si_sir, || {
        format!("SI-SIR at 0.9 {:.2} dB not above {:.2} dB", high.si_sir, zero.si_sir)
    })?;
    ensure(high.si_sar < zero.si_sar, || {
        format!("SI-SAR at 0.9 {:.2} dB not below {:.2} dB", high.si_sar, zero.si_sar)
    })?;
    Ok(format!(
        "leaf SI-SIR {:.2} → {:.2} dB, SI-SAR {:.2} → {:.2} dB, nesting holds over {} thresholds",
        zero.si_sir,
        high.si_sir,
        zero.si_sar,
        high.si_sar,
        sweep.points.len()
    ))
}

fn bayesian_comparison(t: &Trained, test: &[Track]) -> Outcome {
    let clock = Instant::now();
    let tracks = &test[..MC_TRACKS.min(test.len())];
    ensure(tracks.len() >= 10, || format!("only {} test tracks", tracks.len()))?;
    let cc = certainty_compare(&t.model, tracks, MC_PASSES, MC_DROPOUT_RATE, 0).map_err(|e| e.to_string())?;
    let elapsed = clock.elapsed();
    for r in &cc.tracks {
        ensure(r.pearson > 0.0, || format!("track {}: ρ = {:.3}", r.track, r.pearson))?;
    }
    ensure(cc.mean_pearson > 0.3, || format!("mean ρ = {:.3}", cc.mean_pearson))?;
    within(elapsed, Duration::from_secs(20 * 60), "Monte-Carlo comparison")?;
    let mean_norm = cc.tracks.iter().map(|r| r.pearson_norm).sum::<f64>() / cc.tracks.len() as f64;
    Ok(format!(
        "{} tracks x {} passes: mean ρ {:.3}, min ρ {:.3} (normalized-norm map mean ρ {mean_norm:.3}); {:.1} min",
        cc.tracks.len(),
        cc.passes,
        cc.mean_pearson,
        cc.min_pearson,
        elapsed.as_secs_f64() / 60.0
    ))
}

/// Repeats dataset → train → evaluate through files on disk and compares
/// with the in-memory run.
fn determinism(cfg: &RunConfig, first: &Trained, s: &Splits) -> Outcome {
    let err = |e: hypsep::Error| e.to_string();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest =
        data::build_dataset(dir.path(), data::DEFAULT_TRACKS, data::DEFAULT_DURATION, DATA_SEED).map_err(err)?;
    ensure(manifest == s.manifest, || "dataset manifests differ".into())?;
    let again = Splits {
        train: data::load_split(dir.path(), &manifest, TRAIN).map_err(err)?,
        val: data::load_split(dir.path(), &manifest, VALIDATION).map_err(err)?,
        test: data::load_split(dir.path(), &manifest, TEST).map_err(err)?,
        manifest,
    };
    for (a, b) in s.test.iter().zip(&again.test) {
        ensure(a.mixture.samples == b.mixture.samples, || {
            format!("track {} differs", a.spec.id)
        })?;
    }
    let second = train_and_evaluate(cfg, &again).map_err(err)?;
    ensure(second.model == first.model, || "trained parameters differ".into())?;
    ensure(second.report == first.report, || "evaluation reports differ".into())?;
    let a = serde_json::to_string(&first.report).map_err(|e| e.to_string())?;
    let b = serde_json::to_string(&second.report).map_err(|e| e.to_string())?;
    ensure(a == b, || "serialized reports differ".into())?;
    Ok(format!(
        "identical parameters and {}-byte report from seed {DATA_SEED}",
        a.len()
    ))
}

fn main() -> ExitCode {
    let mut suite = Suite { failed: 0 };
    suite.record("geometry identities", geometry_suite());
    suite.record("gradient correctness", gradient_suite());

    let clock = Instant::now();
    let splits = match load_splits() {
        Ok(s) => s,
        Err(e) => {
            suite.record("dataset", Err(e.to_string()));
            return ExitCode::FAILURE;
        }
    };
    suite.record("STFT round trip", stft_suite(&splits.test));

    let cfg = RunConfig::default();
    let weighted = match train_and_evaluate(&cfg, &splits) {
        Ok(t) => t,
        Err(e) => {
            suite.record("desk-scale training", Err(e.to_string()));
            return ExitCode::FAILURE;
        }
    };
    let desk_elapsed = clock.elapsed();
    let ce_cfg = RunConfig {
        loss: LossKind::CeIbm,
        ..cfg.clone()
    };
    match train_and_evaluate(&ce_cfg, &splits) {
        Ok(unweighted) => suite.record(
            "desk-scale training",
            desk_training(&weighted, &unweighted, desk_elapsed),
        ),
        Err(e) => suite.record("desk-scale training", Err(format!("unweighted CE run: {e}"))),
    }
    suite.record("certainty semantics", fig3_trend(&weighted.report));
    suite.record("threshold trade-off", fig4_trend(&weighted, &splits.test));
    suite.record("Bayesian comparison", bayesian_comparison(&weighted, &splits.test));
    suite.record("determinism", determinism(&cfg, &weighted, &splits));

    if suite.failed == 0 {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{} acceptance criteria failed", suite.failed);
        ExitCode::FAILURE
    }
}
