//! Acceptance suite. Prints one line per criterion and exits non-zero if
//! any criterion fails. Criterion 8 trains twelve agents for 2M steps each
//! and only runs with `RAVN_SLOW=1` (or `--ignored` / `--include-ignored`).

mod common;

use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;

use common::*;
use ravn::cli::run_ablate;
use ravn::config::RunConfig;
use ravn::eval::{compute_metrics, evaluate, evaluation_episodes, Agent, DetourAgent, OptimalAgent, RandomAgent, Split, StopAgent};
use ravn::losses::{ang_loss, dist_nll, wrap_angle, PpoCoefficients};
use ravn::model::{GatePin, Network, Variant};
use ravn::observe::{AudioObs, ObsConfig, VisualObs};
use ravn::probe::{run_probe, ProbeConfig};
use ravn::trainer::{minibatch_gradient, LossWeights, Segment};
use ravn::world::{geodesic_distance, min_action_count, Cell, Heading, Pose};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn close(got: f64, want: f64, tol: f64, what: &str) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: got {got}, want {want}"))
    }
}

fn c1_loss_exactness() -> Outcome {
    let tol = 1e-6;
    close(dist_nll(0.3, 0.0, 0.3), 0.0, tol, "nll mu=y lv=0")?;
    close(dist_nll(0.0, 0.0, 2.0), 2.0, tol, "nll mu=0 y=2")?;
    close(dist_nll(0.3, 1.0, 0.3), 0.5, tol, "nll mu=y lv=1")?;
    close(ang_loss(1.1, 1.1), 0.0, tol, "ang equal")?;
    close(ang_loss(PI - 0.1, -PI + 0.1), 0.02, tol, "ang across the seam")?;
    close(ang_loss(2.0, 0.0), 1.5, tol, "ang error 2")?;
    close(wrap_angle(2.0 * PI - 0.2), -0.2, tol, "wrap 2pi-0.2")?;
    close(wrap_angle(-PI), PI, tol, "wrap -pi")?;
    close(wrap_angle(0.3), 0.3, tol, "wrap 0.3")?;
    Ok("9 cases within 1e-6".into())
}

fn c2_gradient_check() -> Outcome {
    let net = Network::new(small_model(Variant::Ravn)).map_err(|e| e.to_string())?;
    let behaviour = net.init_params(31);
    let batch = seeded_batch(&net, &behaviour, 2, 6, 4);
    ensure!(
        batch.segments.iter().any(|s| s.resets.iter().skip(1).any(|r| *r)),
        "batch has no episode boundary inside a segment"
    );
    // evaluate away from the behaviour policy so ratios differ from one
    let mut params = behaviour.clone();
    let mut r = rng(5);
    for v in params.data_mut() {
        *v += r.random_range(-0.05..0.05);
    }
    let weights = LossWeights {
        lambda_aux: 0.5,
        coef: PpoCoefficients::default(),
    };
    let segs: Vec<&Segment> = batch.segments.iter().collect();
    let (loss, analytic) = minibatch_gradient(&net, &params, &segs, &weights).map_err(|e| e.to_string())?;
    ensure!(loss.l_dist != 0.0 && loss.l_ang != 0.0 && loss.l_entropy != 0.0, "a loss term is inactive: {loss:?}");

    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    let specs = params.specs().to_vec();
    for spec in &specs {
        let mut tensor_worst = 0.0f64;
        for i in spec.offset..spec.offset + spec.len() {
            let mut p = params.clone();
            p.data_mut()[i] += h;
            let up = minibatch_gradient(&net, &p, &segs, &weights).unwrap().0.l_total;
            p.data_mut()[i] -= 2.0 * h;
            let down = minibatch_gradient(&net, &p, &segs, &weights).unwrap().0.l_total;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            tensor_worst = tensor_worst.max(rel);
        }
        if tensor_worst > worst.0 || worst.1.is_empty() {
            worst = (tensor_worst, spec.name.clone());
        }
    }
    ensure!(worst.0 <= 1e-3, "max relative error {:.2e} in {}", worst.0, worst.1);
    Ok(format!(
        "{} parameters in {} tensors, max relative error {:.2e} ({})",
        params.len(),
        specs.len(),
        worst.0,
        worst.1
    ))
}

fn random_audio(r: &mut impl Rng, n: usize) -> AudioObs {
    AudioObs {
        spectrum: (0..n).map(|_| r.random_range(0.0..0.5)).collect(),
    }
}

fn random_visual(r: &mut impl Rng, n: usize) -> VisualObs {
    VisualObs {
        depths: (0..n).map(|_| r.random_range(0.0..1.0)).collect(),
    }
}

fn c3_zero_gate() -> Outcome {
    let cfg = small_model(Variant::Ravn);
    let net = Network::new(cfg.clone()).map_err(|e| e.to_string())?;
    let params = net.init_params(3);
    let mut r = rng(8);
    let audio = random_audio(&mut r, cfg.audio_dim());
    let hidden: Vec<f64> = (0..cfg.hidden).map(|_| r.random_range(-1.0..1.0)).collect();
    let reference = net
        .step(&params, &audio, &random_visual(&mut r, cfg.rays), &hidden, GatePin::Zeros)
        .map_err(|e| e.to_string())?
        .policy;
    for _ in 0..100 {
        let out = net
            .step(&params, &audio, &random_visual(&mut r, cfg.rays), &hidden, GatePin::Zeros)
            .map_err(|e| e.to_string())?
            .policy;
        ensure!(
            out.logits.iter().zip(&reference.logits).all(|(a, b)| a.to_bits() == b.to_bits())
                && out.value.to_bits() == reference.value.to_bits(),
            "outputs changed with the visual input"
        );
    }
    Ok("100 visual inputs, logits and value bit-identical".into())
}

fn c4_ones_gate() -> Outcome {
    let ravn = Network::new(small_model(Variant::Ravn)).map_err(|e| e.to_string())?;
    let nll = Network::new(small_model(Variant::AgrNll)).map_err(|e| e.to_string())?;
    let pr = ravn.init_params(4);
    let mut pn = nll.zero_params();
    let copied = pn.copy_shared_from(&pr);
    ensure!(copied == pn.specs().len(), "only {copied} tensors shared");
    let cfg = ravn.config().clone();
    let mut r = rng(9);
    for _ in 0..100 {
        let a = random_audio(&mut r, cfg.audio_dim());
        let v = random_visual(&mut r, cfg.rays);
        let h: Vec<f64> = (0..cfg.hidden).map(|_| r.random_range(-1.0..1.0)).collect();
        let x = ravn.step(&pr, &a, &v, &h, GatePin::Ones).map_err(|e| e.to_string())?;
        let y = nll.step(&pn, &a, &v, &h, GatePin::Free).map_err(|e| e.to_string())?;
        ensure!(x.policy == y.policy, "policy outputs differ");
        let (ax, ay) = (x.agr.unwrap(), y.agr.unwrap());
        ensure!(ax.mu == ay.mu && ax.log_var == ay.log_var && ax.phi_hat == ay.phi_hat, "AGR outputs differ");
    }
    Ok("100 inputs, identical outputs".into())
}

fn c5_metric_oracles() -> Outcome {
    let maps: Arc<[_]> = Arc::from(bench());
    let obs = Arc::new(ObsConfig::default());
    let mut episodes = evaluation_episodes(&maps, Split::Heard, &[0, 1, 2], 10, 100, 77).map_err(|e| e.to_string())?;
    episodes.extend(evaluation_episodes(&maps, Split::Unheard, &[8, 9], 10, 100, 77).map_err(|e| e.to_string())?);
    let mut records = Vec::new();
    for (i, ep) in episodes.iter().enumerate() {
        let mut agent: Box<dyn Agent> = match i % 3 {
            0 => Box::new(OptimalAgent::new()),
            1 => Box::new(StopAgent),
            _ => Box::new(DetourAgent::new(i as u64, 1 + i as u32 % 6)),
        };
        records.extend(evaluate(agent.as_mut(), maps.clone(), obs.clone(), std::slice::from_ref(ep)).map_err(|e| e.to_string())?);
    }
    let mut replays = Vec::new();
    for r in &records {
        let rp = replay(&maps[r.episode.map_id], r);
        ensure!(
            (rp.success, rp.path, rp.geodesic, rp.actions, rp.min_actions)
                == (r.success, r.path_length, r.geodesic, r.actions, r.min_actions),
            "record {} disagrees with replay {rp:?}",
            r.id
        );
        replays.push(rp);
    }
    let report = compute_metrics(&records).map_err(|e| e.to_string())?;
    let all = brute_metrics(&replays);
    ensure!(
        (report.overall.sr, report.overall.spl, report.overall.sna) == all,
        "overall {:?} vs oracle {all:?}",
        report.overall
    );
    for split in Split::ALL {
        let sub: Vec<_> = records
            .iter()
            .zip(&replays)
            .filter(|(r, _)| r.split == split)
            .map(|(_, rp)| *rp)
            .collect();
        let m = report.split(split).unwrap();
        ensure!((m.sr, m.spl, m.sna) == brute_metrics(&sub), "{split} metrics disagree");
    }

    let mut r = rng(55);
    let mut maps_checked = 0;
    let mut pairs = 0;
    while maps_checked < 300 {
        let (w, h) = (r.random_range(1..=6), r.random_range(1..=6));
        let density = r.random_range(0.0..0.45);
        let Some(map) = random_map(&mut r, w, h, density) else { continue };
        maps_checked += 1;
        let cells = map.free_cells();
        for s in &cells {
            for heading in Heading::ALL {
                let start = Pose::new(s.x, s.y, heading);
                for g in &cells {
                    let got = min_action_count(&map, start, *g).ok();
                    let want = forward_min_actions(&map, start, *g);
                    ensure!(got == want, "{start:?} -> {g:?}: {got:?} vs {want:?}\n{}", map.to_text());
                    pairs += 1;
                }
            }
        }
    }
    Ok(format!(
        "20 episodes (SR {:.1} SPL {:.1} SNA {:.1}) match replay; {pairs} pose/goal pairs on {maps_checked} maps",
        all.0, all.1, all.2
    ))
}

fn c6_geodesic() -> Outcome {
    let mut r = rng(66);
    for _ in 0..50 {
        let map = open_map(r.random_range(2..=24), r.random_range(2..=24));
        for _ in 0..1000 {
            let a = Cell::new(r.random_range(0..map.width()), r.random_range(0..map.height()));
            let b = Cell::new(r.random_range(0..map.width()), r.random_range(0..map.height()));
            let d = geodesic_distance(&map, a, b).map_err(|e| e.to_string())?;
            ensure!(d == Some(a.manhattan(b)), "{a:?} {b:?}: {d:?}");
        }
    }
    Ok("50 maps x 1000 pairs".into())
}

fn c7_probe() -> Outcome {
    let report = run_probe(&ProbeConfig::default(), &bench(), &ObsConfig::default()).map_err(|e| e.to_string())?;
    let detail = format!(
        "spearman {:.3}, held-out NLL {:.4} vs constant-variance {:.4}",
        report.spearman, report.nll, report.constant_nll
    );
    ensure!(report.spearman >= 0.5 && report.nll < report.constant_nll, "{detail}");
    Ok(detail)
}

fn c8_ablation(out: &Path) -> Outcome {
    let cfg = RunConfig {
        out_dir: out.to_path_buf(),
        ..RunConfig::default()
    };
    let rows = run_ablate(&cfg, |v, s| eprintln!("    training {v} seed {s}")).map_err(|e| e.to_string())?;
    let maps: Arc<[_]> = Arc::from(bench());
    let heard = evaluation_episodes(&maps, Split::Heard, &cfg.heard_classes, cfg.eval_episodes, cfg.max_steps, cfg.eval_seed)
        .map_err(|e| e.to_string())?;
    let random = evaluate(&mut RandomAgent::new(1), maps, Arc::new(cfg.observation()), &heard).map_err(|e| e.to_string())?;
    let random_sr = compute_metrics(&random).map_err(|e| e.to_string())?.overall.sr;

    let mut summary = format!("random heard SR {random_sr:.1};");
    let means: Vec<(f64, f64)> = rows.iter().map(|r| (r.mean().0[0], r.mean().1[0])).collect();
    for (row, (h, u)) in rows.iter().zip(&means) {
        summary += &format!(" {} heard {h:.1} unheard {u:.1};", row.variant);
    }
    let a = means.iter().all(|(h, _)| *h >= random_sr + 20.0);
    let base = &rows[0];
    let ravn = &rows[3];
    let wins = base
        .runs
        .iter()
        .zip(&ravn.runs)
        .filter(|(b, r)| r.2[0] >= b.2[0])
        .count();
    let b = wins >= 2;
    let c = means.windows(2).all(|w| w[1].1 >= w[0].1 - 2.0);
    summary += &format!(" (a) {a} (b) {wins}/3 (c) {c}");
    ensure!(a && b && c, "{summary}");
    Ok(summary)
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_ravn"))
        .args(args)
        .stderr(std::process::Stdio::null())
        .stdout(std::process::Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    ensure!(status.success(), "ravn {args:?} exited with {status}");
    Ok(())
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut logs = Vec::new();
    let mut metrics = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let cfg = dir.path().join(format!("{run}.json"));
        std::fs::write(
            &cfg,
            format!(
                r#"{{"total_steps": 8192, "eval_episodes": 40, "seed": 3, "out_dir": {:?}}}"#,
                out.to_str().unwrap()
            ),
        )
        .map_err(|e| e.to_string())?;
        let cfg = cfg.to_str().unwrap();
        run_cli(&["train", "--config", cfg])?;
        let ckpt = out.join("checkpoint.bin");
        run_cli(&["eval", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap()])?;
        logs.push(std::fs::read(out.join("train_log.csv")).map_err(|e| e.to_string())?);
        metrics.push(std::fs::read(out.join("eval/metrics.csv")).map_err(|e| e.to_string())?);
    }
    ensure!(logs[0] == logs[1], "training logs differ");
    ensure!(metrics[0] == metrics[1], "metrics files differ");
    Ok(format!("train_log.csv ({} bytes) and metrics.csv identical", logs[0].len()))
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: Box<dyn Fn() -> Outcome>,
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let slow = std::env::var("RAVN_SLOW").is_ok_and(|v| v == "1")
        || args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    let slow_dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("ablation");

    let mut criteria = vec![
        Criterion { id: 1, name: "loss exactness", limit: Duration::from_secs(1), run: Box::new(c1_loss_exactness) },
        Criterion { id: 2, name: "gradient verification", limit: Duration::from_secs(60), run: Box::new(c2_gradient_check) },
        Criterion { id: 3, name: "zero-gate invariance", limit: Duration::from_secs(1), run: Box::new(c3_zero_gate) },
        Criterion { id: 4, name: "baseline equivalence", limit: Duration::from_secs(1), run: Box::new(c4_ones_gate) },
        Criterion { id: 5, name: "metric oracles", limit: Duration::from_secs(10), run: Box::new(c5_metric_oracles) },
        Criterion { id: 6, name: "geodesic property", limit: Duration::from_secs(5), run: Box::new(c6_geodesic) },
        Criterion { id: 7, name: "reliability probe", limit: Duration::from_secs(300), run: Box::new(c7_probe) },
    ];
    if slow {
        let dir = slow_dir.clone();
        criteria.push(Criterion {
            id: 8,
            name: "directional ablation",
            limit: Duration::from_secs(6 * 3600),
            run: Box::new(move || c8_ablation(&dir)),
        });
    }
    criteria.push(Criterion { id: 9, name: "determinism", limit: Duration::from_secs(600), run: Box::new(c9_determinism) });

    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        let result = match result {
            Ok(d) if elapsed > c.limit => Err(format!("{d}; exceeded {:?}", c.limit)),
            other => other,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {:>2} {:<22} {:>8.2}s  {detail}", c.id, c.name, elapsed.as_secs_f64());
        if c.id == 7 && !slow {
            println!("[SKIP]  8 {:<22} {:>8}   slow suite; run with RAVN_SLOW=1", "directional ablation", "-");
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all executed criteria passed");
}
