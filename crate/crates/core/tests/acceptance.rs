//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use flowmimic::pipeline::{AblationMode, ExperimentConfig, Run, RunReport, Variant};
use flowmimic::sac::EpisodeLog;
use flowmimic::tokenizer::{build_vocab, VocabConfig};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn run_criterion(id: &str, name: &str, f: impl FnOnce() -> Check) -> bool {
    let t0 = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = t0.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS {id} {name} ({secs:.1}s): {detail}");
            true
        }
        Err(detail) => {
            println!("FAIL {id} {name} ({secs:.1}s): {detail}");
            false
        }
    }
}

fn gradients() -> Check {
    let t0 = Instant::now();
    let reports = common::grad::every_layer();
    let (_, hand_gap) = common::grad::temperature();
    let secs = t0.elapsed().as_secs_f64();
    let mut worst = ("", 0.0f64);
    for (label, r) in &reports {
        ensure(r.checked > 0, format!("{label}: nothing checked"))?;
        ensure(
            r.passes(common::grad::TOL),
            format!("{label}: max rel error {:.3e} at {:?}", r.max_rel_err, r.worst_param),
        )?;
        if r.max_rel_err > worst.1 {
            worst = (label, r.max_rel_err);
        }
    }
    ensure(hand_gap < 1e-12, format!("temperature gradient off by {hand_gap:.3e}"))?;
    ensure(secs < 120.0, format!("took {secs:.1}s"))?;
    Ok(format!("{} groups, worst rel {:.2e} ({})", reports.len(), worst.1, worst.0))
}

fn masking() -> Check {
    let shares = common::masking::treatment_shares(100_000);
    for (share, target) in shares.iter().zip([0.8, 0.1, 0.1]) {
        ensure((share - target).abs() <= 0.02, format!("share {share:.4} vs {target}"))?;
    }
    Ok(format!(
        "exact count rule on 1e5 plans, split {:.4}/{:.4}/{:.4}",
        shares[0], shares[1], shares[2]
    ))
}

fn tokenizer() -> Check {
    let vocab = common::vocab();
    common::tokens::assert_sizes_exact(&vocab);
    common::tokens::assert_representatives_fixed(&vocab);
    let wide = build_vocab(
        &common::benign(50, 2),
        &VocabConfig {
            ipd_value_bins: 200,
            ..VocabConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    common::tokens::assert_representatives_fixed(&wide);
    common::tokens::chunk_count_cases(&vocab, 512)?;
    Ok(format!(
        "sizes 1..={} exact, {} + {} bin representatives fixed, 512 chunk-count cases",
        vocab.mtu,
        vocab.ipd_bins(),
        wide.ipd_bins()
    ))
}

fn mdp() -> Check {
    let (a, b) = common::episodes::replay_twice();
    ensure(a == b, format!("replay digests differ: {a:016x} vs {b:016x}"))?;
    Ok(format!("{} episodes per run, digest {a:016x}", common::episodes::EPISODES))
}

/// Artifacts of the desk runs shared by the benchmark criteria.
struct Desk {
    cfg: ExperimentConfig,
    run: Run,
    report: RunReport,
    seconds: f64,
}

fn desk_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::resolve(None, None, None).expect("desk defaults");
    cfg.out = out.to_path_buf();
    cfg
}

fn desk_run(out: &Path) -> Result<Desk, String> {
    let cfg = desk_config(out);
    let t0 = Instant::now();
    let run = Run::open(cfg.clone()).map_err(|e| e.to_string())?;
    let report = run.pipeline().map_err(|e| e.to_string())?;
    Ok(Desk {
        cfg,
        run,
        report,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

fn benchmark(d: &Desk) -> Check {
    let data = &d.cfg.data;
    ensure(
        (data.benign, data.burst_flood, data.beacon) == (5000, 1000, 1000),
        format!("corpus {}/{}/{}", data.benign, data.burst_flood, data.beacon),
    )?;
    ensure(d.cfg.encoder.n == 64 && d.cfg.encoder.n_layers == 2, "encoder shape")?;
    ensure(d.cfg.episodes <= 500, format!("{} episodes", d.cfg.episodes))?;

    let mut failures = Vec::new();
    let mut parts = Vec::new();
    for s in &d.cfg.scenarios {
        let name = s.name();
        let f1 = d
            .report
            .detectors
            .iter()
            .find(|e| e.detector == s.detector && e.attack == s.attack)
            .map(|e| e.report.f1)
            .ok_or(format!("no detector evaluation for {name}"))?;
        let r = d
            .report
            .scenarios
            .iter()
            .find(|r| r.scenario == name)
            .ok_or(format!("no report for {name}"))?;
        parts.push(format!("{name} F1 {f1:.3} ASR {:.3} steps {:.2}", r.asr, r.steps.mean));
        if f1 < 0.95 {
            failures.push(format!("{name} F1 {f1:.3} < 0.95"));
        }
        if r.train_episodes > 500 {
            failures.push(format!("{name} trained {} episodes", r.train_episodes));
        }
        if r.asr < 0.9 {
            failures.push(format!("{name} ASR {:.3} < 0.90", r.asr));
        }
        if r.steps.mean > 10.0 {
            failures.push(format!("{name} mean steps {:.2} > 10", r.steps.mean));
        }
    }
    parts.push(format!("runtime {:.0}s", d.seconds));
    if d.seconds > 1800.0 {
        failures.push(format!("runtime {:.0}s > 1800s", d.seconds));
    }
    let detail = parts.join("; ");
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; [{detail}]", failures.join("; ")))
    }
}

fn rate_preservation(d: &Desk) -> Check {
    ensure(d.cfg.env.gamma == 0.1, format!("gamma {}", d.cfg.env.gamma))?;
    let r = d
        .report
        .scenarios
        .iter()
        .find(|r| r.scenario == BENCHMARK)
        .ok_or(format!("no report for {BENCHMARK}"))?;
    let detail = format!("KL {:.4} over {} flows", r.bandwidth_kl, r.flows);
    ensure(r.bandwidth_kl < 0.1, format!("{detail} (limit 0.1)"))?;
    Ok(detail)
}

/// The scenario the ablation and noise criteria are measured on.
const BENCHMARK: &str = "burst_flood_threshold";

fn benchmark_run(d: &Desk) -> Result<Run, String> {
    let mut cfg = d.cfg.clone();
    cfg.scenarios.retain(|s| s.name() == BENCHMARK);
    ensure(cfg.scenarios.len() == 1, format!("no {BENCHMARK} scenario"))?;
    Ok(Run {
        cfg,
        dir: d.run.dir.clone(),
    })
}

fn benchmark_asr(d: &Desk) -> Result<f64, String> {
    d.report
        .scenarios
        .iter()
        .find(|r| r.scenario == BENCHMARK)
        .map(|r| r.asr)
        .ok_or(format!("no report for {BENCHMARK}"))
}

fn ablation(d: &Desk) -> Check {
    let run = benchmark_run(d)?;
    let entries = run.ablate(&AblationMode::ALL).map_err(|e| e.to_string())?;
    let asr = |m: AblationMode| -> Result<f64, String> {
        entries
            .iter()
            .find(|e| e.mode == m)
            .map(|e| e.report.asr)
            .ok_or(format!("no {} entry", m.name()))
    };
    let full = asr(AblationMode::Full)?;
    let mut parts = vec![format!("full {full:.3}")];
    let mut short = Vec::new();
    for m in [AblationMode::S1, AblationMode::S2S, AblationMode::S2F] {
        let v = asr(m)?;
        parts.push(format!("{} {v:.3}", m.name()));
        if full - v < 0.05 {
            short.push(format!("full − {} = {:.3}", m.name(), full - v));
        }
    }
    let detail = format!("{BENCHMARK} ASR {}", parts.join(", "));
    ensure(short.is_empty(), format!("{} < 0.05 [{detail}]", short.join(", ")))?;
    Ok(detail)
}

fn noisy_asr(d: &Desk, run: &Run, noise: f64) -> Result<f64, String> {
    let variant = Variant {
        noise,
        ..Variant::main(&d.cfg)
    };
    let r = run
        .evaluate_variant(&run.cfg.scenarios[0], &variant)
        .map_err(|e| e.to_string())?;
    ensure(
        r.train_episodes == d.cfg.episodes,
        format!("noise {noise}: training stopped after {} episodes", r.train_episodes),
    )?;
    Ok(r.asr)
}

fn noise_robustness(d: &Desk) -> Check {
    let run = benchmark_run(d)?;
    let clean = benchmark_asr(d)?;
    let low = noisy_asr(d, &run, 0.05)?;
    let high = noisy_asr(d, &run, 0.3)?;
    let detail = format!("{BENCHMARK} ASR clean {clean:.3}, 5% noise {low:.3}, 30% noise {high:.3}");
    let mut failures = Vec::new();
    if (low - clean).abs() > 0.15 {
        failures.push(format!("5% noise moved ASR by {:.3}", (low - clean).abs()));
    }
    if high < 0.5 {
        failures.push(format!("30% noise ASR {high:.3} < 0.5"));
    }
    ensure(failures.is_empty(), format!("{}; [{detail}]", failures.join("; ")))?;
    Ok(detail)
}

fn read_log(path: &Path) -> Result<Vec<EpisodeLog>, String> {
    fs::read_to_string(path)
        .map_err(|e| format!("{}: {e}", path.display()))?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect()
}

fn probe_accounting(d: &Desk) -> Check {
    let mut parts = Vec::new();
    for s in &d.cfg.scenarios {
        let name = s.name();
        let log = read_log(&d.run.dir.scenario(&name).join("train_log.jsonl"))?;
        let steps: u64 = log.iter().map(|e| e.steps as u64).sum();
        let r = d.report.scenarios.iter().find(|r| r.scenario == name).ok_or("missing scenario")?;
        ensure(
            r.train_probes == steps && log.last().map(|e| e.probes) == Some(steps),
            format!("{name}: {} probes vs {steps} steps", r.train_probes),
        )?;

        let variant = Variant {
            budget: Some(500),
            ..Variant::main(&d.cfg)
        };
        let b = d.run.evaluate_variant(s, &variant).map_err(|e| e.to_string())?;
        ensure(
            b.budget_exhausted && b.train_probes == 500,
            format!("{name}: budget run used {} probes, exhausted {}", b.train_probes, b.budget_exhausted),
        )?;
        ensure((0.0..=1.0).contains(&b.asr), format!("{name}: partial ASR {}", b.asr))?;
        parts.push(format!(
            "{name} {steps} probes = steps, budget 500 stopped after {} episodes with ASR {:.3}",
            b.train_episodes, b.asr
        ));
    }
    Ok(parts.join("; "))
}

fn determinism(first: &Desk, second: Result<Desk, String>) -> Check {
    let second = second?;
    let a = fs::read(first.run.dir.path("report.json")).map_err(|e| e.to_string())?;
    let b = fs::read(second.run.dir.path("report.json")).map_err(|e| e.to_string())?;
    ensure(a == b, "report.json differs between runs")?;
    Ok(format!("report.json identical ({} bytes, seed {})", a.len(), first.cfg.seed))
}

fn main() {
    let mut passed = vec![
        run_criterion("C1", "gradient correctness", gradients),
        run_criterion("C2", "masking statistics", masking),
        run_criterion("C3", "tokenizer round trips", tokenizer),
        run_criterion("C4", "MDP contract", mdp),
    ];

    let root = tempfile::tempdir().expect("temp dir");
    let desk = desk_run(&root.path().join("desk"));
    match &desk {
        Ok(d) => {
            passed.push(run_criterion("C5", "desk benchmark", || benchmark(d)));
            passed.push(run_criterion("C6", "rate preservation", || rate_preservation(d)));
            passed.push(run_criterion("C7", "ablation ordering", || ablation(d)));
            passed.push(run_criterion("C8", "noise robustness", || noise_robustness(d)));
            passed.push(run_criterion("C9", "probe accounting", || probe_accounting(d)));
            passed.push(run_criterion("C10", "determinism", || {
                determinism(d, desk_run(&root.path().join("desk-again")))
            }));
        }
        Err(e) => {
            for (id, name) in [
                ("C5", "desk benchmark"),
                ("C6", "rate preservation"),
                ("C7", "ablation ordering"),
                ("C8", "noise robustness"),
                ("C9", "probe accounting"),
                ("C10", "determinism"),
            ] {
                passed.push(run_criterion(id, name, || Err(format!("desk pipeline failed: {e}"))));
            }
        }
    }

    let ok = passed.iter().filter(|&&p| p).count();
    println!("acceptance: {ok}/{} criteria passed", passed.len());
    if ok != passed.len() {
        std::process::exit(1);
    }
}
