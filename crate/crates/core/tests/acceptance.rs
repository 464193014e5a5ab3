//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test -p misinfo-sim --test acceptance`. The live smoke
//! criterion runs only when `MISINFO_LIVE_SMOKE=1` and `MISINFO_API_KEY` are set.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use misinfo_sim::agents::{BackendConfig, PersonaProfile};
use misinfo_sim::auditor::{reference_vector, AnswerVector};
use misinfo_sim::chat::{CallRecord, API_KEY_ENV};
use misinfo_sim::corpus::{bundled_corpus, Corpus};
use misinfo_sim::engine::{
    build_assignments, resume_experiment, run_experiment, EngineError, Mode, RunConfig, RunOptions, RunResult,
    RunStatus, CALLS_FILE, RECORDS_FILE,
};
use misinfo_sim::metrics::{
    classify, distance, inflection_point, misinformation_index, mpr, summarize_grid, SeverityTier, TierBoundary,
    DEFAULT_PERSISTENCE,
};
use misinfo_sim::report::{read_branch_csv, render_branch_heatmap, render_summary, parse_ratio, HeatmapSpec};

const SEED: u64 = 42;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn bits(n: u32, m: usize) -> Vec<bool> {
    (0..m).map(|j| n >> j & 1 == 1).collect()
}

fn oracle_distance(a: &[bool], b: &[bool]) -> u32 {
    let mut d = 0;
    for j in 0..a.len() {
        if a[j] != b[j] {
            d += 1;
        }
    }
    d
}

fn c1_metric_oracle() -> Check {
    let t = Instant::now();
    let mut pairs = 0usize;
    // every pair at m = 4, and every pair at m = 8 (256 x 256)
    for m in [4usize, 8] {
        let n = 1u32 << m;
        let vs: Vec<AnswerVector> = (0..n).map(|i| AnswerVector::new("d", bits(i, m)).unwrap()).collect();
        let reference = reference_vector("d", m).unwrap();
        for a in &vs {
            for b in &vs {
                let got = distance(a, b).map_err(|e| e.to_string())?;
                ensure(got == oracle_distance(a.bits(), b.bits()), || {
                    format!("m={m}: distance({}, {}) = {got}", a.to_bit_string(), b.to_bit_string())
                })?;
                pairs += 1;
            }
            let mi = misinformation_index(&reference, a).map_err(|e| e.to_string())?;
            ensure(mi == oracle_distance(reference.bits(), a.bits()), || format!("MI of {}", a.to_bit_string()))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let reference = reference_vector("d", 10).unwrap();
    for _ in 0..10_000 {
        let a: Vec<bool> = (0..10).map(|_| rng.random()).collect();
        let b: Vec<bool> = (0..10).map(|_| rng.random()).collect();
        let (va, vb) = (AnswerVector::new("d", a.clone()).unwrap(), AnswerVector::new("d", b.clone()).unwrap());
        ensure(distance(&va, &vb) == Ok(oracle_distance(&a, &b)), || format!("m=10 pair {a:?} {b:?}"))?;
        let zeros = a.iter().filter(|x| !**x).count() as u32;
        ensure(misinformation_index(&reference, &va) == Ok(zeros), || format!("m=10 MI {a:?}"))?;
        pairs += 1;
    }
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok(format!("{pairs} pairs, 0 mismatches, {:.0?}", t.elapsed()))
}

fn c2_mpr_formula() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for _ in 0..1000 {
        let e = rng.random_range(1..=30usize);
        let mut traj = vec![0u32];
        traj.extend((0..e).map(|_| rng.random_range(0..=10u32)));
        // direct summation over k = 0..E, divided by E
        let mut sum = Ratio::from_integer(0u64);
        for &x in &traj {
            sum += Ratio::from_integer(u64::from(x));
        }
        let expected = sum / e as u64;
        let got = mpr(&traj).map_err(|err| err.to_string())?;
        ensure(got.ratio() == expected, || format!("{traj:?}: {} != {expected}", got.ratio()))?;
    }
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok(format!("1000 trajectories exact, {:.0?}", t.elapsed()))
}

fn c3_taxonomy() -> Check {
    const N: u64 = 100_000;
    let mut runs: Vec<(SeverityTier, Ratio<u64>, Ratio<u64>)> = Vec::new();
    for i in 0..=N {
        let v = Ratio::new(10 * i, N);
        let tier = classify(v);
        match runs.last_mut() {
            Some((t, _, hi)) if *t == tier => *hi = v,
            _ => runs.push((tier, v, v)),
        }
    }
    let order: Vec<SeverityTier> = runs.iter().map(|r| r.0).collect();
    ensure(
        order == [SeverityTier::FactualError, SeverityTier::Lie, SeverityTier::Propaganda],
        || format!("intervals {order:?}"),
    )?;
    let one = Ratio::from_integer(1);
    let three = Ratio::from_integer(3);
    ensure(runs[0].2 == one && runs[1].2 == three, || {
        format!("boundaries at {} and {}", runs[0].2, runs[1].2)
    })?;
    ensure(runs[1].1 > one && runs[2].1 > three, || "upper intervals include their left boundary".into())?;
    for (v, want) in [
        (Ratio::new(548, 100), SeverityTier::Propaganda),
        (Ratio::new(42, 10), SeverityTier::Propaganda),
        (Ratio::from_integer(0), SeverityTier::FactualError),
    ] {
        ensure(classify(v) == want, || format!("{v} -> {}", classify(v)))?;
    }
    Ok("3 intervals: [0,1] error, (1,3] lie, (3,10] propaganda; spot values ok".into())
}

fn c4_heterogeneous(corpus: &Corpus) -> Check {
    let t = Instant::now();
    let mut checked = 0;
    for seed in 0..1000u64 {
        let mut cfg = RunConfig::full_grid(Mode::Heterogeneous, corpus, seed);
        cfg.domain_ids = vec!["crime0".into()];
        cfg.branch_count = 1;
        for a in build_assignments(&cfg, corpus, "crime0").map_err(|e| e.to_string())? {
            let counts = a.counts();
            ensure(a.persona_ids.len() == 30, || format!("seed {seed}: length {}", a.persona_ids.len()))?;
            ensure(counts.values().all(|&c| c <= 2), || format!("seed {seed}: {counts:?}"))?;
            let doubles = counts.values().filter(|&&c| c == 2).count();
            ensure(doubles >= 9, || format!("seed {seed}: only {doubles} repeated personas"))?;
            checked += 1;
        }
    }
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok(format!("{checked} assignments satisfy the cap, {:.0?}", t.elapsed()))
}

fn grid_config(corpus: &Corpus) -> RunConfig {
    RunConfig::full_grid(Mode::Homogeneous, corpus, SEED)
}

fn c5_determinism(corpus: &Corpus, work: &Path) -> Result<(String, RunResult, Vec<u8>), String> {
    let cfg = grid_config(corpus);
    let t = Instant::now();
    let first = run_experiment(&cfg, corpus, &work.join("grid-a"), &RunOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    run_experiment(&cfg, corpus, &work.join("grid-b"), &RunOptions::default()).map_err(|e| e.to_string())?;
    let a = fs::read(work.join("grid-a").join(RECORDS_FILE)).map_err(|e| e.to_string())?;
    let b = fs::read(work.join("grid-b").join(RECORDS_FILE)).map_err(|e| e.to_string())?;
    let lines = a.iter().filter(|&&c| c == b'\n').count();
    ensure(lines == 21 * 10 * 31, || format!("{lines} records"))?;
    ensure(a == b, || "logs differ".into())?;
    within(elapsed, Duration::from_secs(60))?;
    Ok((
        format!("{lines} records byte-identical across runs, one run {elapsed:.2?}"),
        first,
        a,
    ))
}

fn c6_crash_resume(corpus: &Corpus, work: &Path, expected: &[u8]) -> Check {
    let cfg = grid_config(corpus);
    let total = expected.iter().filter(|&&c| c == b'\n').count();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut points = Vec::new();
    for trial in 0..10 {
        let after = rng.random_range(1..total);
        let torn = rng.random_bool(0.5);
        let dir = work.join(format!("crash-{trial}"));
        let opts = RunOptions {
            workers: Some(rng.random_range(1..=8)),
            crash_after_records: Some(after),
            torn_write_on_crash: torn,
        };
        match run_experiment(&cfg, corpus, &dir, &opts) {
            Err(EngineError::Interrupted(_)) => {}
            other => return Err(format!("trial {trial}: expected interruption, got {:?}", other.map(|_| ()))),
        }
        let run = resume_experiment(&dir, &RunOptions::default()).map_err(|e| format!("trial {trial}: {e}"))?;
        ensure(run.manifest.status == RunStatus::Complete, || format!("trial {trial}: not complete"))?;
        let got = fs::read(dir.join(RECORDS_FILE)).map_err(|e| e.to_string())?;
        ensure(got == expected, || format!("trial {trial}: log differs after crash at {after}"))?;
        points.push(format!("{after}{}", if torn { "t" } else { "" }));
    }
    Ok(format!("10/10 resumed logs identical (crash points {})", points.join(",")))
}

fn c7_patterns(corpus: &Corpus, grid: &RunResult, work: &Path) -> Check {
    let summary = summarize_grid(grid);
    let row_mean = |id: u32| {
        let r = summary.rows.iter().position(|r| r.id == id).expect("row");
        summary.row_means[r].expect("complete row")
    };
    let mean_of = |ids: &[u32]| ids.iter().map(|&i| row_mean(i)).sum::<Ratio<u64>>() / ids.len() as u64;
    let acc = mean_of(&[13, 18, 3]);
    let stab = mean_of(&[6, 8, 16]);
    ensure(acc > stab, || format!("(a) accelerators {acc} <= stabilizers {stab}"))?;

    let mut backend = BackendConfig::synthetic();
    backend.profiles = [(1, PersonaProfile::new(0.0, 0.2))].into();
    let cfg = RunConfig {
        branch_count: 1,
        backend,
        ..RunConfig::full_grid(Mode::Homogeneous, corpus, SEED)
    };
    let zero = run_experiment(&cfg, corpus, &work.join("zero-flip"), &RunOptions::default()).map_err(|e| e.to_string())?;
    ensure(zero.branches.len() == 10 && zero.branches.iter().all(|b| b.mpr.sum == 0), || {
        "(b) zero-flip branch drifted".into()
    })?;

    let top = grid
        .branches
        .iter()
        .max_by(|a, b| {
            a.mpr
                .ratio()
                .cmp(&b.mpr.ratio())
                .then_with(|| (&b.domain_id, b.branch_index).cmp(&(&a.domain_id, a.branch_index)))
        })
        .expect("grid has branches");
    let tier = classify(top.mpr.ratio());
    ensure(tier == SeverityTier::Propaganda, || format!("(c) top branch is {tier}"))?;
    let at = inflection_point(&top.mi_trajectory(), TierBoundary::Propaganda, DEFAULT_PERSISTENCE);
    ensure(matches!(at, Some(k) if k < 10), || format!("(c) inflection {at:?}"))?;
    Ok(format!(
        "(a) {} > {}; (b) 10 zero-flip branches at MPR 0; (c) #{} on {} MPR {} {tier}, inflection at node {}",
        misinfo_sim::metrics::format_2dp(acc),
        misinfo_sim::metrics::format_2dp(stab),
        top.branch_index,
        top.domain_id,
        top.mpr,
        at.unwrap()
    ))
}

fn attr<'a>(tag: &'a str, name: &str) -> Option<&'a str> {
    let key = format!(" {name}=\"");
    let start = tag.find(&key)? + key.len();
    Some(&tag[start..start + tag[start..].find('"')?])
}

fn c8_reporting(grid: &RunResult) -> Check {
    let summary = summarize_grid(grid);
    let out = render_branch_heatmap(&summary, &HeatmapSpec::branch_level()).map_err(|e| e.to_string())?;
    let table = read_branch_csv(&out.csv).map_err(|e| e.to_string())?;
    ensure(table.cols == summary.cols, || "column headers differ".into())?;
    let mut n = 0;
    for (r, row) in summary.mpr_cells.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            ensure(table.cells[r][c] == cell.map(|m| m.ratio()), || format!("cell ({r},{c}) differs"))?;
            n += 1;
        }
    }
    ensure(table.row_means.as_ref() == Some(&summary.row_means), || "row means differ".into())?;
    ensure(table.col_means.as_ref() == Some(&summary.col_means), || "column means differ".into())?;

    let mut colored = 0;
    for line in out.svg.lines().filter(|l| l.starts_with("<rect class=\"cell\"")) {
        let v = attr(line, "data-value").and_then(parse_ratio).ok_or("cell without value")?;
        let fill = attr(line, "fill").unwrap_or("");
        ensure(fill == classify(v).color(), || format!("{v} drawn {fill}"))?;
        colored += 1;
    }
    ensure(colored == n + summary.rows.len() + summary.cols.len() + 1, || format!("{colored} colored cells"))?;

    let (mut e, mut l, mut p) = (0, 0, 0);
    for br in &grid.branches {
        let mis = br.mi_trajectory();
        let v = Ratio::new(mis.iter().map(|&x| u64::from(x)).sum::<u64>(), (mis.len() - 1) as u64);
        if v <= Ratio::from_integer(1) {
            e += 1;
        } else if v <= Ratio::from_integer(3) {
            l += 1;
        } else {
            p += 1;
        }
    }
    let want = format!("(error, lie, propaganda) = ({e}, {l}, {p})");
    ensure(render_summary(grid).contains(&want), || format!("summary lacks {want}"))?;
    Ok(format!("{n} cells re-parsed exactly, {colored} colors checked, {want}"))
}

fn c9_live_smoke(corpus: &Corpus, work: &Path) -> Outcome {
    if std::env::var("MISINFO_LIVE_SMOKE").as_deref() != Ok("1") {
        return Outcome::Skip("set MISINFO_LIVE_SMOKE=1 and MISINFO_API_KEY to run".into());
    }
    if std::env::var(API_KEY_ENV).map(|k| k.is_empty()).unwrap_or(true) {
        return Outcome::Skip(format!("{API_KEY_ENV} not set"));
    }
    let check = || -> Check {
        let cfg = RunConfig {
            mode: Mode::Homogeneous,
            branch_count: 1,
            depth: 2,
            domain_ids: vec!["sports0".into()],
            backend: BackendConfig::live(),
            master_seed: SEED,
            custom_assignment: None,
            max_repeats: 2,
        };
        let dir = work.join("live");
        let run = run_experiment(&cfg, corpus, &dir, &RunOptions::default()).map_err(|e| e.to_string())?;
        ensure(run.aborted.is_empty(), || format!("aborted: {:?}", run.aborted))?;
        let br = run.branch("sports0", 1).ok_or("branch missing")?;
        ensure(br.node_records.len() == 3, || format!("{} nodes", br.node_records.len()))?;
        for r in &br.node_records[1..] {
            ensure(!r.article_text.trim().is_empty(), || format!("node {} empty", r.node_index))?;
            ensure(r.answer_vector.m() == 10, || format!("node {} has {} answers", r.node_index, r.answer_vector.m()))?;
        }
        let calls: Vec<CallRecord> = fs::read_to_string(dir.join(CALLS_FILE))
            .map_err(|e| e.to_string())?
            .lines()
            .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
        ensure(calls.len() >= 5, || format!("{} archived calls", calls.len()))?;
        ensure(calls.iter().all(|c| c.response.is_some() || c.error.is_some()), || "unarchived reply".into())?;
        Ok(format!("2 rewrites, 2 audits of length 10, {} exchanges archived", calls.len()))
    };
    match check() {
        Ok(s) => Outcome::Pass(s),
        Err(s) => Outcome::Fail(s),
    }
}

fn main() {
    let corpus = bundled_corpus();
    let work = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let outcome = |r: Check| match r {
        Ok(s) => Outcome::Pass(s),
        Err(s) => Outcome::Fail(s),
    };

    results.push(("1 metric oracle", outcome(c1_metric_oracle())));
    results.push(("2 mpr formula", outcome(c2_mpr_formula())));
    results.push(("3 taxonomy partition", outcome(c3_taxonomy())));
    results.push(("4 heterogeneous cap", outcome(c4_heterogeneous(&corpus))));
    match c5_determinism(&corpus, work.path()) {
        Ok((msg, grid, log)) => {
            results.push(("5 determinism", Outcome::Pass(msg)));
            results.push(("6 crash-resume", outcome(c6_crash_resume(&corpus, work.path(), &log))));
            results.push(("7 qualitative patterns", outcome(c7_patterns(&corpus, &grid, work.path()))));
            results.push(("8 reporting round-trip", outcome(c8_reporting(&grid))));
        }
        Err(e) => {
            results.push(("5 determinism", Outcome::Fail(e)));
            for name in ["6 crash-resume", "7 qualitative patterns", "8 reporting round-trip"] {
                results.push((name, Outcome::Fail("needs the grid from criterion 5".into())));
            }
        }
    }
    results.push(("9 live smoke", c9_live_smoke(&corpus, work.path())));

    let mut failed = 0;
    for (name, o) in &results {
        let (tag, msg) = match o {
            Outcome::Pass(m) => ("PASS", m),
            Outcome::Fail(m) => {
                failed += 1;
                ("FAIL", m)
            }
            Outcome::Skip(m) => ("SKIP", m),
        };
        println!("{tag} [{name}] {msg}");
    }
    let names: BTreeSet<&str> = results.iter().map(|r| r.0).collect();
    assert_eq!(names.len(), 9);
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all criteria met");
}
