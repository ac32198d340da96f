//! Acceptance gate. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails. Run with `--nocapture` to see the lines.

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use bikd::experiment::{
    build_dataset, eval_run, run_dir, run_seed, write_dataset, DatasetSpec, ExperimentConfig, Method, Role,
};
use bikd::train::TrainConfig;
use bikd::verify;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within(t0: Instant, limit: Duration) -> (bool, String) {
    let e = t0.elapsed();
    (e < limit, format!("{:.1}s (limit {}s)", e.as_secs_f64(), limit.as_secs()))
}

fn gradcheck() -> Outcome {
    let t0 = Instant::now();
    let r = verify::gradcheck_suite(20).expect("gradcheck suite runs");
    let worst = r.checks.iter().map(|c| c.value).fold(0.0, f64::max);
    let failing: Vec<&str> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let (fast, time) = within(t0, Duration::from_secs(60));
    outcome(
        r.passed && fast,
        format!(
            "{} ops and compositions x 20 seeds, worst rel err {worst:.2e} (tol 1e-5), failing {failing:?}, {time}",
            r.checks.len()
        ),
    )
}

fn hypergrad_triple() -> Outcome {
    let t0 = Instant::now();
    let r = verify::hypergrad_suite(&[1, 2, 3, 5], 3).expect("hypergrad suite runs");
    let worst = |suffix: &str| {
        r.checks
            .iter()
            .filter(|c| c.name.ends_with(suffix))
            .map(|c| c.value)
            .fold(0.0, f64::max)
    };
    let (fast, time) = within(t0, Duration::from_secs(300));
    outcome(
        r.passed && fast,
        format!(
            "k in {{1,2,3,5}} x 3 seeds, student 517 params, meta 162 params: (a)v(b) {:.2e} (tol 1e-8), \
             (a)v(c) {:.2e}, (b)v(c) {:.2e} (tol 1e-4 where |g| > 1e-6), {time}",
            worst("autodiff_vs_explicit"),
            worst("autodiff_vs_fd"),
            worst("explicit_vs_fd"),
        ),
    )
}

fn toy_analytic() -> Outcome {
    let c = verify::toy_check().expect("toy check runs");
    outcome(
        c.passed,
        format!("worst rel err of autodiff/explicit/fd vs closed form {:.2e} (tol 1e-6)", c.value),
    )
}

fn online_reduction() -> Outcome {
    let (ok, at) = verify::online_reduction(50, 11).expect("online reduction runs");
    outcome(
        ok,
        if ok {
            "meta parameters and Adam state bit-identical over 50 batches".to_string()
        } else {
            format!("trajectories diverge at batch {at}")
        },
    )
}

fn alignment_sign() -> Outcome {
    let (a, before, after) = verify::alignment_sign(1e-4, 3).expect("alignment check runs");
    outcome(
        a > 0.0 && after > before,
        format!("alignment {a:.4e} > 0, w_hard {before:.10} -> {after:.10}"),
    )
}

fn longtail() -> Outcome {
    let r = verify::data_suite(10, 5000, 100.0).expect("data suite runs");
    let spec = DatasetSpec {
        n_max: 5000,
        rho: 100.0,
        ..DatasetSpec::default()
    };
    let d = build_dataset(&spec).expect("dataset builds");
    let counts = d.train.counts();
    let balanced = d.val.counts() == vec![100; 10];
    let rows = |ds: &bikd::data::LabeledDataset| -> HashSet<Vec<u32>> {
        (0..ds.len()).map(|i| ds.sample(i).iter().map(|v| v.to_bits()).collect()).collect()
    };
    let train_rows = rows(&d.train);
    let disjoint = rows(&d.val).is_disjoint(&train_rows) && train_rows.len() == d.train.len();
    let ratio = counts[0] as f64 / counts[9] as f64;
    outcome(
        r.passed && balanced && disjoint && counts == bikd::data::class_counts(&bikd::data::LongTailSpec {
            classes: 10,
            n_max: 5000,
            rho: 100.0,
            seed: 0,
        })
        .unwrap(),
        format!(
            "counts {counts:?}, ratio {ratio:.3} (within 2% of 100), validation {:?} balanced {balanced} disjoint {disjoint}",
            d.val.counts()
        ),
    )
}

fn kl_ce() -> Outcome {
    let gap = verify::kl_ce_gap(20).expect("kl/ce check runs");
    outcome(gap <= 1e-9, format!("max gradient gap {gap:.2e} over 20 instances (tol 1e-9)"))
}

fn fixed_alpha() -> Outcome {
    let mut all = true;
    let mut parts = Vec::new();
    for alpha in [0.1, 0.5, 0.9] {
        let (ok, at) = verify::fixed_alpha_reproduction(alpha, 20, 7).expect("fixed-alpha check runs");
        all &= ok;
        parts.push(if ok {
            format!("alpha {alpha}: bit-identical")
        } else {
            format!("alpha {alpha}: diverges at batch {at}")
        });
    }
    outcome(all, format!("{} over 20 batches", parts.join(", ")))
}

fn desk_config(method: Method, role: Role, dataset: &Path, teacher: Option<&Path>, output: &Path) -> ExperimentConfig {
    ExperimentConfig {
        method,
        role,
        precision: Default::default(),
        seeds: vec![0],
        dataset: dataset.to_path_buf(),
        teacher: teacher.map(Path::to_path_buf),
        output: output.to_path_buf(),
        train: TrainConfig {
            epochs: 40,
            milestones: vec![26, 33],
            ..TrainConfig::default()
        },
        student_arch: None,
        teacher_arch: None,
        meta: Default::default(),
    }
}

fn desk_trend() -> Outcome {
    let t0 = Instant::now();
    let root = tempfile::tempdir().expect("tempdir");
    let (mut kd_tail, mut bikd_tail, mut teacher_acc) = (0.0, 0.0, 0.0);
    let mut per_seed = Vec::new();
    for seed in 0..3u64 {
        let base = root.path().join(format!("s{seed}"));
        let ds = base.join("data");
        let spec = DatasetSpec {
            seed,
            ..DatasetSpec::default()
        };
        write_dataset(&ds, &spec, &build_dataset(&spec).expect("dataset")).expect("dataset written");
        let tcfg = desk_config(Method::Ce, Role::Teacher, &ds, None, &base.join("teacher"));
        let tdir = run_dir(&tcfg.output, seed);
        run_seed(&tcfg, seed, &tdir).expect("teacher trains");
        teacher_acc += eval_run(&tdir).expect("teacher evaluates").metrics.accuracy / 3.0;
        let mut tails = [0.0; 2];
        for (i, m) in [Method::Kd, Method::Bikd].into_iter().enumerate() {
            let cfg = desk_config(m, Role::Student, &ds, Some(&tdir), &base.join(m.as_str()));
            let dir = run_dir(&cfg.output, seed);
            run_seed(&cfg, seed, &dir).expect("student trains");
            tails[i] = eval_run(&dir).expect("student evaluates").tail;
        }
        kd_tail += tails[0] / 3.0;
        bikd_tail += tails[1] / 3.0;
        per_seed.push(format!("seed {seed}: kd {:.4} bikd {:.4}", tails[0], tails[1]));
    }
    let (fast, time) = within(t0, Duration::from_secs(600));
    outcome(
        bikd_tail >= kd_tail && fast,
        format!(
            "mean tail-3 accuracy bikd {bikd_tail:.4} vs kd {kd_tail:.4} (teacher acc {teacher_acc:.4}; {}), {time}",
            per_seed.join(", ")
        ),
    )
}

fn bikd(args: &[&str], root: &Path) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_bikd"))
        .args(args)
        .env("BIKD_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "bikd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().expect("tempdir");
    let r = root.path();
    let data = [
        "data", "--classes", "5", "--dim", "8", "--n-max", "120", "--rho", "10", "--val-size", "50", "--seed", "3",
    ];
    bikd(&[&data[..], &["--out", "d1"]].concat(), r);
    bikd(&[&data[..], &["--out", "d2"]].concat(), r);
    let same_data = ["train", "val", "test"].iter().all(|s| {
        std::fs::read(r.join("d1").join(format!("{s}.bin"))).unwrap()
            == std::fs::read(r.join("d2").join(format!("{s}.bin"))).unwrap()
    });
    bikd(
        &["train", "--method", "ce", "--role", "teacher", "--dataset", "d1", "--epochs", "4", "--out", "t"],
        r,
    );
    let mut same_logs = same_data;
    let mut checked = Vec::new();
    for method in ["ce", "kd", "bikd"] {
        let mut logs = Vec::new();
        for rep in ["a", "b"] {
            let out = format!("{method}-{rep}");
            let mut args = vec![
                "train", "--method", method, "--dataset", "d1", "--epochs", "4", "--k", "3", "--seed", "0", "--seed",
                "1", "--out", &out,
            ];
            if method != "ce" {
                args.extend(["--teacher", "t"]);
            }
            bikd(&args, r);
            bikd(&["eval", &out], r);
            for seed in [0, 1] {
                let dir = r.join(&out).join(format!("seed-{seed}"));
                logs.push((
                    std::fs::read(dir.join("runlog.csv")).unwrap(),
                    std::fs::read(dir.join("metrics.csv")).unwrap(),
                    std::fs::read(dir.join("model.bin")).unwrap(),
                ));
            }
        }
        let same = logs[0] == logs[2] && logs[1] == logs[3];
        let seeds_differ = logs[0].0 != logs[1].0;
        same_logs &= same && seeds_differ;
        checked.push(format!("{method}: identical {same}, seeds differ {seeds_differ}"));
    }
    outcome(
        same_logs,
        format!(
            "data artifacts identical {same_data}; RunLog, metrics and checkpoint bytes across two runs: {}",
            checked.join("; ")
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("gradcheck suite", gradcheck),
        ("hypergradient triple agreement", hypergrad_triple),
        ("toy analytic hypergradient", toy_analytic),
        ("k=1 online reduction", online_reduction),
        ("alignment sign", alignment_sign),
        ("long-tail construction", longtail),
        ("KL/CE soft-target equivalence", kl_ce),
        ("fixed-alpha reproduction", fixed_alpha),
        ("desk-scale comparative trend", desk_trend),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        println!("{} {:>2} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, i + 1, o.detail);
        if !o.passed {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
