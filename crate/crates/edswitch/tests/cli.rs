use std::path::Path;

use clap::Parser;
use edswitch::chains::runs;
use edswitch::cli::{read_regimes, run, Cli};
use edswitch::config::{DurationSpec, EmissionSpec, ModelConfig, TransitionSpec};
use edswitch::oracle::empirical_pmf;

fn configs() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn exec(args: &[&str]) -> edswitch::Result<std::process::ExitCode> {
    run(Cli::parse_from(std::iter::once("edswitch").chain(args.iter().copied())))
}

fn small_sar(regimes: usize, duration: DurationSpec) -> ModelConfig {
    let mut cfg = ModelConfig::from_toml_str(&std::fs::read_to_string(configs().join("sar.toml")).unwrap()).unwrap();
    cfg.regimes = regimes;
    cfg.duration = duration;
    cfg.transition = TransitionSpec::UniformSwitching;
    cfg.emission = EmissionSpec::Sarm { a: (0..regimes).map(|s| vec![0.8 - 0.9 * s as f64, -0.2]).collect(), sigma: vec![1.0; regimes] };
    cfg.condition_end = false;
    cfg
}

fn write_config(dir: &Path, cfg: &ModelConfig) -> String {
    let p = dir.join("model.toml");
    cfg.save(&p).unwrap();
    p.display().to_string()
}

#[test]
fn simulation_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("seven_regime.toml").display().to_string();
    let out = |name: &str| dir.path().join(name).display().to_string();
    for (name, seed) in [("a", "3"), ("b", "3"), ("c", "4")] {
        exec(&["--config", &cfg, "--seed", seed, "--out", &out(name), "simulate", "--length", "200"]).unwrap();
    }
    let read = |name: &str, file: &str| std::fs::read(dir.path().join(name).join(file)).unwrap();
    for file in ["series.csv", "segmentation.csv", "hidden.csv"] {
        assert_eq!(read("a", file), read("b", file), "{file}");
    }
    assert_ne!(read("a", "series.csv"), read("c", "series.csv"));
    let header = String::from_utf8(read("a", "segmentation.csv")).unwrap();
    assert!(header.starts_with("t,s,c,d\n"));
}

#[test]
fn simulated_durations_follow_the_configured_law() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_sar(3, DurationSpec::Uniform { d_min: 2, d_max: 6 });
    let path = write_config(dir.path(), &cfg);
    let out = dir.path().join("sim");
    exec(&["--config", &path, "--out", out.to_str().unwrap(), "simulate", "--length", "30000"]).unwrap();
    let regimes = read_regimes(&out.join("segmentation.csv")).unwrap();
    let segs = runs(&regimes);
    // Neighbouring segments never share a regime, so runs are segments; drop the censored ends.
    let lens: Vec<usize> = segs[1..segs.len() - 1].iter().map(|s| s.len).collect();
    let emp = empirical_pmf(&lens);
    let law = [0.0, 0.0, 0.2, 0.2, 0.2, 0.2, 0.2];
    assert_eq!(emp.len(), law.len());
    let tv: f64 = 0.5 * emp.iter().zip(law).map(|(a, b)| (a - b).abs()).sum::<f64>();
    assert!(tv < 0.04, "total variation {tv} over {} segments", lens.len());
}

#[test]
fn single_regime_inference_is_error_free() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_sar(1, DurationSpec::TruncatedGeometric { stay: vec![0.9], d_min: 1, d_max: 40 });
    let path = write_config(dir.path(), &cfg);
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    exec(&["--config", &path, "--out", o, "simulate", "--length", "150"]).unwrap();
    for enc in ["dec", "inc", "cd"] {
        for task in ["filter", "smooth", "viterbi"] {
            exec(&[
                "--config",
                &path,
                "--encoding",
                enc,
                "--out",
                o,
                "infer",
                "--data",
                &format!("{o}/series.csv"),
                "--truth",
                &format!("{o}/segmentation.csv"),
                "--task",
                task,
            ])
            .unwrap();
            let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
            assert!(summary.contains("segmentation_error_percent,0\n"), "{enc} {task}: {summary}");
        }
    }
}

#[test]
fn mismatched_columns_are_rejected_with_a_diff() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "t,x\n1,0.5\n").unwrap();
    let cfg = configs().join("sar.toml").display().to_string();
    let err = exec(&["--config", &cfg, "--out", dir.path().to_str().unwrap(), "infer", "--data", data.to_str().unwrap()]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("missing [\"v_1\"]") && msg.contains("unexpected [\"x\"]"), "{msg}");
}

#[test]
fn robot_with_exact_measurements_recovers_the_positions() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::robot_default();
    let EmissionSpec::Robot(spec) = &mut cfg.emission else { unreachable!() };
    spec.measurement_std = 0.0;
    let out = dir.path().join("robot");
    let scores = edswitch::cli::robot(&cfg, 1, Some(100), &out).unwrap();
    assert_eq!(scores[0].raw, 0.0);
    assert!(scores[0].smoothed < 1e-6, "{:?}", scores[0]);
    assert!(out.join("robot_trajectory.csv").exists() && out.join("robot_summary.csv").exists());
}

#[test]
fn fitting_writes_a_loadable_config_and_a_monotone_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_sar(2, DurationSpec::Uniform { d_min: 3, d_max: 12 });
    let path = write_config(dir.path(), &cfg);
    let o = dir.path().join("fit").display().to_string();
    exec(&["--config", &path, "--out", &o, "simulate", "--length", "400"]).unwrap();
    exec(&["--config", &path, "--out", &o, "fit", "--data", &format!("{o}/series.csv"), "--max-iters", "8"]).unwrap();
    let fitted = ModelConfig::load(&Path::new(&o).join("fitted.toml")).unwrap();
    assert!(matches!(fitted.duration, DurationSpec::Table { d_min: 3, d_max: 12, .. }));
    let mut r = csv::Reader::from_path(Path::new(&o).join("trace.csv")).unwrap();
    let ll: Vec<f64> = r.records().map(|x| x.unwrap()[1].parse().unwrap()).collect();
    assert_eq!(ll.len(), 9);
    assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{ll:?}");
}

#[test]
fn dsep_reports_both_methods() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.txt");
    std::fs::write(&g, "a -> c\nb -> c\nc -> d\n").unwrap();
    let g = g.to_str().unwrap();
    assert_eq!(edswitch::cli::dsep(Path::new(g), &["a".into()], &["b".into()], &[]).unwrap(), (true, true));
    assert_eq!(edswitch::cli::dsep(Path::new(g), &["a".into()], &["b".into()], &["d".into()]).unwrap(), (false, false));
    exec(&["dsep", "--graph", g, "--x", "a", "--y", "b", "--z", "c,d"]).unwrap();
}

#[test]
fn global_overrides_apply() {
    let cli = Cli::parse_from([
        "edswitch",
        "--encoding",
        "cd",
        "--asi",
        "on",
        "--prune-strategy",
        "drop-lowest",
        "--prune-budget",
        "7",
        "--seed",
        "9",
        "robot",
    ]);
    let cfg = edswitch::cli::apply_overrides(ModelConfig::robot_default(), &cli.global).unwrap();
    assert_eq!(cfg.encoding, edswitch::chains::Encoding::Cd);
    assert!(cfg.asi);
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.prune.unwrap().budget, 7);
    assert_eq!(cfg.prune.unwrap().strategy, edswitch::approx::PruneStrategy::DropLowest);
}
