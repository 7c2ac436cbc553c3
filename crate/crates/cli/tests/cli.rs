use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xgap::metrics::{FeatureSet, Modality};
use xgap_cli::{run_experiment, ExperimentConfig, Study};

fn xgap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xgap")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = xgap(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = xgap(args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn presets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("presets")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
[corpus]
samples_per_class = 12
query_fraction = 0.2
gallery_fraction = 0.3

[model]
d = 16
width = 16
hidden_dim = 32
layers = 1
heads = 2

[train]
steps = 20
batch_size = 16
warmup_steps = 5

[inversion]
oti_steps = 8
ovi_steps = 8
"#;

#[test]
fn every_study_has_a_parsing_preset() {
    for study in Study::ALL {
        let path = presets().join(format!("{}.cfg", study.name()));
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(cfg.study, study);
    }
    let extra: Vec<_> = fs::read_dir(presets()).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(extra.len(), Study::ALL.len());
}

#[test]
fn empty_config_fails_naming_missing_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.cfg");
    fs::write(&cfg, "").unwrap();
    let err = fails(&["experiment", "--config", s(&cfg)]);
    for key in ["study", "seeds", "output"] {
        assert!(err.contains(key), "{err}");
    }
    fs::write(&cfg, "study = \"drift\"\nseeds = [0]\noutput = \"x\"\nsteps = 3\n").unwrap();
    assert!(fails(&["experiment", "--config", s(&cfg)]).contains("steps"));
    assert!(fails(&["experiment", "--config", s(&dir.path().join("absent.cfg"))]).contains("absent.cfg"));
}

#[test]
fn eval_rejects_mismatched_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("q.csv");
    let g = dir.path().join("g.csv");
    FeatureSet::from_rows(Modality::Image, vec![0, 1], vec![0, 1], vec![vec![1.0, 0.0], vec![0.0, 1.0]])
        .unwrap()
        .save(&q)
        .unwrap();
    FeatureSet::from_rows(Modality::Image, vec![2, 3], vec![0, 1], vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]])
        .unwrap()
        .save(&g)
        .unwrap();
    let report = dir.path().join("r.csv");
    let err = fails(&["eval", "--task", "img2img", "--query", s(&q), "--gallery", s(&g), "--report", s(&report)]);
    assert!(err.contains("dimension"), "{err}");
    assert!(!report.exists());

    ok(&["eval", "--task", "img2img", "--query", s(&q), "--gallery", s(&q), "--report", s(&report)]);
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("metric,value\nmap,1\n"), "{text}");
    let err = fails(&["eval", "--task", "img2img", "--query", s(&q), "--gallery", s(&q), "--alpha", "0.5", "--report", s(&report)]);
    assert!(err.contains("--mix"), "{err}");
}

#[test]
fn bad_thread_setting_is_an_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_xgap"))
        .args(["experiment", "--config", "unused.cfg"])
        .env("XGAP_THREADS", "many")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("XGAP_THREADS"));
}

/// `(file name, contents)` of every file in `dir`, sorted.
fn digest_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn subcommands_chain_without_touching_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    fs::write(p("spec.toml"), "seed = 4\nsamples_per_class = 10\nquery_fraction = 0.2\ngallery_fraction = 0.3\n").unwrap();
    ok(&["gen-data", "--spec", s(&p("spec.toml")), "--out", s(&p("corpus"))]);
    let corpus_before = digest_dir(&p("corpus"));

    ok(&["pretrain", "--corpus", s(&p("corpus")), "--loss", "clip", "--tau", "0.05", "--steps", "15", "--batch-size", "8", "--warmup", "2", "--log", s(&p("train.csv")), "--out", s(&p("m.ckpt"))]);
    assert_eq!(fs::read_to_string(p("train.csv")).unwrap().lines().count(), 1 + 15 + 1);
    let ckpt_before = fs::read(p("m.ckpt")).unwrap();
    ok(&["finetune", "--ckpt", s(&p("m.ckpt")), "--corpus", s(&p("corpus")), "--tau", "1.0", "--steps", "3", "--batch-size", "8", "--out", s(&p("f.ckpt"))]);
    assert_ne!(fs::read(p("f.ckpt")).unwrap(), ckpt_before);

    let m = s(&p("m.ckpt")).to_string();
    let c = s(&p("corpus")).to_string();
    ok(&["encode", "--ckpt", &m, "--corpus", &c, "--split", "query", "--what", "image", "--out", s(&p("qi.csv"))]);
    ok(&["encode", "--ckpt", &m, "--corpus", &c, "--split", "gallery", "--what", "image", "--out", s(&p("gi.bin"))]);
    ok(&["encode", "--ckpt", &m, "--corpus", &c, "--what", "prompts", "--out", s(&p("prompts.csv"))]);
    ok(&["invert", "--ckpt", &m, "--mode", "oti", "--corpus", &c, "--split", "query", "-R", "2", "-S", "5", "--gallery", s(&p("go.csv")), "--trajectories", s(&p("traj.csv")), "--out", s(&p("qo.csv"))]);
    ok(&["invert", "--ckpt", &m, "--mode", "ovi", "--corpus", &c, "-P", "4", "-S", "5", "--per-class", "1", "--out", s(&p("qv.csv"))]);

    let qi = FeatureSet::load(&p("qi.csv")).unwrap();
    let qo = FeatureSet::load(&p("qo.csv")).unwrap();
    assert_eq!(qo.modality, Modality::Oti);
    assert_eq!(qo.ids(), qi.ids());
    let go = FeatureSet::load(&p("go.csv")).unwrap();
    assert_eq!(go.len(), FeatureSet::load(&p("gi.bin")).unwrap().len());
    let qv = FeatureSet::load(&p("qv.csv")).unwrap();
    assert_eq!((qv.modality, qv.len()), (Modality::Ovi, 12));
    let traj = fs::read_to_string(p("traj.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 5 * (qo.len() + go.len()));

    for (task, q, g) in [("img2img", "qo.csv", "gi.bin"), ("imgtxt", "qi.csv", "prompts.csv"), ("zeroshot", "qi.csv", "prompts.csv")] {
        let r = p(&format!("{task}.csv"));
        ok(&["eval", "--task", task, "--query", s(&p(q)), "--gallery", s(&p(g)), "--report", s(&r)]);
        assert!(fs::read_to_string(&r).unwrap().starts_with("metric,value\n"));
    }
    let r = p("mixed.csv");
    ok(&["eval", "--task", "img2img", "--query", s(&p("qi.csv")), "--mix", s(&p("qo.csv")), "--alpha", "0.5", "--gallery", s(&p("gi.bin")), "--report", s(&r)]);

    ok(&["diagnose", "--ckpt", &m, "--corpus", &c, "--queries", "4", "-S", "12", "--report", s(&p("diag"))]);
    for f in ["gap.csv", "histograms.csv", "histogram-means.csv", "trajectories.csv"] {
        assert!(p("diag").join(f).is_file(), "{f}");
    }
    let gap = fs::read_to_string(p("diag").join("gap.csv")).unwrap();
    assert!(gap.starts_with("split,images,texts,magnitude\ntrain,"));

    assert_eq!(digest_dir(&p("corpus")), corpus_before);
    assert_eq!(fs::read(p("m.ckpt")).unwrap(), ckpt_before);
    assert!(fails(&["encode", "--ckpt", s(&p("nope.ckpt")), "--corpus", &c, "--what", "image", "--out", s(&p("x.csv"))]).contains("nope.ckpt"));
}

fn tiny_config(study: &str, out: &Path) -> ExperimentConfig {
    let text = format!("study = \"{study}\"\nseeds = [3, 5]\noutput = \"{}\"\n{TINY}", out.display());
    ExperimentConfig::parse(&text).unwrap()
}

#[test]
fn experiments_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let ra = run_experiment(&tiny_config("oti-vs-baseline", &a)).unwrap();
    let rb = run_experiment(&tiny_config("oti-vs-baseline", &b)).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(fs::read(a.join("report.csv")).unwrap(), fs::read(b.join("report.csv")).unwrap());
    assert_eq!(digest_dir(&a.join("seed-3")), digest_dir(&b.join("seed-3")));
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    let other = fs::read_to_string(b.join("manifest.txt")).unwrap();
    assert_eq!(manifest, other);
    assert!(manifest.contains("study\toti-vs-baseline\nconfig_sha256\t"));
    assert!(manifest.contains("artifact\tseed-5/model-clip.ckpt\t"));
    let header = fs::read_to_string(a.join("report.csv")).unwrap();
    assert!(header.starts_with("seed,baseline_map,oti_map\n3,"));
    assert!(header.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn experiment_command_prints_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, format!("study = \"temperature-gap\"\nseeds = [1]\noutput = \"{}\"\n{TINY}\n[evaluation]\nfinetune_steps = 3\n", out.display())).unwrap();
    let stdout = ok(&["experiment", "--config", s(&cfg)]);
    assert_eq!(stdout, fs::read_to_string(out.join("report.csv")).unwrap());
    assert!(stdout.starts_with("seed,pretrain_gap,gap_tau_0.01,gap_tau_1\n1,"));
    assert!(out.join("seed-1/finetune-tau-1.ckpt").is_file());
}

#[test]
fn probe_runs_on_its_own_two_class_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "study = \"misalignment-probe\"\nseeds = [3]\noutput = \"{}\"\n{}",
        dir.path().display(),
        TINY.replace("steps = 20", "steps = 300")
    ) + "[evaluation]\nprobe_shapes = [\"square\"]\nprobe_colors = [\"red\", \"blue\"]\n";
    let report = run_experiment(&ExperimentConfig::parse(&text).unwrap()).unwrap();
    assert_eq!(report.values("inter_r_precision").unwrap(), [1.0]);
    // Both classes of the probe corpus contribute 12 images each.
    assert_eq!(report.values("initial").unwrap(), [24.0]);
}
