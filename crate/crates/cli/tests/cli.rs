use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn lab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lab"))
        .args(args)
        .current_dir(cwd)
        .env_remove("LAB_OUTPUT_DIR")
        .output()
        .expect("spawn lab")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn write_spec(dir: &Path, text: &str) -> String {
    let p = dir.join("spec.toml");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn list_shows_every_family_in_sorted_order() {
    let tmp = TempDir::new().unwrap();
    let o = lab(&["list"], tmp.path());
    assert!(o.status.success());
    let names: Vec<String> = stdout(&o).lines().map(|l| l.split_whitespace().next().unwrap().to_string()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
    for family in ["concentration.", "fit.rate", "sampler.compare", "sampler.k_sweep", "bounds.sml_w2", "bounds.kl_dissipation", "estimator.erm_demo"] {
        assert!(names.iter().any(|n| n.starts_with(family)), "missing {family}");
    }
    assert_eq!(stdout(&lab(&["list"], tmp.path())), stdout(&o));
}

#[test]
fn list_json_is_machine_readable() {
    let tmp = TempDir::new().unwrap();
    let o = lab(&["list", "--json"], tmp.path());
    assert!(o.status.success());
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let items = v.as_array().unwrap();
    assert_eq!(items.len(), 13);
    assert!(items.iter().all(|i| i["name"].is_string() && i["description"].is_string()));
}

#[test]
fn validation_errors_name_the_key() {
    let tmp = TempDir::new().unwrap();
    let cases = [
        ("scenario = \"fit.rate\"\n[sweep]\nn = []\n", "sweep.n"),
        ("scenario = \"fit.rate\"\n[fit]\nbetta = 2.0\n", "fit.betta"),
        ("scenario = \"nope.nothing\"\n", "scenario"),
        ("scenario = \"fit.rate\"\nschema_version = 9\n", "schema_version"),
        ("scenario = \"sampler.k_sweep\"\n[sampler]\nk_ref = 100\n", "sampler.k_ref"),
    ];
    for (text, key) in cases {
        let spec = write_spec(tmp.path(), text);
        for cmd in ["validate", "run"] {
            let o = lab(&[cmd, &spec], tmp.path());
            assert_eq!(o.status.code(), Some(1), "{cmd} {text}");
            assert!(stderr(&o).contains(&format!("{key}:")), "{cmd}: {}", stderr(&o));
        }
    }
    assert!(!tmp.path().join("lab-output").exists());
    let spec = write_spec(tmp.path(), "scenario = \"concentration.denoiser_variance\"\n");
    let o = lab(&["validate", &spec], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
}

fn digest(path: &Path) -> String {
    Sha256::digest(fs::read(path).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn denoiser_default_sweep_matches_golden_files() {
    let tmp = TempDir::new().unwrap();
    let spec = golden("denoiser_variance.toml");
    let o = lab(&["run", spec.to_str().unwrap(), "--out", "first"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("first");
    let mut csvs: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    csvs.sort();
    assert_eq!(csvs, ["denoiser_variance_D512.csv", "denoiser_variance_D64.csv", "denoiser_variance_D8.csv"]);
    let expected = fs::read_to_string(golden("denoiser_variance.sha256")).unwrap();
    for line in expected.lines() {
        let (hash, name) = line.split_once("  ").unwrap();
        assert_eq!(digest(&out.join(name)), hash, "{name}");
    }
    let first = fs::read_to_string(out.join("denoiser_variance_D8.csv")).unwrap();
    assert_eq!(first.lines().next(), Some("trial,statistic,margin,violated"));
    assert_eq!(first.lines().count(), 201);

    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["reports"].as_array().unwrap().len(), 3);
    assert!(summary["median_spread"].as_f64().is_some());

    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["verdict"], "ok");
    assert_eq!(manifest["spec_sha256"].as_str().unwrap(), digest(&spec));
    assert!(manifest["wall_time_seconds"].as_f64().unwrap() >= 0.0);
    assert_eq!(manifest["files"].as_array().unwrap().len(), 5);

    // Same seed, parallel sweep: byte-identical CSVs.
    let o = lab(&["run", spec.to_str().unwrap(), "--out", "second", "--parallel"], tmp.path());
    assert!(o.status.success());
    for name in &csvs {
        assert_eq!(fs::read(out.join(name)).unwrap(), fs::read(tmp.path().join("second").join(name)).unwrap(), "{name}");
    }
}

#[test]
fn output_directory_precedence() {
    let tmp = TempDir::new().unwrap();
    let spec = write_spec(tmp.path(), "scenario = \"bounds.sml_w2\"\n[bounds]\npairs = 3\n");
    let run = |env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_lab"));
        c.args(["run", &spec]).current_dir(tmp.path()).env_remove("LAB_OUTPUT_DIR");
        if let Some(v) = env {
            c.env("LAB_OUTPUT_DIR", v);
        }
        assert!(c.output().unwrap().status.success());
    };
    run(None);
    assert!(tmp.path().join("lab-output/manifest.json").exists());
    run(Some("from-env"));
    assert!(tmp.path().join("from-env/sml_w2.csv").exists());
    let spec = write_spec(tmp.path(), "scenario = \"bounds.sml_w2\"\noutput_dir = \"from-spec\"\n[bounds]\npairs = 3\n");
    let mut c = Command::new(env!("CARGO_BIN_EXE_lab"));
    let o = c.args(["run", &spec]).current_dir(tmp.path()).env("LAB_OUTPUT_DIR", "from-env-2").output().unwrap();
    assert!(o.status.success());
    assert!(tmp.path().join("from-spec/sml_w2.csv").exists());
    assert!(!tmp.path().join("from-env-2").exists());
}

#[test]
fn bound_violation_exits_with_two() {
    // Unit factor matches the computed dissipation; factor 2 does not.
    let tmp = TempDir::new().unwrap();
    let spec = write_spec(tmp.path(), "scenario = \"bounds.kl_dissipation\"\n[bounds]\nfactor = 1.0\ntolerance = 1e-4\n");
    let o = lab(&["run", &spec, "--out", "unit"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let spec = write_spec(tmp.path(), "scenario = \"bounds.kl_dissipation\"\n[bounds]\nfactor = 2.0\n");
    let o = lab(&["run", &spec, "--out", "double"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("double/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["verdict"], "bound_violation");
    let csv = fs::read_to_string(tmp.path().join("double/kl_dissipation.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("dim,t,metric,value,stderr,bound,ratio"));
}

#[test]
fn estimator_demo_writes_checkpoint_and_trace() {
    let tmp = TempDir::new().unwrap();
    let spec = write_spec(tmp.path(), "scenario = \"estimator.erm_demo\"\nseed = 2\n[estimator.train]\nsteps = 50\n");
    let o = lab(&["run", &spec, "--out", "erm"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = tmp.path().join("erm");
    let trace = fs::read_to_string(dir.join("risk_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 51);
    let model = mdlab::estimators::StructuredScore::read_json(fs::File::open(dir.join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(model.len(), 8);
}
