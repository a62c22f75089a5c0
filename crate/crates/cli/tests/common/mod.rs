#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use serval_testkit::{MockEncoder, MockVlm};

pub fn e2e_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e")
}

/// Mock VLM and encoder scripted from `mock_script.json`.
pub struct Mocks {
    pub vlm: MockVlm,
    pub encoder: MockEncoder,
}

impl Mocks {
    pub fn start() -> Self {
        let dir = e2e_dir();
        let script: Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("mock_script.json")).unwrap()).unwrap();
        let vlm = MockVlm::start();
        for (doc, text) in script["descriptions"].as_object().unwrap() {
            let bytes = std::fs::read(dir.join(format!("{doc}.png"))).unwrap();
            vlm.respond_to(&bytes, text.as_str().unwrap());
        }
        let encoder = MockEncoder::start(4);
        for (text, v) in script["vectors"].as_object().unwrap() {
            let v: Vec<f64> = serde_json::from_value(v.clone()).unwrap();
            encoder.dense(text.clone(), v);
        }
        Self { vlm, encoder }
    }

    pub fn requests(&self) -> usize {
        self.vlm.requests() + self.encoder.requests()
    }
}

/// Runs the `serval` binary against the fixture config with mock endpoints and
/// a private work directory.
pub struct Serval<'a> {
    pub config: PathBuf,
    pub work: &'a Path,
    pub overrides: Vec<String>,
}

impl<'a> Serval<'a> {
    pub fn new(mocks: &Mocks, work: &'a Path) -> Self {
        Self {
            config: e2e_dir().join("fixture.toml"),
            work,
            overrides: vec![
                format!("vlm.base_url={}", mocks.vlm.url()),
                format!("encoder.base_url={}", mocks.encoder.url()),
                format!("cache_dir={}", toml_str(&work.join("cache"))),
                format!("index_dir={}", toml_str(&work.join("index"))),
            ],
        }
    }

    pub fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_serval"));
        cmd.arg("--config").arg(&self.config);
        for o in &self.overrides {
            cmd.arg("--set").arg(o);
        }
        cmd.args(args)
            .env("RUST_LOG", "warn")
            .env_remove("SERVAL_VLM_API_KEY")
            .env_remove("SERVAL_ENCODER_API_KEY")
            .output()
            .expect("spawn serval")
    }

    /// Runs and asserts success, returning stdout.
    pub fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "serval {args:?} failed ({:?}):\n{}\n{}",
            out.status.code(),
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    pub fn run_path(&self) -> PathBuf {
        self.work.join("fixture.run")
    }

    pub fn report_path(&self) -> PathBuf {
        self.work.join("report.json")
    }

    /// describe -> encode -> index -> search -> evaluate.
    pub fn full_pipeline(&self) {
        self.ok(&["describe"]);
        self.ok(&["encode"]);
        self.ok(&["index"]);
        let run = self.run_path();
        self.ok(&["search", "--output", run.to_str().unwrap()]);
        let report = self.report_path();
        self.ok(&[
            "evaluate",
            "--run",
            &format!("fixture={}", run.display()),
            "--out",
            report.to_str().unwrap(),
        ]);
    }
}

/// Quoted TOML string for a path, so `--set` never reinterprets it.
pub fn toml_str(p: &Path) -> String {
    format!("{:?}", p.to_str().unwrap())
}

/// Flattens a report into `path -> number` plus the set of keys, for tolerant comparison.
pub fn numbers(v: &Value) -> BTreeMap<String, f64> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, f64>) {
        match v {
            Value::Object(m) => {
                for (k, v) in m {
                    walk(&format!("{prefix}/{k}"), v, out);
                }
            }
            Value::Number(n) => {
                out.insert(prefix.to_string(), n.as_f64().unwrap());
            }
            other => panic!("unexpected {other} at {prefix}"),
        }
    }
    let mut out = BTreeMap::new();
    walk("", v, &mut out);
    out
}

/// Reports match when they have the same keys and every number agrees within 1e-12.
pub fn reports_match(got: &Value, expected: &Value) -> Result<(), String> {
    let (g, e) = (numbers(got), numbers(expected));
    if g.keys().ne(e.keys()) {
        return Err(format!(
            "keys differ: {:?} vs {:?}",
            g.keys().collect::<Vec<_>>(),
            e.keys().collect::<Vec<_>>()
        ));
    }
    for (k, ev) in &e {
        if (g[k] - ev).abs() > 1e-12 {
            return Err(format!("{k}: {} vs {ev}", g[k]));
        }
    }
    Ok(())
}
