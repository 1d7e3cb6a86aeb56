#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use nalgebra::DVector;
use parot::cost::CostModel;
use parot::flow::Problem;
use parot::geometry::{build_grid, normalize_densities, DensityField, DensitySpec, DomainSpec};

pub fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

pub fn problem(
    cost: CostModel,
    source: DomainSpec,
    target: DomainSpec,
    res: usize,
    rho: &DensitySpec,
    rho_star: &DensitySpec,
) -> Problem {
    let s = Arc::new(build_grid(&source, res).unwrap());
    let t = Arc::new(build_grid(&target, res).unwrap());
    let a = DensityField::from_spec(s, rho).unwrap();
    let b = DensityField::from_spec(t, rho_star).unwrap();
    let (a, b) = normalize_densities(&a, &b).unwrap();
    Problem::new(cost, a, b).unwrap()
}

pub fn uniform() -> DensitySpec {
    DensitySpec::Constant { value: 1.0 }
}

/// The two non-uniform 1D density pairs used by the key-example runs.
pub fn density_pairs() -> [(DensitySpec, DensitySpec); 2] {
    [
        (
            DensitySpec::Affine {
                base: 1.0,
                slope: vec![0.5],
            },
            DensitySpec::Cosine {
                base: 1.0,
                amplitude: 0.3,
                frequency: 1.0,
            },
        ),
        (
            DensitySpec::Cosine {
                base: 1.0,
                amplitude: 0.25,
                frequency: 2.0,
            },
            DensitySpec::Affine {
                base: 1.0,
                slope: vec![-0.4],
            },
        ),
    ]
}

pub fn density_toml(table: &str, d: &DensitySpec) -> String {
    match d {
        DensitySpec::Constant { value } => format!("[{table}]\nkind = \"constant\"\nvalue = {value:?}\n"),
        DensitySpec::Affine { base, slope } => {
            format!("[{table}]\nkind = \"affine\"\nbase = {base:?}\nslope = {slope:?}\n")
        }
        DensitySpec::Cosine {
            base,
            amplitude,
            frequency,
        } => format!(
            "[{table}]\nkind = \"cosine\"\nbase = {base:?}\namplitude = {amplitude:?}\nfrequency = {frequency:?}\n"
        ),
        DensitySpec::Csv { path } => format!("[{table}]\nkind = \"csv\"\npath = {path:?}\n"),
    }
}

pub const INTERVALS: &str = r#"[source]
kind = "interval"
center = [0.5]
half_extents = [0.5]

[target]
kind = "interval"
center = [2.5]
half_extents = [0.5]
"#;

pub const DISCS: &str = r#"[source]
kind = "disc"
center = [0.0, 0.0]
half_extents = [1.0, 1.0]

[target]
kind = "disc"
center = [4.0, 0.0]
half_extents = [1.0, 1.0]
"#;

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

pub fn parot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parot"))
        .args(args)
        .env("PAROT_LOG", "warn")
        .output()
        .expect("spawn parot")
}

/// Runs `parot <cmd> --config <cfg> --out <out>` and returns the exit code
/// and the parsed `<cmd>.json` envelope.
pub fn run_cmd(cmd: &str, cfg: &Path, out: &Path) -> (i32, serde_json::Value) {
    let o = parot(&[cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let code = o.status.code().unwrap_or(-1);
    let text = fs::read_to_string(out.join(format!("{cmd}.json")))
        .unwrap_or_else(|e| panic!("{cmd}.json missing ({e}); stderr: {}", String::from_utf8_lossy(&o.stderr)));
    (code, serde_json::from_str(&text).unwrap())
}

pub fn num(v: &serde_json::Value, path: &str) -> f64 {
    let mut cur = v;
    for k in path.split('.') {
        cur = &cur[k];
    }
    cur.as_f64().unwrap_or_else(|| panic!("{path} is not a number: {cur}"))
}
