//! Fixtures shared by the benchmarks.

use std::fmt::Write as _;

use iterlace_core::latent::Graph;
use iterlace_core::model::{Model, ModelSpec};
use tempfile::TempDir;

/// A compiled model together with the directory holding its data files.
pub struct Fixture {
    pub model: Model,
    _dir: TempDir,
}

fn compile(files: &[(&str, String)], json: &str) -> Fixture {
    let dir = tempfile::tempdir().expect("temporary directory");
    for (name, text) in files {
        std::fs::write(dir.path().join(name), text).expect("fixture file");
    }
    let spec = ModelSpec::from_json_str(json).expect("fixture spec");
    let model = Model::compile(spec, dir.path()).expect("fixture model");
    Fixture { model, _dir: dir }
}

fn graph_file(g: &Graph) -> String {
    let mut s = format!("n {}\n", g.n());
    for &(a, b) in g.edges() {
        writeln!(s, "{} {}", a + 1, b + 1).unwrap();
    }
    s
}

/// Poisson counts with an exponential-marginal rate, `n` observations.
pub fn toy(n: usize) -> Fixture {
    let mut csv = String::from("y\n");
    for i in 0..n {
        writeln!(csv, "{}", i % 3).unwrap();
    }
    compile(
        &[("toy.csv", csv)],
        r#"{"components":[{"name":"lambda","model":"iid","n":1,"hyper":{"prec":{"initial":0,"fixed":true}},
              "marginal":{"family":"exponential","rate":0.5}}],
            "likelihoods":[{"family":"poisson","response":"y","formula":"log(lambda)","data":"toy.csv"}]}"#,
    )
}

/// Linear BYM model on a `side × side` lattice with deterministic counts.
pub fn bym(side: usize) -> Fixture {
    let g = Graph::lattice(side, side);
    let mut csv = String::from("count,area\n");
    for i in 0..side * side {
        let (r, c) = ((i / side) as f64, (i % side) as f64);
        let rate = (1.0 + 0.5 * (r / 3.0).sin() + 0.3 * (c / 2.0).cos()).exp();
        writeln!(csv, "{},{}", rate.round(), i + 1).unwrap();
    }
    compile(
        &[("g.txt", graph_file(&g)), ("d.csv", csv)],
        r#"{"components":[{"name":"beta","model":"linear"},
              {"name":"w","model":"bym","input":{"kind":"index_column","column":"area"},"graph":"g.txt"}],
            "likelihoods":[{"family":"poisson","response":"count","formula":"beta + w","data":"d.csv"}]}"#,
    )
}

/// Non-linear predictor `a + exp(c x)` with Poisson counts.
pub fn nonlinear(n: usize) -> Fixture {
    let mut csv = String::from("y,x\n");
    for i in 0..n {
        let x = i as f64 / n as f64;
        writeln!(csv, "{},{x:?}", (1.0 + (0.8 * x).exp()).round()).unwrap();
    }
    compile(
        &[("d.csv", csv)],
        r#"{"components":[{"name":"a","model":"linear"},
              {"name":"c","model":"linear","input":{"kind":"column","column":"x"},"prec_linear":1}],
            "likelihoods":[{"family":"poisson","response":"y","formula":"a + exp(c)","data":"d.csv"}]}"#,
    )
}
