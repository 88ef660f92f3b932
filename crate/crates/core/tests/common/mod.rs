#![allow(dead_code)]

use std::path::Path;

use iterlace_core::model::{Model, ModelSpec};

pub fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

pub fn compile(dir: &Path, json: &str) -> Model {
    Model::compile(ModelSpec::from_json_str(json).unwrap(), dir).unwrap()
}

/// Poisson observations of `λ = F⁻¹_Exp(γ)(Φ(u))`, `u ~ N(0, 1)`.
pub fn toy_model(dir: &Path, y: &[f64], gamma: f64) -> Model {
    let mut csv = String::from("y\n");
    for v in y {
        csv.push_str(&format!("{v}\n"));
    }
    write(dir, "toy.csv", &csv);
    compile(
        dir,
        &format!(
            r#"{{"components":[{{"name":"lambda","model":"iid","n":1,
                  "hyper":{{"prec":{{"initial":0,"fixed":true}}}},
                  "marginal":{{"family":"exponential","rate":{gamma}}}}}],
                "likelihoods":[{{"family":"poisson","response":"y","formula":"log(lambda)","data":"toy.csv"}}]}}"#
        ),
    )
}

/// Exact posterior CDF of the toy model: Ga(1 + Σy, γ + n).
pub fn toy_posterior_cdf(y: &[f64], gamma: f64) -> impl Fn(f64) -> f64 {
    let shape = 1.0 + y.iter().sum::<f64>();
    let rate = gamma + y.len() as f64;
    move |x| {
        use statrs::distribution::{ContinuousCDF, Gamma};
        Gamma::new(shape, rate).unwrap().cdf(x)
    }
}

pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n)
    })
}
