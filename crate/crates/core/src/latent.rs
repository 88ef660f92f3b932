//! Latent component models: prior precision matrices, hyperparameters and
//! sum-to-zero constraints for intrinsic models.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::SparseSym;
use crate::special::LN_SQRT_2PI;

/// Undirected neighbourhood graph, stored with 0-based nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl Graph {
    /// Builds a graph from 1-based edges.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a == 0 || b == 0 || a > n || b > n {
                return Err(Error::Data(format!("edge ({a}, {b}) outside 1..={n}")));
            }
            if a == b {
                return Err(Error::Data(format!("self-loop at node {a}")));
            }
            let e = (a.min(b) - 1, a.max(b) - 1);
            if !seen.insert(e) {
                return Err(Error::Data(format!("duplicate edge ({a}, {b})")));
            }
            out.push(e);
        }
        Ok(Graph { n, edges: out })
    }

    /// Parses `n <nodes>` followed by one whitespace-separated edge per line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::Data("empty graph file".into()))?;
        let n = match header.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["n", v] => v.parse::<usize>().map_err(|_| Error::Data(format!("bad node count {v:?}")))?,
            _ => return Err(Error::Data(format!("graph header must be 'n <nodes>', got {header:?}"))),
        };
        let mut edges = Vec::new();
        for line in lines {
            let parts: Vec<_> = line.split_whitespace().collect();
            let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Data(format!("bad edge line {line:?}")));
            match parts.as_slice() {
                [a, b] => edges.push((parse(a)?, parse(b)?)),
                _ => return Err(Error::Data(format!("bad edge line {line:?}"))),
            }
        }
        Graph::new(n, &edges)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Graph::parse(&std::fs::read_to_string(path)?)
    }

    /// 2-D lattice with rook neighbours, nodes numbered row-major.
    pub fn lattice(rows: usize, cols: usize) -> Self {
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    edges.push((i, i + 1));
                }
                if r + 1 < rows {
                    edges.push((i, i + cols));
                }
            }
        }
        Graph { n: rows * cols, edges }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// 0-based edges with `a < b`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Connected components as sorted node lists, ordered by smallest node.
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for &(a, b) in &self.edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..self.n {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
        groups.into_values().collect()
    }

    /// `deg − adjacency`.
    pub fn icar_structure(&self) -> SparseSym {
        let mut t = Vec::with_capacity(self.n + 2 * self.edges.len());
        for &(a, b) in &self.edges {
            t.push((a, a, 1.0));
            t.push((b, b, 1.0));
            t.push((a, b, -1.0));
        }
        for i in 0..self.n {
            t.push((i, i, 0.0));
        }
        SparseSym::from_triplets(self.n, &t).expect("graph indices are validated")
    }
}

/// Prior on a hyperparameter's internal scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperPrior {
    /// Held at the given internal value and excluded from θ.
    Fixed(f64),
    /// Gamma(shape, rate) on the precision `exp(θ)`.
    LogGamma { shape: f64, rate: f64 },
    /// Normal(mean, 1/prec) directly on the internal value.
    Gaussian { mean: f64, prec: f64 },
}

/// Map from internal to user scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// Precision `exp(θ)`.
    Log,
    /// Correlation `2·logistic(θ) − 1`.
    LogitRho,
}

impl Transform {
    pub fn to_user(self, theta: f64) -> f64 {
        match self {
            Transform::Log => theta.exp(),
            Transform::LogitRho => 2.0 / (1.0 + (-theta).exp()) - 1.0,
        }
    }

    pub fn to_internal(self, value: f64) -> f64 {
        match self {
            Transform::Log => value.ln(),
            Transform::LogitRho => {
                let p = (value + 1.0) / 2.0;
                (p / (1.0 - p)).ln()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParam {
    pub name: String,
    pub transform: Transform,
    pub prior: HyperPrior,
    /// Starting internal value for optimisation.
    pub initial: f64,
}

pub const DEFAULT_PREC_SHAPE: f64 = 1.0;
pub const DEFAULT_PREC_RATE: f64 = 5e-5;

impl HyperParam {
    pub fn precision(name: impl Into<String>) -> Self {
        HyperParam {
            name: name.into(),
            transform: Transform::Log,
            prior: HyperPrior::LogGamma { shape: DEFAULT_PREC_SHAPE, rate: DEFAULT_PREC_RATE },
            initial: 4.0,
        }
    }

    pub fn rho(name: impl Into<String>) -> Self {
        HyperParam {
            name: name.into(),
            transform: Transform::LogitRho,
            prior: HyperPrior::Gaussian { mean: 0.0, prec: 0.15 },
            initial: 0.0,
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self.prior, HyperPrior::Fixed(_))
    }

    /// Internal value: the fixed value, else the entry in `theta`.
    pub fn value(&self, theta: &BTreeMap<String, f64>) -> Result<f64> {
        match self.prior {
            HyperPrior::Fixed(v) => Ok(v),
            _ => theta.get(&self.name).copied().ok_or_else(|| Error::MissingHyper(self.name.clone())),
        }
    }

    /// Log prior density on the internal scale, including the Jacobian of
    /// the transform for the log-gamma case.
    pub fn log_prior(&self, theta: f64) -> f64 {
        match self.prior {
            HyperPrior::Fixed(_) => 0.0,
            HyperPrior::LogGamma { shape, rate } => {
                shape * rate.ln() - statrs::function::gamma::ln_gamma(shape) + shape * theta - rate * theta.exp()
            }
            HyperPrior::Gaussian { mean, prec } => 0.5 * prec.ln() - LN_SQRT_2PI - 0.5 * prec * (theta - mean).powi(2),
        }
    }
}

/// Sum of log priors over the non-fixed hyperparameters present in `theta`.
pub fn log_prior_theta<'a>(hypers: impl IntoIterator<Item = &'a HyperParam>, theta: &BTreeMap<String, f64>) -> Result<f64> {
    let mut total = 0.0;
    for h in hypers {
        if !h.is_fixed() {
            total += h.log_prior(h.value(theta)?);
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub enum LatentModel {
    /// Single coefficient multiplying a constant one.
    Constant,
    /// Single coefficient multiplying a covariate.
    Linear,
    Iid,
    Ar1,
    Rw1,
    Besag(Graph),
    /// `u` (besag, first `n`) stacked with `v` (iid, next `n`).
    Bym(Graph),
}

impl LatentModel {
    pub fn name(&self) -> &'static str {
        match self {
            LatentModel::Constant => "constant",
            LatentModel::Linear => "linear",
            LatentModel::Iid => "iid",
            LatentModel::Ar1 => "ar1",
            LatentModel::Rw1 => "rw1",
            LatentModel::Besag(_) => "besag",
            LatentModel::Bym(_) => "bym",
        }
    }

    pub fn is_intrinsic(&self) -> bool {
        matches!(self, LatentModel::Rw1 | LatentModel::Besag(_) | LatentModel::Bym(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupModel {
    Iid,
    Ar1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    pub n: usize,
    pub model: GroupModel,
    /// Correlation hyperparameter for `Ar1` groups.
    pub rho: Option<HyperParam>,
}

/// Prior structure of one model component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSpec {
    pub name: String,
    pub model: LatentModel,
    /// Size of the main (per-group) latent block; 1 for constant/linear,
    /// the graph size for besag, `n` nodes (so `2n` latents) for bym.
    pub n: usize,
    pub hypers: Vec<HyperParam>,
    /// Prior mean and precision for constant/linear coefficients.
    pub mean_linear: f64,
    pub prec_linear: f64,
    pub group: Option<GroupSpec>,
}

impl ComponentSpec {
    /// A component with the model's default hyperparameters.
    pub fn new(name: impl Into<String>, model: LatentModel, n: usize) -> Self {
        let name = name.into();
        let hypers = match &model {
            LatentModel::Constant | LatentModel::Linear => vec![],
            LatentModel::Iid | LatentModel::Rw1 | LatentModel::Besag(_) => vec![HyperParam::precision(format!("{name}.prec"))],
            LatentModel::Ar1 => vec![HyperParam::precision(format!("{name}.prec")), HyperParam::rho(format!("{name}.rho"))],
            LatentModel::Bym(_) => {
                vec![HyperParam::precision(format!("{name}.prec_u")), HyperParam::precision(format!("{name}.prec_v"))]
            }
        };
        let n = match &model {
            LatentModel::Constant | LatentModel::Linear => 1,
            LatentModel::Besag(g) | LatentModel::Bym(g) => g.n(),
            _ => n,
        };
        ComponentSpec { name, model, n, hypers, mean_linear: 0.0, prec_linear: 0.001, group: None }
    }

    /// Latent variables per group level.
    pub fn main_size(&self) -> usize {
        match self.model {
            LatentModel::Bym(_) => 2 * self.n,
            _ => self.n,
        }
    }

    pub fn n_group(&self) -> usize {
        self.group.as_ref().map_or(1, |g| g.n)
    }

    /// Total latent dimension.
    pub fn dim(&self) -> usize {
        self.main_size() * self.n_group()
    }

    /// Every hyperparameter, group ones last.
    pub fn all_hypers(&self) -> Vec<&HyperParam> {
        let mut out: Vec<&HyperParam> = self.hypers.iter().collect();
        out.extend(self.group.as_ref().and_then(|g| g.rho.as_ref()));
        out
    }

    fn hyper(&self, suffix: &str, theta: &BTreeMap<String, f64>) -> Result<f64> {
        let name = format!("{}.{suffix}", self.name);
        let h = self.hypers.iter().find(|h| h.name == name).ok_or_else(|| Error::MissingHyper(name.clone()))?;
        Ok(h.transform.to_user(h.value(theta)?))
    }

    pub fn prior_mean(&self) -> Vec<f64> {
        match self.model {
            LatentModel::Constant | LatentModel::Linear => vec![self.mean_linear; self.dim()],
            _ => vec![0.0; self.dim()],
        }
    }
}

fn ar1_structure(n: usize, rho: f64) -> SparseSym {
    // precision of a unit-marginal-variance AR1
    let s = 1.0 / (1.0 - rho * rho);
    let mut t = Vec::with_capacity(2 * n);
    for i in 0..n {
        let d = if n == 1 || i == 0 || i + 1 == n { 1.0 } else { 1.0 + rho * rho };
        t.push((i, i, s * if n == 1 { 1.0 - rho * rho } else { d }));
        if i + 1 < n {
            t.push((i, i + 1, -s * rho));
        }
    }
    SparseSym::from_triplets(n, &t).expect("valid ar1 pattern")
}

fn rw1_structure(n: usize) -> SparseSym {
    let mut t = Vec::with_capacity(2 * n);
    for i in 0..n {
        t.push((i, i, 0.0));
        if i + 1 < n {
            t.push((i, i, 1.0));
            t.push((i + 1, i + 1, 1.0));
            t.push((i, i + 1, -1.0));
        }
    }
    SparseSym::from_triplets(n, &t).expect("valid rw1 pattern")
}

/// Prior precision `Q(θ)` of a component, without constraint jitter.
pub fn build_precision(c: &ComponentSpec, theta: &BTreeMap<String, f64>) -> Result<SparseSym> {
    let main = match &c.model {
        LatentModel::Constant | LatentModel::Linear => SparseSym::diagonal(&[c.prec_linear]),
        LatentModel::Iid => SparseSym::identity(c.n).scale(c.hyper("prec", theta)?),
        LatentModel::Ar1 => ar1_structure(c.n, c.hyper("rho", theta)?).scale(c.hyper("prec", theta)?),
        LatentModel::Rw1 => rw1_structure(c.n).scale(c.hyper("prec", theta)?),
        LatentModel::Besag(g) => g.icar_structure().scale(c.hyper("prec", theta)?),
        LatentModel::Bym(g) => SparseSym::block_diag(&[
            g.icar_structure().scale(c.hyper("prec_u", theta)?),
            SparseSym::identity(g.n()).scale(c.hyper("prec_v", theta)?),
        ]),
    };
    match &c.group {
        None => Ok(main),
        Some(g) => {
            let gq = match g.model {
                GroupModel::Iid => SparseSym::identity(g.n),
                GroupModel::Ar1 => {
                    let h = g.rho.as_ref().ok_or_else(|| Error::MissingHyper(format!("{}.group_rho", c.name)))?;
                    ar1_structure(g.n, h.transform.to_user(h.value(theta)?))
                }
            };
            Ok(SparseSym::kron(&gq, &main))
        }
    }
}

/// A sum-to-zero constraint over component-local latent indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SumToZero(pub Vec<usize>);

/// For intrinsic models: adds the factorisation jitter `1e-8·mean(diag)`
/// and returns one sum-to-zero constraint per connected component (and per
/// group level). Other models pass through unconstrained.
pub fn constrain_intrinsic(c: &ComponentSpec, q: &SparseSym) -> (SparseSym, Vec<SumToZero>) {
    let parts: Vec<Vec<usize>> = match &c.model {
        LatentModel::Rw1 => vec![(0..c.n).collect()],
        LatentModel::Besag(g) | LatentModel::Bym(g) => g.connected_components(),
        _ => return (q.clone(), vec![]),
    };
    let d = q.diag();
    let jitter = 1e-8 * d.iter().sum::<f64>() / d.len() as f64;
    let q = q.add_diagonal(&vec![jitter; q.n()]).expect("matching dimension");
    let main = c.main_size();
    let mut cons = Vec::new();
    for g in 0..c.n_group() {
        for p in &parts {
            cons.push(SumToZero(p.iter().map(|&i| g * main + i).collect()));
        }
    }
    (q, cons)
}
