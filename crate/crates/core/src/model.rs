//! Model configuration (JSON), tabular data, and the compiled model used by
//! inference: latent layout, prior precision, and per-likelihood predictor
//! evaluation with Jacobians.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{detect_linear, eval_expr, expr_jacobian, parse_expr, Expr, PredictorExpr};
use crate::latent::{
    build_precision, constrain_intrinsic, ComponentSpec, Graph, GroupModel, GroupSpec, HyperParam, HyperPrior,
    LatentModel,
};
use crate::likelihood::Family;
use crate::mappers::{FactorMapping, MarginalDist, Mapper, MapperInput};
use crate::sparse::{SparseMatrix, SparseSym};

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub components: Vec<ComponentConfig>,
    pub likelihoods: Vec<LikelihoodConfig>,
    #[serde(default)]
    pub options: Options,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub name: String,
    pub model: String,
    #[serde(default)]
    pub input: InputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyper: Option<BTreeMap<String, HyperConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<GroupConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marginal: Option<MarginalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_linear: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prec_linear: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor_mapping: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_column: Option<String>,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig { kind: "const".into(), column: None, weights_column: None, block_column: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum PriorConfig {
    Loggamma { shape: f64, rate: f64 },
    Normal { mean: f64, prec: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupConfig {
    pub column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default = "default_group_model")]
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyper: Option<BTreeMap<String, HyperConfig>>,
}

fn default_group_model() -> String {
    "iid".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalConfig {
    pub family: String,
    pub rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LikelihoodConfig {
    pub family: String,
    pub response: String,
    pub formula: String,
    pub data: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_data: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyper: Option<BTreeMap<String, HyperConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<AggregateConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateConfig {
    pub mapper: String,
    pub weights_column: String,
    pub block_column: String,
    #[serde(default)]
    pub rescale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Options {
    #[serde(default = "default_max_iter")]
    pub bru_max_iter: usize,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub bru_initial: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub bru_verbose: u8,
    #[serde(default)]
    pub seed: u64,
    /// Run the iterative loop even when every predictor is linear.
    #[serde(default)]
    pub bru_force_iterative: bool,
}

fn default_max_iter() -> usize {
    10
}
fn default_rel_tol() -> f64 {
    0.1
}
fn default_gamma() -> f64 {
    2.0
}

impl Default for Options {
    fn default() -> Self {
        Options {
            bru_max_iter: 10,
            rel_tol: 0.1,
            gamma: 2.0,
            bru_initial: BTreeMap::new(),
            bru_verbose: 0,
            seed: 0,
            bru_force_iterative: false,
        }
    }
}

impl ModelSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = json_pointer(&e.path().to_string());
            Error::schema(pointer, e.into_inner().to_string())
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

// "components[0].model" -> "/components/0/model"
fn json_pointer(path: &str) -> String {
    if path == "." {
        return "/".into();
    }
    let mut out = String::new();
    for part in path.split('.') {
        for piece in part.split('[') {
            let piece = piece.trim_end_matches(']');
            if !piece.is_empty() {
                out.push('/');
                out.push_str(piece);
            }
        }
    }
    if out.is_empty() {
        "/".into()
    } else {
        out
    }
}

// ---------------------------------------------------------------------------
// data

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Int(Vec<i64>),
    Float(Vec<f64>),
    Str(Vec<String>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Int(v) => v.len(),
            Column::Float(v) => v.len(),
            Column::Str(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rectangular table of named columns.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataTable {
    names: Vec<String>,
    columns: BTreeMap<String, Column>,
    rows: usize,
}

impl DataTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn push(&mut self, name: impl Into<String>, col: Column) -> Result<()> {
        let name = name.into();
        if !self.names.is_empty() && col.len() != self.rows {
            return Err(Error::Data(format!("column {name:?} has {} rows, expected {}", col.len(), self.rows)));
        }
        if self.columns.contains_key(&name) {
            return Err(Error::Data(format!("duplicate column {name:?}")));
        }
        self.rows = col.len();
        self.names.push(name.clone());
        self.columns.insert(name, col);
        Ok(())
    }

    pub fn with(mut self, name: &str, col: Column) -> Self {
        self.push(name, col).expect("consistent table");
        self
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.columns.get(name).ok_or_else(|| Error::Data(format!("missing column {name:?}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.columns.contains_key(name)
    }

    pub fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        match self.column(name)? {
            Column::Int(v) => Ok(v.iter().map(|&x| x as f64).collect()),
            Column::Float(v) => Ok(v.clone()),
            Column::Str(_) => Err(Error::Data(format!("column {name:?} is not numeric"))),
        }
    }

    /// 1-based indices.
    pub fn index(&self, name: &str) -> Result<Vec<usize>> {
        let bad = |x: String| Error::Data(format!("column {name:?}: {x} is not a positive integer index"));
        match self.column(name)? {
            Column::Int(v) => v.iter().map(|&x| if x >= 1 { Ok(x as usize) } else { Err(bad(x.to_string())) }).collect(),
            Column::Float(v) => v
                .iter()
                .map(|&x| if x >= 1.0 && x.fract() == 0.0 { Ok(x as usize) } else { Err(bad(x.to_string())) })
                .collect(),
            Column::Str(_) => Err(bad("string".into())),
        }
    }

    pub fn strings(&self, name: &str) -> Result<Vec<String>> {
        Ok(match self.column(name)? {
            Column::Int(v) => v.iter().map(|x| x.to_string()).collect(),
            Column::Float(v) => v.iter().map(|x| x.to_string()).collect(),
            Column::Str(v) => v.clone(),
        })
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut raw: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
        for rec in rdr.records() {
            let rec = rec?;
            for (k, field) in rec.iter().enumerate() {
                raw[k].push(field.to_string());
            }
        }
        let mut table = DataTable::new();
        for (name, vals) in headers.into_iter().zip(raw) {
            let col = if let Ok(v) = vals.iter().map(|s| s.parse::<i64>()).collect::<std::result::Result<Vec<_>, _>>() {
                Column::Int(v)
            } else if let Ok(v) = vals.iter().map(|s| s.parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>() {
                Column::Float(v)
            } else {
                Column::Str(vals)
            };
            table.push(name, col)?;
        }
        Ok(table)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_csv_reader(f)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = self.names.join(",");
        out.push('\n');
        for i in 0..self.rows {
            let cells: Vec<String> = self
                .names
                .iter()
                .map(|n| match &self.columns[n] {
                    Column::Int(v) => v[i].to_string(),
                    Column::Float(v) => format!("{:?}", v[i]),
                    Column::Str(v) => v[i].clone(),
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// compiled model

/// A latent component placed in the full latent vector.
#[derive(Debug, Clone)]
pub struct Component {
    pub spec: ComponentSpec,
    pub config: ComponentConfig,
    pub offset: usize,
    /// Factor levels when the input is a factor column.
    pub levels: Vec<String>,
}

impl Component {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.spec.dim()
    }

    /// Mapper and input for evaluating this component over `table`.
    pub fn mapper_for(&self, table: &DataTable) -> Result<(Mapper, MapperInput)> {
        let rows = table.rows();
        let inp = &self.config.input;
        let col = |what: &str| -> Result<&str> {
            inp.column.as_deref().ok_or_else(|| Error::schema(format!("/components/{}/input/column", self.config.name), format!("{what} input needs a column")))
        };
        let n = self.spec.n;
        let (base, input) = match &self.spec.model {
            LatentModel::Constant => (Mapper::Linear, MapperInput::Ones(rows)),
            LatentModel::Linear => match inp.kind.as_str() {
                "const" => (Mapper::Linear, MapperInput::Ones(rows)),
                _ => (Mapper::Linear, MapperInput::Numeric(table.numeric(col("linear")?)?)),
            },
            LatentModel::Bym(_) => {
                let idx = match inp.kind.as_str() {
                    "const" => vec![1; rows],
                    _ => table.index(col("bym")?)?,
                };
                let collect = Mapper::Collect {
                    mappers: vec![("u".into(), Mapper::Index(n)), ("v".into(), Mapper::Index(n))],
                    hidden: false,
                };
                let block: Vec<usize> = (1..=rows).chain(1..=rows).collect();
                let input = MapperInput::List(vec![
                    MapperInput::List(vec![MapperInput::Index(idx.clone()), MapperInput::Index(idx)]),
                    MapperInput::Blocks { block, weights: vec![1.0; 2 * rows] },
                ]);
                (Mapper::Pipe(vec![collect, Mapper::Aggregate { rescale: false, n_block: rows }]), input)
            }
            _ => match inp.kind.as_str() {
                "const" => (Mapper::Index(n), MapperInput::Ones(rows)),
                "column" | "index_column" => (Mapper::Index(n), MapperInput::Index(table.index(col("index")?)?)),
                "factor_column" => {
                    let mapping = match self.config.factor_mapping.as_deref() {
                        Some("contrast") => FactorMapping::Contrast,
                        _ => FactorMapping::Full,
                    };
                    (
                        Mapper::Factor { levels: self.levels.clone(), mapping },
                        MapperInput::Factor(table.strings(col("factor")?)?),
                    )
                }
                "blocks" => {
                    let b = inp.block_column.as_deref().or(inp.column.as_deref()).ok_or_else(|| {
                        Error::schema(format!("/components/{}/input/block_column", self.config.name), "blocks input needs block_column")
                    })?;
                    let w = inp.weights_column.as_deref().ok_or_else(|| {
                        Error::schema(format!("/components/{}/input/weights_column", self.config.name), "blocks input needs weights_column")
                    })?;
                    (
                        Mapper::Scale(Some(Box::new(Mapper::Index(n)))),
                        MapperInput::List(vec![MapperInput::Index(table.index(b)?), MapperInput::Numeric(table.numeric(w)?)]),
                    )
                }
                other => return Err(Error::schema(format!("/components/{}/input/kind", self.config.name), format!("unknown input kind {other:?}"))),
            },
        };
        let (mapper, input) = match (&self.spec.group, &self.config.group) {
            (Some(g), Some(gc)) => (
                Mapper::Multi(vec![("main".into(), base), ("group".into(), Mapper::Index(g.n))]),
                MapperInput::List(vec![input, MapperInput::Index(table.index(&gc.column)?)]),
            ),
            _ => (base, input),
        };
        Ok(match &self.config.marginal {
            Some(m) => (Mapper::Marginal { dist: marginal_dist(m, &self.config.name)?, inner: Some(Box::new(mapper)) }, input),
            None => (mapper, input),
        })
    }
}

/// Resolves a formula leaf: a component name, `<name>_latent` for the raw
/// latent block, or a printed `<name>_eval(...)` call.
pub fn leaf_mapper(components: &[Component], leaf: &str, table: &DataTable) -> Result<(usize, Mapper, MapperInput)> {
    let find = |name: &str| {
        components.iter().position(|c| c.spec.name == name).ok_or_else(|| Error::UnknownComponent(name.to_string()))
    };
    if let Ok(ci) = find(leaf) {
        let (m, input) = components[ci].mapper_for(table)?;
        return Ok((ci, m, input));
    }
    if let Some(name) = leaf.strip_suffix("_latent") {
        let ci = find(name)?;
        let d = components[ci].spec.dim();
        return Ok((ci, Mapper::Index(d), MapperInput::Index((1..=d).collect())));
    }
    if leaf.contains("_eval(") {
        if let Ok(PredictorExpr { body: Expr::EvalCall { component, args }, .. }) = parse_expr(leaf) {
            let ci = find(&component)?;
            let c = &components[ci];
            if c.spec.group.is_some() {
                return Err(Error::Eval { row: 0, msg: format!("{component}_eval is not available for grouped components") });
            }
            let col = if args.iter().all(|a| a.fract() == 0.0) {
                Column::Int(args.iter().map(|&a| a as i64).collect())
            } else {
                Column::Float(args.clone())
            };
            let mut t = DataTable::new();
            let cols: BTreeSet<&str> = [c.config.input.column.as_deref(), c.config.input.block_column.as_deref()].into_iter().flatten().collect();
            if cols.is_empty() {
                t.push("_", col)?;
            } else {
                for name in cols {
                    t.push(name, col.clone())?;
                }
            }
            if let Some(w) = c.config.input.weights_column.as_deref() {
                t.push(w, Column::Float(vec![1.0; args.len()]))?;
            }
            let (m, input) = c.mapper_for(&t)?;
            return Ok((ci, m, input));
        }
    }
    Err(Error::UnknownComponent(leaf.to_string()))
}

fn marginal_dist(m: &MarginalConfig, comp: &str) -> Result<MarginalDist> {
    let ptr = format!("/components/{comp}/marginal");
    if !(m.rate > 0.0) {
        return Err(Error::schema(ptr, "rate must be positive"));
    }
    match m.family.as_str() {
        "exponential" => Ok(MarginalDist::Exponential { rate: m.rate }),
        "gamma" => match m.shape {
            Some(shape) if shape > 0.0 => Ok(MarginalDist::Gamma { shape, rate: m.rate }),
            _ => Err(Error::schema(ptr, "gamma marginal needs a positive shape")),
        },
        other => Err(Error::schema(ptr, format!("unknown marginal family {other:?}"))),
    }
}

/// One observation model with its formula and evaluation plumbing.
#[derive(Debug, Clone)]
pub struct Likelihood {
    pub name: String,
    pub family: Family,
    pub y: Vec<f64>,
    pub formula: Expr,
    /// Predictor rows before aggregation.
    pub rows: usize,
    /// Component name → (index in `Model::components`, mapper, input).
    pub mappers: BTreeMap<String, (usize, Mapper, MapperInput)>,
    pub aggregate: Option<(Mapper, MapperInput)>,
    pub prec: Option<HyperParam>,
    pub linear: bool,
    pub table: DataTable,
}

impl Likelihood {
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn effects(&self, model: &Model, u: &[f64]) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for (name, (k, m, input)) in &self.mappers {
            out.insert(name.clone(), m.ibm_eval(input, &u[model.components[*k].range()])?);
        }
        Ok(out)
    }

    /// Non-linear predictor `η̃(u)` on the response scale rows.
    pub fn eta(&self, model: &Model, u: &[f64]) -> Result<Vec<f64>> {
        let eff = self.effects(model, u)?;
        let eta = eval_expr(&self.formula, &eff, self.rows)?;
        match &self.aggregate {
            Some((m, input)) => m.ibm_eval(input, &eta),
            None => Ok(eta),
        }
    }

    /// `η̃(u)` and its Jacobian with respect to the full latent vector.
    pub fn eta_jacobian(&self, model: &Model, u: &[f64]) -> Result<(Vec<f64>, SparseMatrix)> {
        let eff = self.effects(model, u)?;
        let eta_rows = eval_expr(&self.formula, &eff, self.rows)?;
        let mut comp_jac = BTreeMap::new();
        for (name, (k, m, input)) in &self.mappers {
            comp_jac.insert(name.clone(), m.ibm_jacobian(input, &u[model.components[*k].range()])?);
        }
        let per = expr_jacobian(&self.formula, &eff, &comp_jac, self.rows)?;
        let blocks: Vec<SparseMatrix> = model
            .components
            .iter()
            .map(|c| per.get(&c.spec.name).cloned().unwrap_or_else(|| SparseMatrix::zeros(self.rows, c.spec.dim())))
            .collect();
        let b = SparseMatrix::hstack(&blocks)?;
        match &self.aggregate {
            Some((m, input)) => {
                let j = m.ibm_jacobian(input, &eta_rows)?;
                Ok((m.ibm_eval(input, &eta_rows)?, j.matmul(&b)?))
            }
            None => Ok((eta_rows, b)),
        }
    }

    /// Gaussian observation precision on the user scale.
    pub fn obs_precision(&self, theta: &BTreeMap<String, f64>) -> Result<f64> {
        match &self.prec {
            Some(h) => Ok(h.transform.to_user(h.value(theta)?)),
            None => Ok(1.0),
        }
    }
}

/// A validated, data-bound model.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub base_dir: PathBuf,
    pub components: Vec<Component>,
    pub likelihoods: Vec<Likelihood>,
}

/// Sum-to-zero constraints over global latent indices.
pub type Constraints = Vec<Vec<usize>>;

pub fn load_model(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path)?;
    let spec = ModelSpec::from_json_str(&text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Model::compile(spec, &base)
}

fn apply_hyper(h: &mut HyperParam, cfg: &HyperConfig) {
    if let Some(init) = cfg.initial {
        h.initial = init;
    }
    if let Some(p) = &cfg.prior {
        h.prior = match *p {
            PriorConfig::Loggamma { shape, rate } => HyperPrior::LogGamma { shape, rate },
            PriorConfig::Normal { mean, prec } => HyperPrior::Gaussian { mean, prec },
        };
    }
    if cfg.fixed == Some(true) {
        h.prior = HyperPrior::Fixed(h.initial);
    }
}

fn apply_hypers(hypers: &mut [HyperParam], prefix: &str, cfg: &Option<BTreeMap<String, HyperConfig>>, ptr: &str) -> Result<()> {
    for (key, hc) in cfg.iter().flatten() {
        let full = format!("{prefix}.{key}");
        let h = hypers
            .iter_mut()
            .find(|h| h.name == full)
            .ok_or_else(|| Error::schema(format!("{ptr}/hyper/{key}"), format!("unknown hyperparameter {key:?}")))?;
        apply_hyper(h, hc);
    }
    Ok(())
}

impl Model {
    pub fn compile(spec: ModelSpec, base_dir: &Path) -> Result<Model> {
        if spec.components.is_empty() {
            return Err(Error::schema("/components", "at least one component is required"));
        }
        if spec.likelihoods.is_empty() {
            return Err(Error::schema("/likelihoods", "at least one likelihood is required"));
        }
        let resolve = |p: &str| base_dir.join(p);
        let mut tables: BTreeMap<String, DataTable> = BTreeMap::new();
        for (k, l) in spec.likelihoods.iter().enumerate() {
            for path in std::iter::once(&l.data).chain(l.response_data.as_ref()) {
                if !tables.contains_key(path) {
                    let t = DataTable::from_csv_path(&resolve(path))
                        .map_err(|e| Error::schema(format!("/likelihoods/{k}/data"), e.to_string()))?;
                    tables.insert(path.clone(), t);
                }
            }
        }

        let mut names = BTreeSet::new();
        let mut components = Vec::with_capacity(spec.components.len());
        let mut offset = 0;
        for (k, c) in spec.components.iter().enumerate() {
            let ptr = format!("/components/{k}");
            if !names.insert(c.name.clone()) {
                return Err(Error::schema(format!("{ptr}/name"), format!("duplicate component {:?}", c.name)));
            }
            if c.name.is_empty() || !c.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_') {
                return Err(Error::schema(format!("{ptr}/name"), format!("invalid component name {:?}", c.name)));
            }
            let graph = || -> Result<Graph> {
                let g = c.graph.as_ref().ok_or_else(|| Error::schema(format!("{ptr}/graph"), format!("{} model needs a graph", c.model)))?;
                Graph::from_file(&resolve(g)).map_err(|e| Error::schema(format!("{ptr}/graph"), e.to_string()))
            };
            let model = match c.model.as_str() {
                "constant" => LatentModel::Constant,
                "linear" => LatentModel::Linear,
                "iid" => LatentModel::Iid,
                "ar1" => LatentModel::Ar1,
                "rw1" => LatentModel::Rw1,
                "besag" => LatentModel::Besag(graph()?),
                "bym" => LatentModel::Bym(graph()?),
                other => return Err(Error::schema(format!("{ptr}/model"), format!("unknown model {other:?}"))),
            };
            let uses = |col: &str| -> Vec<&DataTable> {
                spec.likelihoods.iter().filter_map(|l| tables.get(&l.data)).filter(|t| t.has(col)).collect()
            };
            let mut levels = Vec::new();
            if c.input.kind == "factor_column" {
                let col = c.input.column.as_deref().ok_or_else(|| Error::schema(format!("{ptr}/input/column"), "factor input needs a column"))?;
                let mut ints = BTreeSet::new();
                let mut strs = BTreeSet::new();
                for t in uses(col) {
                    match t.column(col)? {
                        Column::Int(v) => ints.extend(v.iter().copied()),
                        _ => strs.extend(t.strings(col)?),
                    }
                }
                levels = if strs.is_empty() { ints.iter().map(|v| v.to_string()).collect() } else {
                    strs.extend(ints.iter().map(|v| v.to_string()));
                    strs.into_iter().collect()
                };
            }
            let n = match (&model, c.n) {
                (LatentModel::Iid | LatentModel::Ar1 | LatentModel::Rw1, Some(n)) => n,
                (LatentModel::Iid | LatentModel::Ar1 | LatentModel::Rw1, None) => match c.input.kind.as_str() {
                    "const" => 1,
                    "factor_column" => match c.factor_mapping.as_deref() {
                        Some("contrast") => levels.len().saturating_sub(1),
                        _ => levels.len(),
                    },
                    _ => {
                        let col = c.input.block_column.as_deref().filter(|_| c.input.kind == "blocks").or(c.input.column.as_deref());
                        let col = col.ok_or_else(|| Error::schema(format!("{ptr}/input/column"), "input needs a column"))?;
                        let mut max = 0;
                        for t in uses(col) {
                            max = max.max(t.index(col)?.into_iter().max().unwrap_or(0));
                        }
                        if max == 0 {
                            return Err(Error::schema(format!("{ptr}/n"), "cannot infer size; give \"n\""));
                        }
                        max
                    }
                },
                _ => 0,
            };
            if n == 0 && matches!(model, LatentModel::Iid | LatentModel::Ar1 | LatentModel::Rw1) {
                return Err(Error::schema(format!("{ptr}/n"), "size must be positive"));
            }
            let mut cs = ComponentSpec::new(c.name.clone(), model, n);
            if let Some(m) = c.mean_linear {
                cs.mean_linear = m;
            }
            if let Some(p) = c.prec_linear {
                if !(p > 0.0) || !p.is_finite() {
                    return Err(Error::schema(format!("{ptr}/prec_linear"), "precision must be positive and finite"));
                }
                cs.prec_linear = p;
            }
            apply_hypers(&mut cs.hypers, &c.name, &c.hyper, &ptr)?;
            if let Some(g) = &c.group {
                if matches!(cs.model, LatentModel::Bym(_)) {
                    return Err(Error::schema(format!("{ptr}/group"), "grouping is not supported for bym"));
                }
                let gn = match g.n {
                    Some(n) => n,
                    None => {
                        let mut max = 0;
                        for t in uses(&g.column) {
                            max = max.max(t.index(&g.column)?.into_iter().max().unwrap_or(0));
                        }
                        max
                    }
                };
                if gn == 0 {
                    return Err(Error::schema(format!("{ptr}/group/n"), "cannot infer group size"));
                }
                let (gm, rho) = match g.model.as_str() {
                    "iid" => (GroupModel::Iid, None),
                    "ar1" => (GroupModel::Ar1, Some(HyperParam::rho(format!("{}.group_rho", c.name)))),
                    other => return Err(Error::schema(format!("{ptr}/group/model"), format!("unknown group model {other:?}"))),
                };
                let mut rho: Vec<HyperParam> = rho.into_iter().collect();
                let renamed = g.hyper.as_ref().map(|m| m.iter().map(|(k, v)| (format!("group_{k}"), v.clone())).collect());
                apply_hypers(&mut rho, &c.name, &renamed, &format!("{ptr}/group"))?;
                cs.group = Some(GroupSpec { n: gn, model: gm, rho: rho.pop() });
            }
            let comp = Component { spec: cs, config: c.clone(), offset, levels };
            offset += comp.spec.dim();
            components.push(comp);
        }

        let all_names: Vec<String> = components.iter().map(|c| c.spec.name.clone()).collect();
        let mut likelihoods = Vec::with_capacity(spec.likelihoods.len());
        for (k, l) in spec.likelihoods.iter().enumerate() {
            let ptr = format!("/likelihoods/{k}");
            let name = format!("lik{}", k + 1);
            let family = Family::parse(&l.family).ok_or_else(|| Error::schema(format!("{ptr}/family"), format!("unknown family {:?}", l.family)))?;
            let parsed = parse_expr(&l.formula).map_err(|e| Error::schema(format!("{ptr}/formula"), e.to_string()))?;
            let formula = if parsed.body.contains_dot() { parsed.body.expand_dot(&all_names) } else { parsed.body.clone() };
            let table = tables[&l.data].clone();
            let rtable = l.response_data.as_ref().map_or(&table, |p| &tables[p]);
            let y = rtable.numeric(&l.response).map_err(|e| Error::schema(format!("{ptr}/response"), e.to_string()))?;
            family.check_response(&y).map_err(|e| Error::schema(format!("{ptr}/response"), e.to_string()))?;
            let mut mappers = BTreeMap::new();
            for leaf in formula.leaves() {
                let entry = leaf_mapper(&components, &leaf, &table).map_err(|e| match e {
                    Error::Schema { .. } => e,
                    Error::UnknownComponent(c) => Error::schema(format!("{ptr}/formula"), format!("unknown component {c:?}")),
                    other => Error::schema(format!("{ptr}/data"), format!("component {leaf:?}: {other}")),
                })?;
                mappers.insert(leaf, entry);
            }
            let aggregate = match &l.aggregate {
                None => None,
                Some(a) => {
                    let aptr = format!("{ptr}/aggregate");
                    let block = table.index(&a.block_column).map_err(|e| Error::schema(format!("{aptr}/block_column"), e.to_string()))?;
                    let weights = table.numeric(&a.weights_column).map_err(|e| Error::schema(format!("{aptr}/weights_column"), e.to_string()))?;
                    let n_block = y.len();
                    let m = match a.mapper.as_str() {
                        "logsumexp" => Mapper::LogSumExp { rescale: a.rescale, n_block },
                        "aggregate" => Mapper::Aggregate { rescale: a.rescale, n_block },
                        other => return Err(Error::schema(format!("{aptr}/mapper"), format!("unknown aggregation mapper {other:?}"))),
                    };
                    let input = MapperInput::Blocks { block, weights };
                    // validate block indices and weights up front
                    m.ibm_jacobian(&input, &vec![0.0; table.rows()]).map_err(|e| Error::schema(aptr.clone(), e.to_string()))?;
                    Some((m, input))
                }
            };
            if aggregate.is_none() && y.len() != table.rows() {
                return Err(Error::schema(
                    format!("{ptr}/response_data"),
                    format!("response has {} rows but the predictor has {}; add an aggregate", y.len(), table.rows()),
                ));
            }
            let mut prec = family.has_precision().then(|| HyperParam::precision(format!("{name}.prec")));
            if let Some(p) = prec.as_mut() {
                apply_hypers(std::slice::from_mut(p), &name, &l.hyper, &ptr)?;
            } else if l.hyper.as_ref().is_some_and(|h| !h.is_empty()) {
                return Err(Error::schema(format!("{ptr}/hyper"), format!("{} likelihood has no hyperparameters", family.name())));
            }
            let linear = detect_linear(&PredictorExpr { response: None, body: formula.clone() })
                && mappers.values().all(|(_, m, _)| m.is_linear())
                && aggregate.as_ref().is_none_or(|(m, _)| m.is_linear());
            likelihoods.push(Likelihood {
                name,
                family,
                y,
                formula,
                rows: table.rows(),
                mappers,
                aggregate,
                prec,
                linear,
                table,
            });
        }

        let dim = offset;
        for (name, v) in &spec.options.bru_initial {
            let c = components.iter().find(|c| &c.spec.name == name).ok_or_else(|| {
                Error::schema(format!("/options/bru_initial/{name}"), format!("unknown component {name:?}"))
            })?;
            if v.len() != 1 && v.len() != c.spec.dim() {
                return Err(Error::schema(format!("/options/bru_initial/{name}"), format!("expected 1 or {} values", c.spec.dim())));
            }
        }
        let o = &spec.options;
        if !(o.gamma > 1.0) {
            return Err(Error::schema("/options/gamma", "gamma must exceed 1"));
        }
        if !(o.rel_tol > 0.0) {
            return Err(Error::schema("/options/rel_tol", "rel_tol must be positive"));
        }
        if o.bru_max_iter == 0 {
            return Err(Error::schema("/options/bru_max_iter", "bru_max_iter must be at least 1"));
        }
        let _ = dim;
        Ok(Model { spec, base_dir: base_dir.to_path_buf(), components, likelihoods })
    }

    pub fn dim(&self) -> usize {
        self.components.last().map_or(0, |c| c.offset + c.spec.dim())
    }

    pub fn component(&self, name: &str) -> Option<&Component> {
        self.components.iter().find(|c| c.spec.name == name)
    }

    pub fn options(&self) -> &Options {
        &self.spec.options
    }

    pub fn is_linear(&self) -> bool {
        self.likelihoods.iter().all(|l| l.linear)
    }

    /// All hyperparameters: components in order, then likelihoods.
    pub fn hypers(&self) -> Vec<&HyperParam> {
        let mut out: Vec<&HyperParam> = self.components.iter().flat_map(|c| c.spec.all_hypers()).collect();
        out.extend(self.likelihoods.iter().filter_map(|l| l.prec.as_ref()));
        out
    }

    /// Hyperparameters that make up θ.
    pub fn free_hypers(&self) -> Vec<&HyperParam> {
        self.hypers().into_iter().filter(|h| !h.is_fixed()).collect()
    }

    pub fn theta_names(&self) -> Vec<String> {
        self.free_hypers().iter().map(|h| h.name.clone()).collect()
    }

    pub fn theta_initial(&self) -> Vec<f64> {
        self.free_hypers().iter().map(|h| h.initial).collect()
    }

    pub fn theta_map(&self, theta: &[f64]) -> BTreeMap<String, f64> {
        self.theta_names().into_iter().zip(theta.iter().copied()).collect()
    }

    pub fn log_prior_theta(&self, theta: &[f64]) -> f64 {
        self.free_hypers().iter().zip(theta).map(|(h, &t)| h.log_prior(t)).sum()
    }

    pub fn prior_mean(&self) -> Vec<f64> {
        self.components.iter().flat_map(|c| c.spec.prior_mean()).collect()
    }

    /// Block-diagonal prior precision (with intrinsic jitter) and the
    /// global sum-to-zero constraints.
    pub fn prior_precision(&self, theta: &[f64]) -> Result<(SparseSym, Constraints)> {
        let tm = self.theta_map(theta);
        let mut blocks = Vec::with_capacity(self.components.len());
        let mut cons = Vec::new();
        for c in &self.components {
            let q = build_precision(&c.spec, &tm)?;
            let (q, sz) = constrain_intrinsic(&c.spec, &q);
            cons.extend(sz.into_iter().map(|s| s.0.into_iter().map(|i| i + c.offset).collect::<Vec<_>>()));
            blocks.push(q);
        }
        Ok((SparseSym::block_diag(&blocks), cons))
    }

    /// Starting linearisation point from `bru_initial` (zeros elsewhere).
    pub fn initial_state(&self) -> Vec<f64> {
        let mut u = vec![0.0; self.dim()];
        for (name, v) in &self.spec.options.bru_initial {
            if let Some(c) = self.component(name) {
                for (k, i) in c.range().enumerate() {
                    u[i] = if v.len() == 1 { v[0] } else { v[k] };
                }
            }
        }
        u
    }

    /// Splits a full latent vector into named component blocks.
    pub fn split<'a>(&self, u: &'a [f64]) -> BTreeMap<String, &'a [f64]> {
        self.components.iter().map(|c| (c.spec.name.clone(), &u[c.range()])).collect()
    }
}
