//! The mapper algebra: each [`Mapper`] turns an input and a latent state
//! vector into an effect vector, and reports its Jacobian with respect to
//! the state.
//!
//! Basic mappers (`Const`, `Linear`, `Index`, `Factor`) own latent
//! variables. Transformation mappers (`Scale`, `Marginal`, `LogSumExp`,
//! `Aggregate`) act on the output of an inner mapper, or directly on the
//! state when used as a later stage of a `Pipe`. Compound mappers (`Multi`,
//! `Pipe`, `Collect`) combine other mappers.
//!
//! Inputs for compound mappers are `MapperInput::List`s with one entry per
//! sub-mapper. `Scale(Some(inner))` takes `List[inner_input, Numeric(scale)]`.
//!
//! `Multi` lays out the combined latent vector column-major over
//! `(main, group, replicate, …)`, i.e. index `k0 + n0 * (k1 + n1 * k2)`.

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;
use crate::special::{gamma_log_pdf, gamma_quantile_pq, norm_cdf, norm_log_cdf, norm_log_pdf};

#[derive(Debug, Clone, PartialEq)]
pub enum MapperInput {
    /// Constant-one marker for the given number of rows.
    Ones(usize),
    Numeric(Vec<f64>),
    /// 1-based indices.
    Index(Vec<usize>),
    Factor(Vec<String>),
    /// 1-based block membership with per-row weights.
    Blocks { block: Vec<usize>, weights: Vec<f64> },
    List(Vec<MapperInput>),
}

impl MapperInput {
    pub fn rows(&self) -> usize {
        match self {
            MapperInput::Ones(n) => *n,
            MapperInput::Numeric(v) => v.len(),
            MapperInput::Index(v) => v.len(),
            MapperInput::Factor(v) => v.len(),
            MapperInput::Blocks { weights, .. } => weights.len(),
            MapperInput::List(l) => l.first().map_or(0, |i| i.rows()),
        }
    }

    fn list(&self, len: usize) -> Result<&[MapperInput]> {
        match self {
            MapperInput::List(l) if l.len() == len => Ok(l),
            MapperInput::List(l) => Err(Error::Mapper(format!("expected {len} sub-inputs, got {}", l.len()))),
            _ => Err(Error::Mapper("compound mapper needs a list input".into())),
        }
    }
}

/// Quantile families for the marginal transformation `F⁻¹(Φ(x))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarginalDist {
    Exponential { rate: f64 },
    Gamma { shape: f64, rate: f64 },
}

impl MarginalDist {
    pub fn transform(&self, x: f64) -> f64 {
        match *self {
            // −ln(1 − Φ(x)) / rate, with 1 − Φ(x) = Φ(−x)
            MarginalDist::Exponential { rate } => -norm_log_cdf(-x) / rate,
            MarginalDist::Gamma { shape, rate } => gamma_quantile_pq(norm_cdf(x), norm_cdf(-x), shape, rate),
        }
    }

    /// `d/dx F⁻¹(Φ(x)) = φ(x) / f(F⁻¹(Φ(x)))`
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            MarginalDist::Exponential { rate } => (norm_log_pdf(x) - norm_log_cdf(-x)).exp() / rate,
            MarginalDist::Gamma { shape, rate } => {
                let y = self.transform(x);
                (norm_log_pdf(x) - gamma_log_pdf(y, shape, rate)).exp()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorMapping {
    /// One latent per level.
    Full,
    /// First level is the reference and maps to a zero effect.
    Contrast,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mapper {
    Const,
    Linear,
    Index(usize),
    Factor { levels: Vec<String>, mapping: FactorMapping },
    Scale(Option<Box<Mapper>>),
    Marginal { dist: MarginalDist, inner: Option<Box<Mapper>> },
    LogSumExp { rescale: bool, n_block: usize },
    Aggregate { rescale: bool, n_block: usize },
    Multi(Vec<(String, Mapper)>),
    Pipe(Vec<Mapper>),
    Collect { mappers: Vec<(String, Mapper)>, hidden: bool },
}

impl Mapper {
    /// Number of latent (state) variables the mapper consumes for `input`.
    ///
    /// Basic mappers ignore the input; state-shaped transformations size
    /// themselves from it.
    pub fn ibm_n(&self, input: &MapperInput) -> usize {
        match self {
            Mapper::Const => 0,
            Mapper::Linear => 1,
            Mapper::Index(n) => *n,
            Mapper::Factor { levels, mapping } => match mapping {
                FactorMapping::Full => levels.len(),
                FactorMapping::Contrast => levels.len().saturating_sub(1),
            },
            Mapper::Scale(Some(inner)) => match input {
                MapperInput::List(l) if !l.is_empty() => inner.ibm_n(&l[0]),
                _ => 0,
            },
            Mapper::Scale(None) => input.rows(),
            Mapper::Marginal { inner: Some(inner), .. } => inner.ibm_n(input),
            Mapper::Marginal { inner: None, .. } => input.rows(),
            Mapper::LogSumExp { .. } | Mapper::Aggregate { .. } => input.rows(),
            Mapper::Multi(ms) => {
                let l = match input {
                    MapperInput::List(l) => l.as_slice(),
                    _ => &[],
                };
                ms.iter()
                    .enumerate()
                    .map(|(k, (_, m))| l.get(k).map_or_else(|| m.ibm_n(&MapperInput::Ones(0)), |i| m.ibm_n(i)))
                    .product()
            }
            Mapper::Pipe(ms) => match (ms.first(), input) {
                (Some(m), MapperInput::List(l)) if !l.is_empty() => m.ibm_n(&l[0]),
                _ => 0,
            },
            Mapper::Collect { mappers, .. } => {
                let l = match input {
                    MapperInput::List(l) => l.as_slice(),
                    _ => &[],
                };
                mappers
                    .iter()
                    .enumerate()
                    .map(|(k, (_, m))| l.get(k).map_or(0, |i| m.ibm_n(i)))
                    .sum()
            }
        }
    }

    /// Output dimension for `input`.
    pub fn ibm_n_output(&self, input: &MapperInput) -> usize {
        match self {
            Mapper::LogSumExp { n_block, .. } | Mapper::Aggregate { n_block, .. } => *n_block,
            Mapper::Scale(Some(_)) => match input {
                MapperInput::List(l) if l.len() == 2 => l[1].rows(),
                _ => 0,
            },
            Mapper::Marginal { inner: Some(inner), .. } => inner.ibm_n_output(input),
            Mapper::Pipe(ms) => match (ms.last(), input) {
                (Some(m), MapperInput::List(l)) if l.len() == ms.len() => m.ibm_n_output(&l[l.len() - 1]),
                _ => 0,
            },
            Mapper::Collect { mappers, hidden } => {
                let l = match input {
                    MapperInput::List(l) => l.as_slice(),
                    _ => &[],
                };
                let outs = mappers.iter().enumerate().map(|(k, (_, m))| l.get(k).map_or(0, |i| m.ibm_n_output(i)));
                if *hidden {
                    outs.take(1).sum()
                } else {
                    outs.sum()
                }
            }
            _ => input.rows(),
        }
    }

    /// True when the effect is affine in the state.
    pub fn is_linear(&self) -> bool {
        match self {
            Mapper::Const | Mapper::Linear | Mapper::Index(_) | Mapper::Factor { .. } | Mapper::Aggregate { .. } => true,
            Mapper::Scale(inner) => inner.as_ref().is_none_or(|m| m.is_linear()),
            Mapper::Marginal { .. } | Mapper::LogSumExp { .. } => false,
            Mapper::Multi(ms) | Mapper::Collect { mappers: ms, .. } => ms.iter().all(|(_, m)| m.is_linear()),
            Mapper::Pipe(ms) => ms.iter().all(Mapper::is_linear),
        }
    }

    /// Effect vector for `(input, state)`.
    pub fn ibm_eval(&self, input: &MapperInput, state: &[f64]) -> Result<Vec<f64>> {
        self.check_state(input, state)?;
        match self {
            Mapper::Const => match input {
                MapperInput::Ones(n) => Ok(vec![1.0; *n]),
                MapperInput::Numeric(v) => Ok(v.clone()),
                _ => Err(Error::Mapper("const mapper needs numeric input".into())),
            },
            Mapper::Linear | Mapper::Index(_) | Mapper::Factor { .. } | Mapper::Aggregate { .. } | Mapper::Multi(_) => {
                Ok(self.ibm_jacobian(input, state)?.mul_vec(state))
            }
            Mapper::Scale(inner) => {
                let (inner_eff, scale) = match inner {
                    Some(m) => {
                        let l = input.list(2)?;
                        (m.ibm_eval(&l[0], state)?, numeric(&l[1])?)
                    }
                    None => (state.to_vec(), numeric(input)?),
                };
                if scale.len() != inner_eff.len() {
                    return Err(Error::DimensionMismatch { expected: inner_eff.len(), got: scale.len() });
                }
                Ok(inner_eff.iter().zip(&scale).map(|(e, s)| e * s).collect())
            }
            Mapper::Marginal { dist, inner } => {
                let x = match inner {
                    Some(m) => m.ibm_eval(input, state)?,
                    None => state.to_vec(),
                };
                Ok(x.iter().map(|&v| dist.transform(v)).collect())
            }
            Mapper::LogSumExp { rescale, n_block } => {
                let (block, weights) = blocks(input, *n_block)?;
                check_weights(weights, true)?;
                let mut max = vec![f64::NEG_INFINITY; *n_block];
                for (i, &b) in block.iter().enumerate() {
                    if weights[i] > 0.0 {
                        max[b - 1] = max[b - 1].max(state[i]);
                    }
                }
                let mut sum = vec![0.0; *n_block];
                let mut wsum = vec![0.0; *n_block];
                for (i, &b) in block.iter().enumerate() {
                    if weights[i] > 0.0 {
                        sum[b - 1] += weights[i] * (state[i] - max[b - 1]).exp();
                    }
                    wsum[b - 1] += weights[i];
                }
                (0..*n_block)
                    .map(|b| {
                        if !(sum[b] > 0.0) {
                            return Err(Error::Mapper(format!("block {} has no positive weight", b + 1)));
                        }
                        let mut v = max[b] + sum[b].ln();
                        if *rescale {
                            v -= wsum[b].ln();
                        }
                        Ok(v)
                    })
                    .collect()
            }
            Mapper::Pipe(ms) => {
                let l = input.list(ms.len())?;
                let mut cur = state.to_vec();
                for (m, i) in ms.iter().zip(l) {
                    cur = m.ibm_eval(i, &cur)?;
                }
                Ok(cur)
            }
            Mapper::Collect { mappers, hidden } => {
                let l = input.list(mappers.len())?;
                let mut out = Vec::new();
                let mut off = 0;
                for (k, ((_, m), i)) in mappers.iter().zip(l).enumerate() {
                    let n = m.ibm_n(i);
                    let e = m.ibm_eval(i, &state[off..off + n])?;
                    off += n;
                    if !*hidden || k == 0 {
                        out.extend(e);
                    }
                }
                Ok(out)
            }
        }
    }

    /// Jacobian `∂ effect / ∂ state` at `state`, shape (output × ibm_n).
    pub fn ibm_jacobian(&self, input: &MapperInput, state: &[f64]) -> Result<SparseMatrix> {
        self.check_state(input, state)?;
        let n = self.ibm_n(input);
        match self {
            Mapper::Const => Ok(SparseMatrix::zeros(input.rows(), 0)),
            Mapper::Linear => match input {
                MapperInput::Ones(r) => Ok(SparseMatrix::column(&vec![1.0; *r])),
                MapperInput::Numeric(x) => Ok(SparseMatrix::column(x)),
                _ => Err(Error::Mapper("linear mapper needs numeric input".into())),
            },
            Mapper::Index(size) => {
                let idx = indices(input)?;
                let t = idx
                    .iter()
                    .enumerate()
                    .map(|(r, &i)| {
                        if i == 0 || i > *size {
                            Err(Error::Mapper(format!("index {i} outside 1..={size}")))
                        } else {
                            Ok((r, i - 1, 1.0))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                SparseMatrix::from_triplets(idx.len(), *size, &t)
            }
            Mapper::Factor { levels, mapping } => {
                let vals = match input {
                    MapperInput::Factor(v) => v,
                    _ => return Err(Error::Mapper("factor mapper needs factor input".into())),
                };
                let mut t = Vec::new();
                for (r, v) in vals.iter().enumerate() {
                    let k = levels.iter().position(|l| l == v).ok_or_else(|| Error::UnknownLevel(v.clone()))?;
                    match mapping {
                        FactorMapping::Full => t.push((r, k, 1.0)),
                        FactorMapping::Contrast if k > 0 => t.push((r, k - 1, 1.0)),
                        FactorMapping::Contrast => {}
                    }
                }
                SparseMatrix::from_triplets(vals.len(), n, &t)
            }
            Mapper::Scale(inner) => match inner {
                Some(m) => {
                    let l = input.list(2)?;
                    let j = m.ibm_jacobian(&l[0], state)?;
                    let s = numeric(&l[1])?;
                    if s.len() != j.nrows() {
                        return Err(Error::DimensionMismatch { expected: j.nrows(), got: s.len() });
                    }
                    Ok(j.scale_rows(&s))
                }
                None => {
                    let s = numeric(input)?;
                    let t: Vec<_> = s.iter().enumerate().map(|(i, &v)| (i, i, v)).collect();
                    SparseMatrix::from_triplets(s.len(), s.len(), &t)
                }
            },
            Mapper::Marginal { dist, inner } => {
                let (x, j) = match inner {
                    Some(m) => (m.ibm_eval(input, state)?, m.ibm_jacobian(input, state)?),
                    None => (state.to_vec(), SparseMatrix::identity(state.len())),
                };
                let d: Vec<f64> = x.iter().map(|&v| dist.derivative(v)).collect();
                Ok(j.scale_rows(&d))
            }
            Mapper::LogSumExp { rescale: _, n_block } => {
                let (block, weights) = blocks(input, *n_block)?;
                check_weights(weights, true)?;
                let mut max = vec![f64::NEG_INFINITY; *n_block];
                for (i, &b) in block.iter().enumerate() {
                    if weights[i] > 0.0 {
                        max[b - 1] = max[b - 1].max(state[i]);
                    }
                }
                let terms: Vec<f64> = block
                    .iter()
                    .enumerate()
                    .map(|(i, &b)| if weights[i] > 0.0 { weights[i] * (state[i] - max[b - 1]).exp() } else { 0.0 })
                    .collect();
                let mut sum = vec![0.0; *n_block];
                for (i, &b) in block.iter().enumerate() {
                    sum[b - 1] += terms[i];
                }
                let t: Vec<_> = block
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| terms[*i] > 0.0)
                    .map(|(i, &b)| (b - 1, i, terms[i] / sum[b - 1]))
                    .collect();
                SparseMatrix::from_triplets(*n_block, n, &t)
            }
            Mapper::Aggregate { rescale, n_block } => {
                let (block, weights) = blocks(input, *n_block)?;
                check_weights(weights, false)?;
                let mut wsum = vec![0.0; *n_block];
                for (i, &b) in block.iter().enumerate() {
                    wsum[b - 1] += weights[i];
                }
                let mut t = Vec::with_capacity(block.len());
                for (i, &b) in block.iter().enumerate() {
                    let w = if *rescale {
                        if wsum[b - 1] == 0.0 {
                            return Err(Error::Mapper(format!("block {b} has zero total weight")));
                        }
                        weights[i] / wsum[b - 1]
                    } else {
                        weights[i]
                    };
                    t.push((b - 1, i, w));
                }
                SparseMatrix::from_triplets(*n_block, n, &t)
            }
            Mapper::Multi(ms) => {
                let l = input.list(ms.len())?;
                let rows = l.first().map_or(0, |i| i.rows());
                let mut subs = Vec::with_capacity(ms.len());
                let mut sizes = Vec::with_capacity(ms.len());
                for ((_, m), i) in ms.iter().zip(l) {
                    if !m.is_linear() {
                        return Err(Error::Mapper("multi mapper requires linear sub-mappers".into()));
                    }
                    let nk = m.ibm_n(i);
                    let jk = m.ibm_jacobian(i, &vec![0.0; nk])?;
                    if jk.nrows() != rows {
                        return Err(Error::DimensionMismatch { expected: rows, got: jk.nrows() });
                    }
                    subs.push(jk);
                    sizes.push(nk);
                }
                let mut t = Vec::new();
                for r in 0..rows {
                    // kronecker product of the per-mapper rows
                    let mut acc: Vec<(usize, f64)> = vec![(0, 1.0)];
                    let mut stride = 1;
                    for (jk, &nk) in subs.iter().zip(&sizes) {
                        let (cols, vals) = jk.row(r);
                        let mut next = Vec::with_capacity(acc.len() * cols.len());
                        for &(c0, v0) in &acc {
                            for (&c, &v) in cols.iter().zip(vals) {
                                next.push((c0 + stride * c, v0 * v));
                            }
                        }
                        acc = next;
                        stride *= nk;
                    }
                    t.extend(acc.into_iter().map(|(c, v)| (r, c, v)));
                }
                SparseMatrix::from_triplets(rows, n, &t)
            }
            Mapper::Pipe(ms) => {
                let l = input.list(ms.len())?;
                let mut cur = state.to_vec();
                let mut jac: Option<SparseMatrix> = None;
                for (m, i) in ms.iter().zip(l) {
                    let j = m.ibm_jacobian(i, &cur)?;
                    cur = m.ibm_eval(i, &cur)?;
                    jac = Some(match jac {
                        None => j,
                        Some(prev) => j.matmul(&prev)?,
                    });
                }
                Ok(jac.unwrap_or_else(|| SparseMatrix::identity(state.len())))
            }
            Mapper::Collect { mappers, hidden } => {
                let l = input.list(mappers.len())?;
                let mut blocks_out = Vec::new();
                let mut off = 0;
                for (k, ((_, m), i)) in mappers.iter().zip(l).enumerate() {
                    let nk = m.ibm_n(i);
                    let j = m.ibm_jacobian(i, &state[off..off + nk])?;
                    if !*hidden || k == 0 {
                        blocks_out.push(j.widen(off, n));
                    }
                    off += nk;
                }
                SparseMatrix::vstack(&blocks_out)
            }
        }
    }

    fn check_state(&self, input: &MapperInput, state: &[f64]) -> Result<()> {
        let n = self.ibm_n(input);
        if state.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: state.len() });
        }
        Ok(())
    }
}

fn numeric(input: &MapperInput) -> Result<Vec<f64>> {
    match input {
        MapperInput::Numeric(v) => Ok(v.clone()),
        MapperInput::Ones(n) => Ok(vec![1.0; *n]),
        MapperInput::Index(v) => Ok(v.iter().map(|&i| i as f64).collect()),
        _ => Err(Error::Mapper("expected numeric input".into())),
    }
}

fn indices(input: &MapperInput) -> Result<Vec<usize>> {
    match input {
        MapperInput::Index(v) => Ok(v.clone()),
        MapperInput::Ones(n) => Ok(vec![1; *n]),
        MapperInput::Numeric(v) => v
            .iter()
            .map(|&x| {
                if x.fract() == 0.0 && x >= 1.0 {
                    Ok(x as usize)
                } else {
                    Err(Error::Mapper(format!("non-integer index {x}")))
                }
            })
            .collect(),
        _ => Err(Error::Mapper("index mapper needs integer input".into())),
    }
}

fn blocks(input: &MapperInput, n_block: usize) -> Result<(&[usize], &[f64])> {
    match input {
        MapperInput::Blocks { block, weights } => {
            if block.len() != weights.len() {
                return Err(Error::DimensionMismatch { expected: weights.len(), got: block.len() });
            }
            if let Some(&b) = block.iter().find(|&&b| b == 0 || b > n_block) {
                return Err(Error::Mapper(format!("block index {b} outside 1..={n_block}")));
            }
            Ok((block, weights))
        }
        _ => Err(Error::Mapper("aggregation mapper needs block input".into())),
    }
}

fn check_weights(w: &[f64], non_negative: bool) -> Result<()> {
    for &x in w {
        if !x.is_finite() || (non_negative && x < 0.0) {
            return Err(Error::Mapper(format!("invalid weight {x}")));
        }
    }
    Ok(())
}
