//! Elastic weight consolidation.
//!
//! Fine-tuning minimizes `L_FT(θ) + Σ_i (λ/2)·F_ii·(θ_i − θ*_i)²`, where
//! `θ*` is a [`ParameterSnapshot`] taken before fine-tuning and `F` is the
//! empirical diagonal Fisher: the mean, over instances sampled from the
//! original training data, of the squared gradient of `log p(y | x; θ)` at
//! the gold label. With `F ≡ 1` the penalty is plain L2 towards `θ*`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{LogProbModel, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerKind {
    #[default]
    None,
    L2,
    Ewc,
}

impl std::str::FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "l2" => Ok(Self::L2),
            "ewc" => Ok(Self::Ewc),
            other => Err(Error::InvalidConfig(format!("unknown regularizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegularizerConfig {
    pub kind: RegularizerKind,
    pub lambda: f64,
    pub fisher_sample_size: usize,
    /// Re-estimate the Fisher before every epoch; otherwise once at the start.
    pub recompute_each_epoch: bool,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            kind: RegularizerKind::None,
            lambda: 0.0,
            fisher_sample_size: 2000,
            recompute_each_epoch: true,
        }
    }
}

impl RegularizerConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn l2(lambda: f64) -> Self {
        Self {
            kind: RegularizerKind::L2,
            lambda,
            ..Default::default()
        }
    }

    pub fn ewc(lambda: f64) -> Self {
        Self {
            kind: RegularizerKind::Ewc,
            lambda,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.kind == RegularizerKind::Ewc && self.fisher_sample_size == 0 {
            return Err(Error::InvalidConfig("fisher_sample_size must be >= 1 for EWC".into()));
        }
        Ok(())
    }
}

/// Deep copy of a model's trainable parameters (`θ*`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSnapshot {
    params: ParamSet,
}

impl ParameterSnapshot {
    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn from_params(params: ParamSet) -> Self {
        Self { params }
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }
}

pub fn snapshot<M: LogProbModel + ?Sized>(model: &M) -> ParameterSnapshot {
    ParameterSnapshot {
        params: model.params().clone(),
    }
}

/// Per-parameter diagonal Fisher estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherDiagonal {
    values: ParamSet,
    pub sample_size: usize,
    pub source: String,
}

impl FisherDiagonal {
    /// `F ≡ 1` with the layout of `like`.
    pub fn ones_like(like: &ParamSet) -> Self {
        let mut values = ParamSet::new();
        for (name, t) in like.iter() {
            values.push(name, Tensor::ones(t.shape()));
        }
        Self {
            values,
            sample_size: 0,
            source: "identity".into(),
        }
    }

    /// Builds from explicit values; every entry must be finite and nonnegative.
    pub fn from_values(values: ParamSet, sample_size: usize, source: impl Into<String>) -> Result<Self> {
        for (name, t) in values.iter() {
            if t.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Parameter {
                    name: name.to_string(),
                    msg: "Fisher entries must be finite and nonnegative".into(),
                });
            }
        }
        Ok(Self {
            values,
            sample_size,
            source: source.into(),
        })
    }

    pub fn values(&self) -> &ParamSet {
        &self.values
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.values.get(name).map(Tensor::data)
    }

    pub fn mean(&self) -> f64 {
        let n = self.values.numel();
        if n == 0 {
            return 0.0;
        }
        self.values.iter().flat_map(|(_, t)| t.data()).sum::<f64>() / n as f64
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|(_, t)| t.data())
            .copied()
            .fold(0.0, f64::max)
    }
}

/// Empirical diagonal Fisher of `model` on `n` instances drawn uniformly
/// with replacement from `data` (seeded), using gold labels.
pub fn estimate_fisher_diagonal<M: LogProbModel + ?Sized>(
    model: &M,
    data: &Dataset,
    n: usize,
    seed: u64,
) -> Result<FisherDiagonal> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("Fisher estimation"));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("Fisher sample size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = model.params();
    let mut acc: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    for _ in 0..n {
        let inst = &data.instances[rng.gen_range(0..data.len())];
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let lp = model.record_log_probs(&mut g, &vars, &[inst])?;
        // nll = −log p(y|x); squaring removes the sign.
        let nll = g.nll(lp, &[inst.label], None)?;
        let grads = g.backward(nll)?;
        for (a, v) in acc.iter_mut().zip(&vars) {
            if let Some(gr) = grads.get(*v) {
                for (x, d) in a.iter_mut().zip(gr) {
                    *x += d * d;
                }
            }
        }
    }
    let inv = 1.0 / n as f64;
    let mut values = ParamSet::new();
    for ((name, t), a) in params.iter().zip(acc) {
        let data = a.into_iter().map(|x| x * inv).collect();
        values.push(name, Tensor::new(t.shape().to_vec(), data)?);
    }
    FisherDiagonal::from_values(
        values,
        n,
        format!("{}-{} (seed {seed})", data.provenance.generator, data.provenance.seed),
    )
}

/// Records `Σ_i (λ/2)·F_ii·(θ_i − θ*_i)²` on `g`; `vars` are the bound
/// parameters in snapshot order.
pub fn record_elastic_penalty(
    g: &mut Graph,
    vars: &[Var],
    snapshot: &ParameterSnapshot,
    fisher: &FisherDiagonal,
    lambda: f64,
) -> Result<Var> {
    snapshot.params.check_compatible(&fisher.values)?;
    if vars.len() != snapshot.params.len() {
        return Err(Error::shape("elastic_penalty", &[vars.len()], &[snapshot.params.len()]));
    }
    let mut total: Option<Var> = None;
    for (i, &v) in vars.iter().enumerate() {
        let anchor = snapshot.params.tensor(i);
        if g.shape(v) != anchor.shape() {
            return Err(Error::shape("elastic_penalty", g.shape(v), anchor.shape()));
        }
        let anchor = g.constant(anchor.shape().to_vec(), anchor.data().to_vec())?;
        let f = fisher.values.tensor(i);
        let f = g.constant(f.shape().to_vec(), f.data().to_vec())?;
        let d = g.sub(v, anchor)?;
        let sq = g.square(d);
        let weighted = g.mul(f, sq)?;
        let s = g.sum(weighted);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(vec![], vec![0.0])?,
    };
    Ok(g.scale(total, lambda / 2.0))
}

/// L2 pull towards `θ*`: the elastic penalty with `F ≡ 1`.
pub fn record_l2_penalty(g: &mut Graph, vars: &[Var], snapshot: &ParameterSnapshot, lambda: f64) -> Result<Var> {
    record_elastic_penalty(g, vars, snapshot, &FisherDiagonal::ones_like(&snapshot.params), lambda)
}

/// Value of the elastic penalty at `theta`.
pub fn elastic_penalty(
    theta: &ParamSet,
    snapshot: &ParameterSnapshot,
    fisher: &FisherDiagonal,
    lambda: f64,
) -> Result<f64> {
    theta.check_compatible(&snapshot.params)?;
    let mut g = Graph::new();
    let vars = theta.bind(&mut g);
    let p = record_elastic_penalty(&mut g, &vars, snapshot, fisher, lambda)?;
    g.scalar(p)
}

pub fn l2_penalty(theta: &ParamSet, snapshot: &ParameterSnapshot, lambda: f64) -> Result<f64> {
    elastic_penalty(theta, snapshot, &FisherDiagonal::ones_like(&snapshot.params), lambda)
}

/// `L_FT + penalty`.
pub fn regularized_loss(g: &mut Graph, task_loss: Var, penalty: Var) -> Result<Var> {
    g.add(task_loss, penalty)
}
