//! Bag-of-embeddings classifiers for claim/evidence pairs.
//!
//! A pair classifier mean-pools a claim embedding table and a separate
//! evidence embedding table, concatenates the two vectors and feeds them
//! through one tanh hidden layer into a linear output layer. The claim-only
//! classifier is the same stack over the claim alone.
//!
//! When a [`BiasModelConfig`] enables PoE or DFL, the classifier carries an
//! additional claim-only expert whose parameters are prefixed `expert.`.

mod bias;
mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use bias::{combined_bias_loss, cross_entropy, dfl_loss, poe_combine, record_bias_loss, BiasMode, BiasModelConfig};
pub use params::ParamSet;

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::Instance;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Pair,
    ClaimOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl ModelDims {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 16,
            hidden_dim: 32,
            num_classes: 3,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 || self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!("degenerate model dimensions {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum Init {
    /// Every parameter zero.
    Zeros,
    /// Uniform random weights and embeddings, zero biases.
    Random { seed: u64 },
    /// As `Random`, but the output layer starts at zero (uniform predictions).
    RandomZeroOutput { seed: u64 },
}

impl Init {
    fn seed(&self) -> Option<u64> {
        match self {
            Init::Zeros => None,
            Init::Random { seed } | Init::RandomZeroOutput { seed } => Some(*seed),
        }
    }
}

/// Anything that yields differentiable `[batch, classes]` log-probabilities
/// from a [`ParamSet`].
pub trait LogProbModel {
    fn params(&self) -> &ParamSet;

    /// `vars` are `self.params()` bound on `g`, in order.
    fn record_log_probs(&self, g: &mut Graph, vars: &[Var], batch: &[&Instance]) -> Result<Var>;
}

impl LogProbModel for Classifier {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn record_log_probs(&self, g: &mut Graph, vars: &[Var], batch: &[&Instance]) -> Result<Var> {
        Classifier::record_log_probs(self, g, vars, batch)
    }
}

/// Claim/evidence (or claim-only) classifier, optionally with a claim-only
/// bias expert attached for PoE/DFL training.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    arch: Architecture,
    dims: ModelDims,
    bias: BiasModelConfig,
    params: ParamSet,
    init: Init,
    /// Number of leading tensors in `params` that belong to the main model.
    n_main: usize,
}

struct Stack {
    claim_emb: Var,
    evidence_emb: Option<Var>,
    hidden: (Var, Var),
    output: (Var, Var),
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("shape")
}

fn stack_params(
    prefix: &str,
    arch: Architecture,
    dims: &ModelDims,
    rng: Option<&mut ChaCha8Rng>,
    zero_output: bool,
    out: &mut ParamSet,
) {
    let (v, d, h, c) = (dims.vocab_size, dims.embed_dim, dims.hidden_dim, dims.num_classes);
    let in_dim = match arch {
        Architecture::Pair => 2 * d,
        Architecture::ClaimOnly => d,
    };
    let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut shapes: Vec<(&str, Vec<usize>, f64)> = vec![("claim_embedding", vec![v, d], 1.0)];
    if arch == Architecture::Pair {
        shapes.push(("evidence_embedding", vec![v, d], 1.0));
    }
    shapes.push(("hidden.weight", vec![in_dim, h], glorot(in_dim, h)));
    shapes.push(("hidden.bias", vec![h], 0.0));
    shapes.push((
        "output.weight",
        vec![h, c],
        if zero_output { 0.0 } else { glorot(h, c) },
    ));
    shapes.push(("output.bias", vec![c], 0.0));
    let mut rng = rng;
    for (name, shape, bound) in shapes {
        // Draw even when the bound is zero so the stream does not depend on
        // which layers are zeroed.
        let t = match rng.as_deref_mut() {
            Some(r) => {
                let mut t = uniform(r, &shape, bound.max(f64::MIN_POSITIVE));
                if bound == 0.0 {
                    t.data_mut().fill(0.0);
                }
                t
            }
            None => Tensor::zeros(&shape),
        };
        out.push(format!("{prefix}{name}"), t.with_grad());
    }
}

impl Classifier {
    pub fn new(arch: Architecture, dims: ModelDims, bias: BiasModelConfig, init: Init) -> Result<Self> {
        dims.validate()?;
        bias.validate()?;
        let mut params = ParamSet::new();
        let mut rng = init.seed().map(ChaCha8Rng::seed_from_u64);
        let zero_out = matches!(init, Init::RandomZeroOutput { .. });
        stack_params("", arch, &dims, rng.as_mut(), zero_out, &mut params);
        let n_main = params.len();
        let mut model = Self {
            arch,
            dims,
            bias: BiasModelConfig::default(),
            params,
            init,
            n_main,
        };
        if bias.uses_expert() {
            model.attach_expert(bias, init.seed().map_or(0, |s| s ^ 0x9e37_79b9_7f4a_7c15))?;
        }
        model.bias = bias;
        Ok(model)
    }

    pub fn pair(dims: ModelDims, init: Init) -> Result<Self> {
        Self::new(Architecture::Pair, dims, BiasModelConfig::default(), init)
    }

    pub fn claim_only(dims: ModelDims, init: Init) -> Result<Self> {
        Self::new(Architecture::ClaimOnly, dims, BiasModelConfig::default(), init)
    }

    /// Switches the training objective. Attaches a freshly initialized
    /// claim-only expert when the new mode needs one and none is present.
    pub fn set_bias(&mut self, bias: BiasModelConfig, expert_seed: u64) -> Result<()> {
        bias.validate()?;
        if bias.uses_expert() && !self.has_expert() {
            self.attach_expert(bias, expert_seed)?;
        }
        self.bias = bias;
        Ok(())
    }

    fn attach_expert(&mut self, bias: BiasModelConfig, seed: u64) -> Result<()> {
        if self.arch != Architecture::Pair {
            return Err(Error::InvalidConfig(format!(
                "bias mode {:?} requires a pair classifier",
                bias.mode
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        stack_params(
            "expert.",
            Architecture::ClaimOnly,
            &self.dims,
            Some(&mut rng),
            false,
            &mut self.params,
        );
        Ok(())
    }

    /// Rebuilds a classifier around existing parameters (checkpoint loading).
    pub fn from_parts(
        arch: Architecture,
        dims: ModelDims,
        bias: BiasModelConfig,
        init: Init,
        params: ParamSet,
    ) -> Result<Self> {
        bias.validate()?;
        let mut reference = Self::new(arch, dims, BiasModelConfig::default(), Init::Zeros)?;
        let n_main = reference.n_main;
        if params.len() > n_main {
            reference.attach_expert(bias, 0)?;
        }
        reference.params.check_compatible(&params)?;
        if bias.uses_expert() && params.len() == n_main {
            return Err(Error::Checkpoint(
                "bias mode set but no expert parameters stored".into(),
            ));
        }
        Ok(Self {
            arch,
            dims,
            bias,
            params,
            init,
            n_main,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn bias(&self) -> &BiasModelConfig {
        &self.bias
    }

    pub fn init(&self) -> Init {
        self.init
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Number of leading parameter tensors that belong to the main model.
    pub fn main_len(&self) -> usize {
        self.n_main
    }

    pub fn has_expert(&self) -> bool {
        self.params.len() > self.n_main
    }

    pub fn num_classes(&self) -> usize {
        self.dims.num_classes
    }

    fn stack(&self, vars: &[Var], expert: bool) -> Stack {
        let (arch, off) = if expert {
            (Architecture::ClaimOnly, self.n_main)
        } else {
            (self.arch, 0)
        };
        let v = &vars[off..];
        match arch {
            Architecture::Pair => Stack {
                claim_emb: v[0],
                evidence_emb: Some(v[1]),
                hidden: (v[2], v[3]),
                output: (v[4], v[5]),
            },
            Architecture::ClaimOnly => Stack {
                claim_emb: v[0],
                evidence_emb: None,
                hidden: (v[1], v[2]),
                output: (v[3], v[4]),
            },
        }
    }

    fn record_stack(&self, g: &mut Graph, s: &Stack, batch: &[&Instance]) -> Result<Var> {
        let claims: Vec<Vec<usize>> = batch.iter().map(|i| i.claim.clone()).collect();
        let mut x = g.embedding_bag_mean(s.claim_emb, &claims)?;
        if let Some(ev) = s.evidence_emb {
            let evidence: Vec<Vec<usize>> = batch.iter().map(|i| i.evidence.clone()).collect();
            let e = g.embedding_bag_mean(ev, &evidence)?;
            x = g.concat_cols(x, e)?;
        }
        let h = g.matmul(x, s.hidden.0)?;
        let h = g.add_row_bias(h, s.hidden.1)?;
        let h = g.tanh(h);
        let z = g.matmul(h, s.output.0)?;
        let z = g.add_row_bias(z, s.output.1)?;
        g.log_softmax(z)
    }

    /// `[batch, classes]` log-probabilities of the main model.
    pub fn record_main_log_probs(&self, g: &mut Graph, vars: &[Var], batch: &[&Instance]) -> Result<Var> {
        let s = self.stack(vars, false);
        self.record_stack(g, &s, batch)
    }

    /// `[batch, classes]` log-probabilities of the claim-only expert.
    pub fn record_expert_log_probs(&self, g: &mut Graph, vars: &[Var], batch: &[&Instance]) -> Result<Var> {
        if !self.has_expert() {
            return Err(Error::InvalidConfig("classifier has no claim-only expert".into()));
        }
        let s = self.stack(vars, true);
        self.record_stack(g, &s, batch)
    }

    /// Log-probabilities used for prediction.
    pub fn record_log_probs(&self, g: &mut Graph, vars: &[Var], batch: &[&Instance]) -> Result<Var> {
        let main = self.record_main_log_probs(g, vars, batch)?;
        if self.bias.drop_expert_at_inference || !self.bias.uses_expert() {
            return Ok(main);
        }
        let expert = self.record_expert_log_probs(g, vars, batch)?;
        let s = g.add(main, expert)?;
        g.log_softmax(s)
    }

    /// Mean training objective over the batch under the current bias mode.
    pub fn record_training_loss(&self, g: &mut Graph, vars: &[Var], batch: &[&Instance]) -> Result<Var> {
        let golds: Vec<usize> = batch.iter().map(|i| i.label).collect();
        let main = self.record_main_log_probs(g, vars, batch)?;
        let expert = if self.bias.uses_expert() {
            Some(self.record_expert_log_probs(g, vars, batch)?)
        } else {
            None
        };
        record_bias_loss(g, main, expert, &golds, &self.bias)
    }

    fn check_tokens(&self, tokens: &[usize], what: &'static str) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyTokens(what));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.dims.vocab_size) {
            return Err(Error::IndexOutOfRange {
                op: what,
                index: t,
                bound: self.dims.vocab_size,
            });
        }
        Ok(())
    }

    fn single(&self, claim: &[usize], evidence: &[usize]) -> Result<Vec<f64>> {
        let inst = Instance {
            id: String::new(),
            claim: claim.to_vec(),
            evidence: evidence.to_vec(),
            label: 0,
        };
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let lp = self.record_log_probs(&mut g, &vars, &[&inst])?;
        Ok(g.value(lp).to_vec())
    }

    /// Log-probabilities for one claim/evidence pair.
    pub fn forward_pair(&self, claim: &[usize], evidence: &[usize]) -> Result<Vec<f64>> {
        if self.arch != Architecture::Pair {
            return Err(Error::InvalidConfig("forward_pair on a claim-only classifier".into()));
        }
        self.check_tokens(claim, "claim")?;
        self.check_tokens(evidence, "evidence")?;
        self.single(claim, evidence)
    }

    /// Log-probabilities from the claim alone.
    pub fn forward_claim_only(&self, claim: &[usize]) -> Result<Vec<f64>> {
        if self.arch != Architecture::ClaimOnly {
            return Err(Error::InvalidConfig("forward_claim_only on a pair classifier".into()));
        }
        self.check_tokens(claim, "claim")?;
        self.single(claim, claim)
    }

    /// Row-major `[n, classes]` log-probabilities for many instances.
    pub fn log_probs(&self, instances: &[&Instance]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(instances.len() * self.num_classes());
        for chunk in instances.chunks(256) {
            let mut g = Graph::new();
            let vars = self.params.bind_frozen(&mut g);
            let lp = self.record_log_probs(&mut g, &vars, chunk)?;
            out.extend_from_slice(g.value(lp));
        }
        Ok(out)
    }

    /// Argmax predictions, ties to the lowest class index.
    pub fn predict(&self, instances: &[&Instance]) -> Result<Vec<usize>> {
        let c = self.num_classes();
        Ok(self
            .log_probs(instances)?
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
                    )
                    .0
            })
            .collect())
    }
}
