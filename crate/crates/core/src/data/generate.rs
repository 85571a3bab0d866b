//! Synthetic claim/evidence corpora with an injectable claim-only bias.
//!
//! Every claim names one topic keyword. The evidence decides the label:
//! the same keyword means SUPPORTS, the keyword's antonym means REFUTES,
//! neither means NEI. Evidence may also mention other topics' keywords or
//! antonyms as distractors, so reading it requires matching the claim's
//! topic. With probability `bias_strength` the claim also
//! carries a cue token tied to a label, which is the shortcut a claim-only
//! model can exploit.

use std::collections::HashSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Instance, Provenance, Vocab, LABEL_NAMES, NEI, REFUTES, SUPPORTS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_instances: usize,
    pub vocab_size: usize,
    /// Probability that a claim carries a label cue token.
    pub bias_strength: f64,
    /// Per-class sampling weights (SUPPORTS, REFUTES, NEI); must sum to 1.
    pub label_distribution: Vec<f64>,
    pub n_topics: usize,
    pub cues_per_label: usize,
    pub claim_filler: (usize, usize),
    pub evidence_filler: (usize, usize),
    /// Probability that NEI evidence mentions another topic's keyword or antonym.
    pub nei_distractor_rate: f64,
    /// Probability that SUPPORTS/REFUTES evidence also mentions another
    /// topic's token of the opposite polarity, so the label can only be read
    /// by matching the claim's topic.
    pub evidence_distractor_rate: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_instances: 20_000,
            vocab_size: 400,
            bias_strength: 0.6,
            label_distribution: vec![1.0 / 3.0; 3],
            n_topics: 24,
            cues_per_label: 2,
            claim_filler: (2, 4),
            evidence_filler: (6, 10),
            nei_distractor_rate: 0.5,
            evidence_distractor_rate: 0.15,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.label_distribution.len() != LABEL_NAMES.len() {
            return bad(format!(
                "label_distribution needs {} weights, got {}",
                LABEL_NAMES.len(),
                self.label_distribution.len()
            ));
        }
        if self.label_distribution.iter().any(|w| !(*w >= 0.0)) {
            return bad("label weights must be nonnegative".into());
        }
        let total: f64 = self.label_distribution.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("label weights sum to {total}, expected 1"));
        }
        for (name, p) in [
            ("bias_strength", self.bias_strength),
            ("nei_distractor_rate", self.nei_distractor_rate),
            ("evidence_distractor_rate", self.evidence_distractor_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.n_topics < 2 {
            return bad("need at least two topics".into());
        }
        if self.cues_per_label == 0 {
            return bad("cues_per_label must be >= 1".into());
        }
        if self.claim_filler.0 > self.claim_filler.1 || self.evidence_filler.0 > self.evidence_filler.1 {
            return bad("filler length ranges must satisfy min <= max".into());
        }
        if self.evidence_filler.1 == 0 {
            return bad("evidence needs at least one filler token for NEI instances".into());
        }
        let reserved = 2 * self.n_topics + LABEL_NAMES.len() * self.cues_per_label;
        if self.vocab_size <= reserved {
            return bad(format!(
                "vocab_size {} too small for {} keywords/antonyms/cues plus filler",
                self.vocab_size, reserved
            ));
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<VocabLayout> {
        self.validate()?;
        Ok(VocabLayout::new(self))
    }
}

/// Token-id inventory implied by a [`GeneratorConfig`].
#[derive(Debug, Clone)]
pub struct VocabLayout {
    pub vocab: Vocab,
    pub keywords: Vec<usize>,
    pub antonyms: Vec<usize>,
    /// `cues[label]` lists the cue tokens for that label.
    pub cues: Vec<Vec<usize>>,
    pub filler: Vec<usize>,
}

impl VocabLayout {
    fn new(cfg: &GeneratorConfig) -> Self {
        let mut vocab = Vocab::new();
        let keywords = (0..cfg.n_topics).map(|i| vocab.intern(format!("kw{i}"))).collect();
        let antonyms = (0..cfg.n_topics).map(|i| vocab.intern(format!("ant{i}"))).collect();
        let cues = LABEL_NAMES
            .iter()
            .map(|l| (0..cfg.cues_per_label).map(|j| vocab.intern(cue_token(l, j))).collect())
            .collect();
        let n_filler = cfg.vocab_size - vocab.len();
        let filler = (0..n_filler).map(|i| vocab.intern(format!("w{i}"))).collect();
        Self {
            vocab,
            keywords,
            antonyms,
            cues,
            filler,
        }
    }

    fn filler(&self, rng: &mut ChaCha8Rng, range: (usize, usize)) -> Vec<usize> {
        let n = rng.gen_range(range.0..=range.1);
        (0..n).map(|_| *self.filler.choose(rng).unwrap()).collect()
    }

    fn cue(&self, rng: &mut ChaCha8Rng, label: usize) -> usize {
        *self.cues[label].choose(rng).unwrap()
    }

    fn claim(&self, rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, topic: usize, cue: Option<usize>) -> Vec<usize> {
        let mut claim = self.filler(rng, cfg.claim_filler);
        claim.push(self.keywords[topic]);
        if let Some(label) = cue {
            claim.push(self.cue(rng, label));
        }
        claim.shuffle(rng);
        claim
    }

    fn evidence(&self, rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, topic: usize, label: usize) -> Vec<usize> {
        let mut ev = self.filler(rng, cfg.evidence_filler);
        match label {
            SUPPORTS | REFUTES => {
                let (own, opposite) = if label == SUPPORTS {
                    (&self.keywords, &self.antonyms)
                } else {
                    (&self.antonyms, &self.keywords)
                };
                ev.push(own[topic]);
                if rng.gen::<f64>() < cfg.evidence_distractor_rate {
                    let other = (topic + rng.gen_range(1..cfg.n_topics)) % cfg.n_topics;
                    ev.push(opposite[other]);
                }
            }
            _ => {
                if rng.gen::<f64>() < cfg.nei_distractor_rate {
                    let other = (topic + rng.gen_range(1..cfg.n_topics)) % cfg.n_topics;
                    let pool = if rng.gen::<bool>() {
                        &self.keywords
                    } else {
                        &self.antonyms
                    };
                    ev.push(pool[other]);
                }
                if ev.is_empty() {
                    ev.push(*self.filler.choose(rng).unwrap());
                }
            }
        }
        ev.shuffle(rng);
        ev
    }
}

/// Name of the `j`-th cue token for a label, e.g. `cue_refutes_1`.
pub(crate) fn cue_token(label: &str, j: usize) -> String {
    format!("cue_{}_{j}", label.to_ascii_lowercase())
}

fn provenance(generator: &str, seed: u64, cfg: &GeneratorConfig, notes: Vec<String>) -> Provenance {
    Provenance {
        generator: generator.to_string(),
        seed,
        config: Some(cfg.clone()),
        notes,
    }
}

/// Original-task corpus with a claim-only shortcut of strength `bias_strength`.
pub fn generate_biased_original(cfg: &GeneratorConfig) -> Result<Dataset> {
    let layout = cfg.layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels = WeightedIndex::new(&cfg.label_distribution)
        .map_err(|e| Error::InvalidConfig(format!("label_distribution: {e}")))?;
    let mut ds = Dataset::new(
        layout.vocab.clone(),
        LABEL_NAMES.len(),
        provenance("original", cfg.seed, cfg, vec![]),
    );
    for i in 0..cfg.n_instances {
        let label = labels.sample(&mut rng);
        let topic = rng.gen_range(0..cfg.n_topics);
        let cue = (rng.gen::<f64>() < cfg.bias_strength).then_some(label);
        let claim = layout.claim(&mut rng, cfg, topic, cue);
        let evidence = layout.evidence(&mut rng, cfg, topic, label);
        ds.instances.push(Instance {
            id: format!("original-{}-{i}", cfg.seed),
            claim,
            evidence,
            label,
        });
    }
    Ok(ds)
}

/// Paired SUPPORTS/REFUTES instances sharing each claim, built with the
/// rules of `base`. A claim cue, when present, is wrong for one member of
/// its pair, so claims carry no information about the label.
pub fn generate_symmetric_counterfactual(base: &Dataset, n_pairs: usize, seed: u64) -> Result<Dataset> {
    if n_pairs < 1 {
        return Err(Error::InvalidConfig("n_pairs must be >= 1".into()));
    }
    let cfg = base
        .provenance
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("base dataset carries no generator rules".into()))?;
    let layout = cfg.layout()?;
    if layout.vocab != base.vocab {
        return Err(Error::VocabMismatch(
            "base vocab differs from its generator layout".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::new(
        layout.vocab.clone(),
        base.num_classes,
        provenance("symmetric", seed, cfg, vec![format!("n_pairs={n_pairs}")]),
    );
    let mut claims = HashSet::new();
    for i in 0..n_pairs {
        let mut attempts = 0;
        let (topic, claim) = loop {
            let topic = rng.gen_range(0..cfg.n_topics);
            let cue = (rng.gen::<f64>() < cfg.bias_strength).then(|| *[SUPPORTS, REFUTES].choose(&mut rng).unwrap());
            let claim = layout.claim(&mut rng, cfg, topic, cue);
            if claims.insert(claim.clone()) {
                break (topic, claim);
            }
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::InvalidConfig(format!(
                    "cannot draw {n_pairs} distinct claims from this vocabulary"
                )));
            }
        };
        for (label, tag) in [(SUPPORTS, "s"), (REFUTES, "r")] {
            let evidence = layout.evidence(&mut rng, cfg, topic, label);
            ds.instances.push(Instance {
                id: format!("symmetric-{seed}-{i}-{tag}"),
                claim: claim.clone(),
                evidence,
                label,
            });
        }
    }
    Ok(ds)
}

/// Single-label (REFUTES) stress set. Evidence always carries the claim
/// keyword's antonym; with probability `bias_strength` the claim carries a
/// cue for one of the other labels, so the claim-only shortcut points the
/// wrong way.
pub fn generate_single_label_challenge(cfg: &GeneratorConfig) -> Result<Dataset> {
    let layout = cfg.layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ds = Dataset::new(
        layout.vocab.clone(),
        LABEL_NAMES.len(),
        provenance("challenge", cfg.seed, cfg, vec![]),
    );
    for i in 0..cfg.n_instances {
        let topic = rng.gen_range(0..cfg.n_topics);
        let cue = (rng.gen::<f64>() < cfg.bias_strength).then(|| *[SUPPORTS, NEI].choose(&mut rng).unwrap());
        let claim = layout.claim(&mut rng, cfg, topic, cue);
        let evidence = layout.evidence(&mut rng, cfg, topic, REFUTES);
        ds.instances.push(Instance {
            id: format!("challenge-{}-{i}", cfg.seed),
            claim,
            evidence,
            label: REFUTES,
        });
    }
    Ok(ds)
}
