use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Provenance};
use crate::error::{Error, Result};

/// Concatenation `a` then `b`. Both must share vocabulary and class count.
pub fn merge(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    if a.vocab != b.vocab {
        return Err(Error::VocabMismatch(format!(
            "{} ({} tokens) vs {} ({} tokens)",
            a.provenance.generator,
            a.vocab.len(),
            b.provenance.generator,
            b.vocab.len()
        )));
    }
    if a.num_classes != b.num_classes {
        return Err(Error::VocabMismatch(format!(
            "class counts differ: {} vs {}",
            a.num_classes, b.num_classes
        )));
    }
    let mut notes = a.provenance.notes.clone();
    notes.push(format!("merged with {}-{}", b.provenance.generator, b.provenance.seed));
    let mut instances = Vec::with_capacity(a.len() + b.len());
    instances.extend_from_slice(&a.instances);
    instances.extend_from_slice(&b.instances);
    Ok(Dataset {
        instances,
        vocab: a.vocab.clone(),
        num_classes: a.num_classes,
        provenance: Provenance {
            generator: format!("{}+{}", a.provenance.generator, b.provenance.generator),
            seed: a.provenance.seed,
            config: a.provenance.config.clone().or_else(|| b.provenance.config.clone()),
            notes,
        },
    })
}

/// Seeded k-fold partition. Returns `(train, validation)` per fold; the
/// validation folds are disjoint and cover the dataset, with the first
/// `n % k` folds one instance larger.
pub fn kfold(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<(Dataset, Dataset)>> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("k must be >= 2, got {k}")));
    }
    if k > ds.len() {
        return Err(Error::InvalidConfig(format!(
            "k = {k} exceeds dataset size {}",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (ds.len() / k, ds.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let val = &order[start..start + size];
        let train: Vec<usize> = order[..start].iter().chain(&order[start + size..]).copied().collect();
        folds.push((ds.subset(&train), ds.subset(val)));
        start += size;
    }
    Ok(folds)
}
