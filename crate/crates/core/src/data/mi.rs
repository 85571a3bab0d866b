use std::collections::HashMap;

use super::{Dataset, Vocab, LABEL_NAMES};
use crate::error::{Error, Result};

/// Label whose cue token appears first in `claim`, if any.
pub fn cue_label(vocab: &Vocab, claim: &[usize]) -> Option<usize> {
    claim.iter().find_map(|&t| {
        let rest = vocab.token(t)?.strip_prefix("cue_")?;
        let (label, _) = rest.rsplit_once('_')?;
        LABEL_NAMES.iter().position(|l| l.eq_ignore_ascii_case(label))
    })
}

/// Plug-in estimate, in bits, of the mutual information between the
/// claim's cue feature (which label cue, if any, it carries) and the label.
pub fn claim_label_mutual_information(ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset("mutual information"));
    }
    let n = ds.len() as f64;
    let mut joint: HashMap<(Option<usize>, usize), f64> = HashMap::new();
    let mut feat: HashMap<Option<usize>, f64> = HashMap::new();
    let mut lab: HashMap<usize, f64> = HashMap::new();
    for inst in &ds.instances {
        let f = cue_label(&ds.vocab, &inst.claim);
        *joint.entry((f, inst.label)).or_default() += 1.0;
        *feat.entry(f).or_default() += 1.0;
        *lab.entry(inst.label).or_default() += 1.0;
    }
    // Sum in a fixed order so the estimate is bit-reproducible.
    let mut cells: Vec<_> = joint.into_iter().collect();
    cells.sort_by_key(|((f, y), _)| (f.map_or(0, |v| v + 1), *y));
    let mi: f64 = cells
        .iter()
        .map(|((f, y), c)| {
            let pxy = c / n;
            pxy * (pxy / ((feat[f] / n) * (lab[y] / n))).log2()
        })
        .sum();
    Ok(mi.max(0.0))
}
