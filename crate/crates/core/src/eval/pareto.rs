use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One run in (original-task accuracy, FT-test accuracy) space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub x: f64,
    pub y: f64,
    /// Which configuration produced the point.
    pub label: String,
}

impl ParetoPoint {
    pub fn new(x: f64, y: f64, label: impl Into<String>) -> Self {
        Self {
            x,
            y,
            label: label.into(),
        }
    }

    /// `self` is at least as good on both axes and better on one.
    pub fn dominates(&self, other: &ParetoPoint) -> bool {
        self.x >= other.x && self.y >= other.y && (self.x > other.x || self.y > other.y)
    }

    pub fn weakly_dominates(&self, other: &ParetoPoint) -> bool {
        self.x >= other.x && self.y >= other.y
    }
}

/// Points no other point dominates, in input order. Both axes are maximized.
pub fn pareto_frontier(points: &[ParetoPoint]) -> Result<Vec<ParetoPoint>> {
    if points.is_empty() {
        return Err(Error::InvalidConfig("Pareto frontier of no points".into()));
    }
    if points.iter().any(|p| p.x.is_nan() || p.y.is_nan()) {
        return Err(Error::NonFinite("Pareto point".into()));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        points[j]
            .x
            .total_cmp(&points[i].x)
            .then(points[j].y.total_cmp(&points[i].y))
    });
    let mut keep = vec![false; points.len()];
    // Best y among points with strictly larger x than the current group.
    let mut best_y = f64::NEG_INFINITY;
    let mut start = 0;
    while start < order.len() {
        let x = points[order[start]].x;
        let mut end = start;
        while end < order.len() && points[order[end]].x == x {
            end += 1;
        }
        // Groups are sorted by y descending, so the group maximum comes first.
        let group_max = points[order[start]].y;
        for &i in &order[start..end] {
            let y = points[i].y;
            keep[i] = y == group_max && y > best_y;
        }
        best_y = best_y.max(group_max);
        start = end;
    }
    Ok(points
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(p, _)| p.clone())
        .collect())
}

/// Every point of `b` is weakly dominated by some point of `a`.
pub fn frontier_dominates(a: &[ParetoPoint], b: &[ParetoPoint]) -> Result<bool> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidConfig(
            "frontier dominance needs non-empty frontiers".into(),
        ));
    }
    Ok(b.iter().all(|q| a.iter().any(|p| p.weakly_dominates(q))))
}
