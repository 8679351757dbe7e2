//! Deterministic sampling of the pairs, anchors and negatives each
//! auxiliary loss scores. Plans hold row indices into a time-major batch.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const CPC_HORIZONS: [usize; 5] = [1, 2, 4, 8, 16];
pub const CPC_MAX_HORIZON: usize = 16;

/// A maximal run of rows `[start, end)` of one worker within one episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub worker: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn row(&self, t: usize, batch: usize) -> usize {
        t * batch + self.worker
    }
}

/// Splits each worker's time axis at episode starts. The first step of the
/// window always opens a segment.
pub fn segments(starts: &[bool], steps: usize, batch: usize) -> Vec<Segment> {
    assert_eq!(starts.len(), steps * batch, "start flags must cover every row");
    let mut out = Vec::new();
    for b in 0..batch {
        let mut s = 0;
        for t in 1..=steps {
            if t == steps || starts[t * batch + b] {
                out.push(Segment {
                    worker: b,
                    start: s,
                    end: t,
                });
                s = t;
            }
        }
    }
    out
}

fn keep_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).ceil() as usize).clamp(1, n)
}

fn subsample<T: Copy, R: Rng + ?Sized>(items: &[T], count: usize, rng: &mut R) -> Vec<T> {
    let mut idx = sample(rng, items.len(), count).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdPair {
    pub row: usize,
    pub next_row: usize,
    /// Last row of the segment; its belief conditions the decoder.
    pub end_row: usize,
    pub action: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IdPlan {
    pub candidates: usize,
    pub pairs: Vec<IdPair>,
}

pub fn plan_id<R: Rng + ?Sized>(
    starts: &[bool],
    actions: &[usize],
    steps: usize,
    batch: usize,
    fraction: f64,
    rng: &mut R,
) -> IdPlan {
    let mut all = Vec::new();
    for seg in segments(starts, steps, batch) {
        let end_row = seg.row(seg.end - 1, batch);
        for t in seg.start..seg.end.saturating_sub(1) {
            let row = seg.row(t, batch);
            all.push(IdPair {
                row,
                next_row: row + batch,
                end_row,
                action: actions[row],
            });
        }
    }
    if all.is_empty() {
        return IdPlan::default();
    }
    let pairs = subsample(&all, keep_count(all.len(), fraction), rng);
    IdPlan {
        candidates: all.len(),
        pairs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdPair {
    pub row_i: usize,
    pub row_j: usize,
    pub end_row: usize,
    pub target: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TdPlan {
    pub pairs: Vec<TdPair>,
}

/// Per trajectory, draws up to `per_trajectory` ordered pairs `i != j` from
/// a common segment without replacement.
pub fn plan_td<R: Rng + ?Sized>(
    starts: &[bool],
    steps: usize,
    batch: usize,
    per_trajectory: usize,
    normalize: bool,
    rng: &mut R,
) -> TdPlan {
    let segs = segments(starts, steps, batch);
    let mut pairs = Vec::new();
    for b in 0..batch {
        let mut cands = Vec::new();
        for seg in segs.iter().filter(|s| s.worker == b) {
            let end_row = seg.row(seg.end - 1, batch);
            let len = seg.len() as f64;
            for i in seg.start..seg.end {
                for j in seg.start..seg.end {
                    if i == j {
                        continue;
                    }
                    let gap = i.abs_diff(j) as f64;
                    cands.push(TdPair {
                        row_i: seg.row(i, batch),
                        row_j: seg.row(j, batch),
                        end_row,
                        target: if normalize { gap / len } else { gap },
                    });
                }
            }
        }
        if cands.is_empty() {
            continue;
        }
        let m = per_trajectory.min(cands.len());
        pairs.extend(subsample(&cands, m, rng));
    }
    TdPlan { pairs }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpcAnchor {
    pub row: usize,
    /// Number of future offsets (capped at 16) that stay in the segment.
    pub valid: usize,
}

/// Anchors and one pre-drawn negative row per anchor and offset, shared by
/// every horizon so that runs at different `k` are directly comparable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CpcPlan {
    pub anchors: Vec<CpcAnchor>,
    /// `negatives[a][d - 1]` is the negative row scored at offset `d`.
    pub negatives: Vec<Vec<usize>>,
}

pub fn plan_cpc<R: Rng + ?Sized>(
    starts: &[bool],
    steps: usize,
    batch: usize,
    fraction: f64,
    rng: &mut R,
) -> CpcPlan {
    let rows = steps * batch;
    let mut all = Vec::new();
    for seg in segments(starts, steps, batch) {
        for t in seg.start..seg.end.saturating_sub(1) {
            all.push(CpcAnchor {
                row: seg.row(t, batch),
                valid: (seg.end - 1 - t).min(CPC_MAX_HORIZON),
            });
        }
    }
    if all.is_empty() || rows < 2 {
        return CpcPlan::default();
    }
    let anchors = subsample(&all, keep_count(all.len(), fraction), rng);
    let negatives = anchors
        .iter()
        .map(|a| {
            (1..=CPC_MAX_HORIZON)
                .map(|d| {
                    let pos = a.row + d * batch;
                    if pos < rows {
                        let r = rng.random_range(0..rows - 1);
                        if r >= pos {
                            r + 1
                        } else {
                            r
                        }
                    } else {
                        rng.random_range(0..rows)
                    }
                })
                .collect()
        })
        .collect();
    CpcPlan { anchors, negatives }
}

/// Unit weights on offsets `1..=k`.
pub fn horizon_weights(k: usize) -> Vec<f64> {
    vec![1.0; k.min(CPC_MAX_HORIZON)]
}

/// Weight of offset `d` = number of horizons in {1, 2, 4, 8, 16} that reach it.
pub fn cpc_offset_weights() -> Vec<f64> {
    (1..=CPC_MAX_HORIZON)
        .map(|d| CPC_HORIZONS.iter().filter(|&&k| k >= d).count() as f64)
        .collect()
}
