//! Recursive cube search over the (weight decay, dropout, multiplier) grid.
//!
//! Cubes live in "split space": weight decay is represented by `log10 λ`,
//! dropout and the interval multiplier `k` by their raw values. Every cube
//! is bisected on all three axes at once. A grid point lying exactly on an
//! interior face belongs to the lower child, which is encoded by marking the
//! upper child's lower bound as open.

use std::cmp::Ordering;
use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const AXIS_NAMES: [&str; 3] = ["lambda_log10", "dropout", "k"];

/// One point of the hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub lambda: f64,
    pub dropout: f64,
    pub k: f64,
}

/// Rectilinear hyperparameter grid, stored in split-space coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperGrid {
    pub lambda_log10: Vec<f64>,
    pub dropout: Vec<f64>,
    pub k: Vec<f64>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
            .collect(),
    }
}

impl Default for HyperGrid {
    /// 10 log-spaced weight decays over `[1e-10, 1e-1]`, dropout 0.1..0.9 in
    /// steps of 0.1 and `k` over `[1, 10]` in steps of 0.5625.
    fn default() -> Self {
        Self::from_ranges((-10.0, -1.0, 10), (0.1, 0.9, 9), (1.0, 10.0, 17))
    }
}

impl HyperGrid {
    /// Evenly spaced axes: `lambda` as `(log10 min, log10 max, count)`.
    pub fn from_ranges(lambda: (f64, f64, usize), dropout: (f64, f64, usize), k: (f64, f64, usize)) -> Self {
        Self {
            lambda_log10: linspace(lambda.0, lambda.1, lambda.2),
            dropout: linspace(dropout.0, dropout.1, dropout.2),
            k: linspace(k.0, k.1, k.2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, axis) in AXIS_NAMES.iter().zip(self.axes()) {
            if axis.is_empty() {
                return invalid(format!("grid axis {name} is empty"));
            }
            if axis.iter().any(|v| !v.is_finite()) {
                return invalid(format!("grid axis {name} has non-finite values"));
            }
            if axis.windows(2).any(|w| w[0] >= w[1]) {
                return invalid(format!("grid axis {name} must be strictly increasing"));
            }
        }
        if self.dropout.iter().any(|&p| !(0.0..1.0).contains(&p)) {
            return invalid("dropout values must lie in [0, 1)");
        }
        if self.k.iter().any(|&k| k <= 0.0) {
            return invalid("interval multipliers must be positive");
        }
        Ok(())
    }

    pub fn axes(&self) -> [&[f64]; 3] {
        [&self.lambda_log10, &self.dropout, &self.k]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.lambda_log10.len(), self.dropout.len(), self.k.len()]
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lambda_values(&self) -> Vec<f64> {
        self.lambda_log10.iter().map(|&e| 10f64.powf(e)).collect()
    }

    /// Flat index of grid point `(i, j, l)`; `k` varies fastest.
    pub fn index(&self, i: usize, j: usize, l: usize) -> usize {
        let [_, np, nk] = self.shape();
        (i * np + j) * nk + l
    }

    pub fn config(&self, i: usize, j: usize, l: usize) -> HyperConfig {
        HyperConfig {
            lambda: 10f64.powf(self.lambda_log10[i]),
            dropout: self.dropout[j],
            k: self.k[l],
        }
    }

    /// Split-space bounding box of the grid.
    pub fn bounding_box(&self) -> [Interval; 3] {
        self.axes().map(|a| Interval::closed(a[0], a[a.len() - 1]))
    }
}

/// Raw grid scores (lower is better), their min–max normalisation and the
/// baseline score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub grid: HyperGrid,
    /// Indexed by [`HyperGrid::index`].
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub baseline: f64,
    /// Baseline under the same affine map; may fall outside `[0, 1]`.
    pub baseline_normalized: f64,
}

/// Min–max normalises `raw` over all grid points. A constant table maps to
/// all zeros (and the baseline is then shifted by the same minimum).
pub fn normalize_scores(grid: HyperGrid, raw: Vec<f64>, baseline: f64) -> Result<ScoreTable> {
    grid.validate()?;
    if raw.is_empty() {
        return Err(Error::EmptyInput("score table"));
    }
    if raw.len() != grid.len() {
        return Err(Error::DimensionMismatch { context: "score table entries", expected: grid.len(), found: raw.len() });
    }
    if let Some(pos) = raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score table entry {pos}")));
    }
    if !baseline.is_finite() {
        return Err(Error::NonFinite("baseline score".into()));
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let map = |v: f64| if range > 0.0 { (v - lo) / range } else { v - lo };
    let normalized = raw.iter().map(|&v| if range > 0.0 { map(v) } else { 0.0 }).collect();
    Ok(ScoreTable { grid, raw, normalized, baseline, baseline_normalized: map(baseline) })
}

/// One axis of a cube. `lo_open` excludes points equal to `lo`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub lo_open: bool,
}

impl Interval {
    pub fn closed(lo: f64, hi: f64) -> Self {
        Self { lo, hi, lo_open: false }
    }

    pub fn contains(&self, x: f64) -> bool {
        (if self.lo_open { x > self.lo } else { x >= self.lo }) && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    /// Index range of sorted `coords` inside the interval.
    pub fn index_range(&self, coords: &[f64]) -> std::ops::Range<usize> {
        let start = coords.partition_point(|&c| if self.lo_open { c <= self.lo } else { c < self.lo });
        let end = coords.partition_point(|&c| c <= self.hi);
        start..end.max(start)
    }

    fn halves(&self) -> (Interval, Interval) {
        let mid = self.midpoint();
        (
            Interval { lo: self.lo, hi: mid, lo_open: self.lo_open },
            Interval { lo: mid, hi: self.hi, lo_open: true },
        )
    }

    fn total_cmp(&self, other: &Interval) -> Ordering {
        self.lo
            .total_cmp(&other.lo)
            .then(self.hi.total_cmp(&other.hi))
            .then(self.lo_open.cmp(&other.lo_open))
    }
}

/// `(S̄, w, O)` over the grid points of a cube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubeStats {
    pub s_bar: f64,
    pub w: f64,
    pub o: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cube {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    pub bounds: [Interval; 3],
    pub stall: usize,
    pub stats: Option<CubeStats>,
}

impl Cube {
    pub fn root(grid: &HyperGrid) -> Self {
        Self { id: 0, parent: None, depth: 0, bounds: grid.bounding_box(), stall: 0, stats: None }
    }

    /// Volume in split-space coordinates.
    pub fn volume(&self) -> f64 {
        self.bounds.iter().map(Interval::width).product()
    }

    pub fn contains(&self, point: [f64; 3]) -> bool {
        self.bounds.iter().zip(point).all(|(b, x)| b.contains(x))
    }

    pub fn index_ranges(&self, grid: &HyperGrid) -> [std::ops::Range<usize>; 3] {
        let axes = grid.axes();
        [0, 1, 2].map(|a| self.bounds[a].index_range(axes[a]))
    }

    pub fn n_points(&self, grid: &HyperGrid) -> usize {
        self.index_ranges(grid).iter().map(|r| r.len()).product()
    }

    /// Each axis must still hold at least two grid coordinates.
    pub fn is_splittable(&self, grid: &HyperGrid) -> bool {
        self.index_ranges(grid).iter().all(|r| r.len() >= 2)
    }

    fn cmp_bounds(&self, other: &Cube) -> Ordering {
        self.bounds
            .iter()
            .zip(&other.bounds)
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

/// Statistics of `cube` over `table`. Containment is inclusive except for the
/// open lower faces created by splitting.
pub fn cube_stats(cube: &Cube, table: &ScoreTable) -> Result<CubeStats> {
    let [ri, rj, rl] = cube.index_ranges(&table.grid);
    let n = ri.len() * rj.len() * rl.len();
    if n == 0 {
        return Err(Error::EmptyCube);
    }
    let mut sum = 0.0;
    let mut beats = 0usize;
    for i in ri {
        for j in rj.clone() {
            for l in rl.clone() {
                let idx = table.grid.index(i, j, l);
                sum += table.normalized[idx];
                if table.raw[idx] < table.baseline {
                    beats += 1;
                }
            }
        }
    }
    let s_bar = sum / n as f64;
    let w = beats as f64 / n as f64;
    Ok(CubeStats { s_bar, w, o: w + (1.0 - s_bar), n_points: n })
}

/// Bisects every axis at its midpoint, giving 8 children ordered with the
/// λ half varying slowest and the lower half first. Ids and stall counters are
/// left for the caller to assign.
pub fn split(cube: &Cube, grid: &HyperGrid) -> Result<[Cube; 8]> {
    if !cube.is_splittable(grid) {
        return Err(Error::Unsplittable(format!("cube {} has an axis with fewer than 2 grid points", cube.id)));
    }
    let halves = cube.bounds.map(|b| b.halves());
    Ok(std::array::from_fn(|c| {
        let pick = |axis: usize| {
            let (lo, hi) = halves[axis];
            if (c >> (2 - axis)) & 1 == 0 { lo } else { hi }
        };
        Cube {
            id: 0,
            parent: Some(cube.id),
            depth: cube.depth + 1,
            bounds: [pick(0), pick(1), pick(2)],
            stall: 0,
            stats: None,
        }
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CubeSearchConfig {
    /// Relative-improvement threshold.
    pub epsilon: f64,
    /// Number of successive non-improving generations that stops a branch.
    pub window: usize,
    /// Maximum number of cubes dequeued.
    pub max_rounds: usize,
    pub top_k: usize,
    pub min_points: usize,
}

impl Default for CubeSearchConfig {
    fn default() -> Self {
        Self { epsilon: 0.15, window: 3, max_rounds: 10_000, top_k: 10, min_points: 1 }
    }
}

impl CubeSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return invalid(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.window == 0 || self.top_k == 0 || self.max_rounds == 0 {
            return invalid("window, top_k and max_rounds must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stalled,
    Unsplittable,
    BelowMinPoints,
}

/// One line of the cube log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeLogRecord {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    pub bounds: LogBounds,
    pub s_bar: Option<f64>,
    pub w: Option<f64>,
    pub o: Option<f64>,
    pub stall: usize,
    pub finished_reason: Option<FinishReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogBounds {
    pub lambda_log10: [f64; 2],
    pub dropout: [f64; 2],
    pub k: [f64; 2],
}

impl From<&[Interval; 3]> for LogBounds {
    fn from(b: &[Interval; 3]) -> Self {
        Self { lambda_log10: [b[0].lo, b[0].hi], dropout: [b[1].lo, b[1].hi], k: [b[2].lo, b[2].hi] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CubeSearchResult {
    /// Best finished cubes, at most `top_k`.
    pub ranked: Vec<Cube>,
    /// Every dequeued cube, in processing order.
    pub log: Vec<CubeLogRecord>,
    pub finished: usize,
    pub rounds: usize,
}

impl CubeSearchResult {
    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        for rec in &self.log {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Orders cubes best first: higher `O`, then smaller volume, then bounds.
pub fn rank_order(a: &Cube, b: &Cube) -> Ordering {
    let oa = a.stats.map_or(f64::NEG_INFINITY, |s| s.o);
    let ob = b.stats.map_or(f64::NEG_INFINITY, |s| s.o);
    ob.total_cmp(&oa)
        .then(a.volume().total_cmp(&b.volume()))
        .then(a.cmp_bounds(b))
}

/// Breadth-first cube search from the grid's bounding box.
///
/// A child's stall counter is the parent's plus one when its relative
/// improvement `(O − O_parent)/max(|O_parent|, 1e-12)` is below `epsilon`,
/// and zero otherwise; the root starts at zero. Cubes reaching the window,
/// unsplittable cubes and cubes with fewer than `min_points` grid points are
/// finished; all others are split. At most `max_rounds` cubes are dequeued.
pub fn cube_search(table: &ScoreTable, cfg: &CubeSearchConfig) -> Result<CubeSearchResult> {
    cfg.validate()?;
    let grid = &table.grid;
    let mut queue: VecDeque<(Cube, Option<(f64, usize)>)> = VecDeque::new();
    queue.push_back((Cube::root(grid), None));
    let mut next_id = 1;
    let mut finished: Vec<Cube> = Vec::new();
    let mut log = Vec::new();
    let mut rounds = 0;

    while let Some((mut cube, parent)) = queue.pop_front() {
        if rounds >= cfg.max_rounds {
            break;
        }
        rounds += 1;

        let n = cube.n_points(grid);
        let reason = if n == 0 || n < cfg.min_points {
            Some(FinishReason::BelowMinPoints)
        } else {
            let stats = cube_stats(&cube, table)?;
            cube.stats = Some(stats);
            if let Some((o_parent, parent_stall)) = parent {
                let rel = (stats.o - o_parent) / o_parent.abs().max(1e-12);
                cube.stall = if rel < cfg.epsilon { parent_stall + 1 } else { 0 };
            }
            if cube.stall >= cfg.window {
                Some(FinishReason::Stalled)
            } else if !cube.is_splittable(grid) {
                Some(FinishReason::Unsplittable)
            } else {
                None
            }
        };

        log.push(CubeLogRecord {
            id: cube.id,
            parent: cube.parent,
            depth: cube.depth,
            bounds: LogBounds::from(&cube.bounds),
            s_bar: cube.stats.map(|s| s.s_bar),
            w: cube.stats.map(|s| s.w),
            o: cube.stats.map(|s| s.o),
            stall: cube.stall,
            finished_reason: reason,
        });

        match reason {
            Some(_) => finished.push(cube),
            None => {
                let o = cube.stats.expect("stats computed for split cubes").o;
                for mut child in split(&cube, grid)? {
                    child.id = next_id;
                    next_id += 1;
                    queue.push_back((child, Some((o, cube.stall))));
                }
            }
        }
    }

    let n_finished = finished.len();
    let mut ranked: Vec<Cube> = finished.into_iter().filter(|c| c.stats.is_some()).collect();
    ranked.sort_by(rank_order);
    ranked.truncate(cfg.top_k);
    Ok(CubeSearchResult { ranked, log, finished: n_finished, rounds })
}

/// A cube kept by the cross-replicate aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeptCube {
    pub bounds: LogBounds,
    pub count: usize,
    pub mean_o: f64,
}

/// Envelope of the kept cubes, with weight decay back in λ units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subregion {
    #[serde(rename = "WDR")]
    pub wdr: [f64; 2],
    #[serde(rename = "DR")]
    pub dr: [f64; 2],
    #[serde(rename = "SDR")]
    pub sdr: [f64; 2],
    #[serde(rename = "N_top")]
    pub n_top: f64,
    pub kept: Vec<KeptCube>,
}

impl Subregion {
    /// Whether a configuration lies in the (closed) envelope.
    pub fn contains(&self, h: &HyperConfig) -> bool {
        let inside = |r: [f64; 2], x: f64| r[0] <= x && x <= r[1];
        inside(self.wdr, h.lambda) && inside(self.dr, h.dropout) && inside(self.sdr, h.k)
    }
}

/// Counts, for every distinct cube, the replicates ranking it among their
/// first `top_n`; keeps the `keep` most frequent (ties: higher mean `O`, then
/// bounds) and returns their per-axis envelope. `N_top` is the mean count of
/// the kept cubes.
pub fn aggregate_subregions(rankings: &[Vec<Cube>], top_n: usize, keep: usize) -> Result<Subregion> {
    if rankings.is_empty() {
        return Err(Error::EmptyInput("replicate rankings"));
    }
    if top_n == 0 || keep == 0 {
        return invalid("top_n and keep must be at least 1");
    }
    type Key = [(u64, u64, bool); 3];
    let key = |c: &Cube| -> Key { c.bounds.map(|b| (b.lo.to_bits(), b.hi.to_bits(), b.lo_open)) };
    let mut tally: BTreeMap<Key, (Cube, usize, f64)> = BTreeMap::new();
    for ranking in rankings {
        for cube in ranking.iter().take(top_n) {
            let o = cube.stats.map_or(0.0, |s| s.o);
            let e = tally.entry(key(cube)).or_insert_with(|| (cube.clone(), 0, 0.0));
            e.1 += 1;
            e.2 += o;
        }
    }
    if tally.is_empty() {
        return Err(Error::EmptyInput("replicate rankings"));
    }
    let mut entries: Vec<(Cube, usize, f64)> =
        tally.into_values().map(|(c, n, total)| (c, n, total / n as f64)).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp_bounds(&b.0)));
    entries.truncate(keep);

    let env = |axis: usize| {
        let lo = entries.iter().map(|e| e.0.bounds[axis].lo).fold(f64::INFINITY, f64::min);
        let hi = entries.iter().map(|e| e.0.bounds[axis].hi).fold(f64::NEG_INFINITY, f64::max);
        [lo, hi]
    };
    let l = env(0);
    let n_top = entries.iter().map(|e| e.1 as f64).sum::<f64>() / entries.len() as f64;
    Ok(Subregion {
        wdr: [10f64.powf(l[0]), 10f64.powf(l[1])],
        dr: env(1),
        sdr: env(2),
        n_top,
        kept: entries
            .iter()
            .map(|(c, n, o)| KeptCube { bounds: LogBounds::from(&c.bounds), count: *n, mean_o: *o })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table_from(grid: HyperGrid, f: impl Fn(usize, usize, usize) -> f64, baseline: f64) -> ScoreTable {
        let [a, b, c] = grid.shape();
        let mut raw = Vec::with_capacity(a * b * c);
        for i in 0..a {
            for j in 0..b {
                for l in 0..c {
                    raw.push(f(i, j, l));
                }
            }
        }
        normalize_scores(grid, raw, baseline).unwrap()
    }

    #[test]
    fn default_grid_shape() {
        let g = HyperGrid::default();
        assert_eq!(g.shape(), [10, 9, 17]);
        assert_eq!(g.len(), 1530);
        g.validate().unwrap();
        assert_eq!(g.k[1], 1.5625);
        assert_eq!(g.k[2], 2.125);
        assert!((g.lambda_values()[0] - 1e-10).abs() < 1e-24);
        assert!((g.lambda_values()[9] - 1e-1).abs() < 1e-15);
        assert!((g.dropout[4] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn normalization_examples() {
        let g = HyperGrid { lambda_log10: vec![0.0], dropout: vec![0.1], k: vec![1.0, 2.0, 3.0] };
        let t = normalize_scores(g.clone(), vec![2.0, 4.0, 6.0], 3.0).unwrap();
        assert_eq!(t.normalized, vec![0.0, 0.5, 1.0]);
        assert_eq!(t.baseline_normalized, 0.25);
        let t = normalize_scores(g.clone(), vec![5.0; 3], 3.0).unwrap();
        assert_eq!(t.normalized, vec![0.0; 3]);
        assert!(normalize_scores(g, vec![], 1.0).is_err());
    }

    #[test]
    fn extreme_cube_scores() {
        let g = HyperGrid { lambda_log10: vec![0.0, 1.0], dropout: vec![0.1, 0.2], k: vec![1.0, 2.0] };
        let all_best = table_from(g.clone(), |i, _, _| if i == 0 { 1.0 } else { 5.0 }, 2.0);
        let mut lower = Cube::root(&g);
        lower.bounds[0] = Interval::closed(0.0, 0.5);
        assert_eq!(cube_stats(&lower, &all_best).unwrap().o, 2.0);
        let mut upper = Cube::root(&g);
        upper.bounds[0] = Interval { lo: 0.5, hi: 1.0, lo_open: true };
        assert_eq!(cube_stats(&upper, &all_best).unwrap().o, 0.0);
    }

    #[test]
    fn four_point_hand_table() {
        // raw 1, 2, 3, 5 → normalized 0, .25, .5, 1; baseline 2.5 beaten by 1 and 2.
        let g = HyperGrid { lambda_log10: vec![0.0], dropout: vec![0.1, 0.2], k: vec![1.0, 2.0] };
        let t = normalize_scores(g.clone(), vec![1.0, 2.0, 3.0, 5.0], 2.5).unwrap();
        let s = cube_stats(&Cube::root(&g), &t).unwrap();
        assert_eq!(s.s_bar, 0.4375);
        assert_eq!(s.w, 0.5);
        assert_eq!(s.o, 1.0625);
    }

    #[test]
    fn empty_cube_has_no_stats() {
        let g = HyperGrid { lambda_log10: vec![0.0, 1.0], dropout: vec![0.1, 0.2], k: vec![1.0, 2.0] };
        let t = table_from(g.clone(), |_, _, _| 1.0, 2.0);
        let mut c = Cube::root(&g);
        c.bounds[2] = Interval::closed(1.2, 1.8);
        assert!(matches!(cube_stats(&c, &t), Err(Error::EmptyCube)));
    }

    #[test]
    fn split_boundaries_match_grid_arithmetic() {
        let g = HyperGrid::default();
        let root = Cube::root(&g);
        let first = split(&root, &g).unwrap();
        assert_eq!(first[0].bounds[0].hi, -5.5);
        assert!((10f64.powf(-5.5) - 3.1623e-6).abs() < 1e-9);
        let mut c = root;
        let mut k_bounds = vec![];
        for _ in 0..4 {
            c = split(&c, &g).unwrap()[0].clone();
            k_bounds.push(c.bounds[2].hi);
        }
        assert_eq!(k_bounds, vec![5.5, 3.25, 2.125, 1.5625]);
        assert!((c.bounds[1].hi - 0.15).abs() < 1e-15);
    }

    #[test]
    fn unsplittable_cube_rejected() {
        let g = HyperGrid { lambda_log10: vec![0.0], dropout: vec![0.1, 0.2], k: vec![1.0, 2.0] };
        assert!(matches!(split(&Cube::root(&g), &g), Err(Error::Unsplittable(_))));
    }

    #[test]
    fn forced_early_stop() {
        let g = HyperGrid::from_ranges((0.0, 7.0, 8), (0.0, 0.7, 8), (1.0, 8.0, 8));
        let t = table_from(g.clone(), |i, j, l| (i + j + l) as f64, 10.0);
        let cfg = CubeSearchConfig { epsilon: f64::INFINITY, window: 1, ..CubeSearchConfig::default() };
        let r = cube_search(&t, &cfg).unwrap();
        assert_eq!(r.rounds, 9);
        assert_eq!(r.finished, 8);
        assert!(r.ranked.iter().all(|c| c.depth == 1));
        // The all-low corner has the best score.
        assert_eq!(r.ranked[0].bounds[0].lo, 0.0);
        assert!(!r.ranked[0].bounds[0].lo_open);
    }

    #[test]
    fn max_rounds_caps_dequeues() {
        let g = HyperGrid::from_ranges((0.0, 7.0, 8), (0.0, 0.7, 8), (1.0, 8.0, 8));
        let t = table_from(g.clone(), |i, j, l| ((i * 7 + j * 3 + l) % 5) as f64, 2.0);
        let cfg = CubeSearchConfig { max_rounds: 20, ..CubeSearchConfig::default() };
        assert_eq!(cube_search(&t, &cfg).unwrap().rounds, 20);
    }

    #[test]
    fn aggregation_examples() {
        let g = HyperGrid::from_ranges((0.0, 7.0, 8), (0.0, 0.7, 8), (1.0, 8.0, 8));
        let t = table_from(g.clone(), |i, j, l| ((i * 7 + j * 3 + l) % 5) as f64, 2.0);
        let r = cube_search(&t, &CubeSearchConfig::default()).unwrap();
        let one = aggregate_subregions(std::slice::from_ref(&r.ranked), 10, 1).unwrap();
        assert_eq!(one.n_top, 1.0);
        assert_eq!(one.kept[0].bounds, LogBounds::from(&r.ranked[0].bounds));
        let many = aggregate_subregions(&vec![r.ranked.clone(); 25], 10, 5).unwrap();
        assert_eq!(many.n_top, 25.0);
        assert!(many.kept.iter().all(|k| k.count == 25));
        assert!(aggregate_subregions(&[], 10, 5).is_err());
    }

    #[test]
    fn log_serializes_expected_fields() {
        let g = HyperGrid::from_ranges((0.0, 1.0, 2), (0.1, 0.2, 2), (1.0, 2.0, 2));
        let t = table_from(g.clone(), |i, j, l| (i + j + l) as f64, 1.5);
        let r = cube_search(&t, &CubeSearchConfig::default()).unwrap();
        let mut buf = Vec::new();
        r.write_jsonl(&mut buf).unwrap();
        let first: serde_json::Value = serde_json::from_str(std::str::from_utf8(&buf).unwrap().lines().next().unwrap()).unwrap();
        for key in ["id", "parent", "depth", "bounds", "s_bar", "w", "o", "stall", "finished_reason"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        assert_eq!(first["bounds"]["k"], serde_json::json!([1.0, 2.0]));
    }

    fn arb_table() -> impl Strategy<Value = ScoreTable> {
        (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(a, b, c)| {
            (proptest::collection::vec(0.0..10.0f64, a * b * c), 0.0..10.0f64).prop_map(move |(raw, base)| {
                let g = HyperGrid::from_ranges((-3.0, 0.0, a), (0.1, 0.5, b), (1.0, 4.0, c));
                normalize_scores(g, raw, base).unwrap()
            })
        })
    }

    fn points_of(c: &Cube, g: &HyperGrid) -> Vec<usize> {
        let [ri, rj, rl] = c.index_ranges(g);
        let mut v = vec![];
        for i in ri {
            for j in rj.clone() {
                for l in rl.clone() {
                    v.push(g.index(i, j, l));
                }
            }
        }
        v
    }

    proptest! {
        #[test]
        fn children_tile_parent(t in arb_table()) {
            let g = &t.grid;
            let mut stack = vec![Cube::root(g)];
            while let Some(c) = stack.pop() {
                if !c.is_splittable(g) { continue; }
                let kids = split(&c, g).unwrap();
                let mut pts: Vec<usize> = kids.iter().flat_map(|k| points_of(k, g)).collect();
                pts.sort_unstable();
                prop_assert_eq!(pts, points_of(&c, g));
                let vol: f64 = kids.iter().map(Cube::volume).sum();
                prop_assert!((vol - c.volume()).abs() <= 1e-12 * c.volume().max(1.0));
                stack.extend(kids);
            }
        }

        #[test]
        fn cube_score_bounded_and_rank_invariant(t in arb_table()) {
            let r = cube_search(&t, &CubeSearchConfig::default()).unwrap();
            let cubed = normalize_scores(t.grid.clone(), t.raw.iter().map(|v| v * v * v + 3.0 * v).collect(), t.baseline.powi(3) + 3.0 * t.baseline).unwrap();
            for rec in r.log.iter().filter(|l| l.o.is_some()) {
                let o = rec.o.unwrap();
                prop_assert!((0.0..=2.0).contains(&o));
            }
            for c in &r.ranked {
                let w1 = cube_stats(c, &t).unwrap().w;
                let w2 = cube_stats(c, &cubed).unwrap().w;
                prop_assert_eq!(w1, w2);
            }
            prop_assert_eq!(r, cube_search(&t, &CubeSearchConfig::default()).unwrap());
        }
    }
}
