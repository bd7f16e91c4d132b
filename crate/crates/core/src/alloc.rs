//! Greedy bit allocation across encoder outputs under a fixed total budget.
//!
//! Each iteration moves one bit from the output whose quantization loss
//! grows least when it loses a bit to the output whose loss shrinks most
//! when it gains one. A move is kept only if the total estimated loss drops
//! by more than `tol`, so the loss sequence is non-increasing and the loop
//! terminates.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::quantizer::{
    estimate_quant_loss, kmeans_from, kmeans_sorted, make_strict, prepare_samples,
    quantile_centers, Codebook, CodebookBank, KMeansConfig, MAX_BITS,
};

/// Integer bits per output with bounds; the budget is the sum of bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitAllocation {
    bits: Vec<u32>,
    b_min: u32,
    b_max: u32,
}

impl BitAllocation {
    pub fn new(bits: Vec<u32>, b_min: u32, b_max: u32) -> Result<Self> {
        if b_min == 0 || b_max < b_min || b_max > MAX_BITS {
            return Err(Error::Config(format!(
                "bit bounds [{b_min}, {b_max}] must satisfy 1 <= min <= max <= {MAX_BITS}"
            )));
        }
        if bits.is_empty() {
            return Err(Error::Config("allocation needs at least one output".into()));
        }
        if let Some(b) = bits.iter().find(|&&b| b < b_min || b > b_max) {
            return Err(Error::Config(format!(
                "bit count {b} outside bounds [{b_min}, {b_max}]"
            )));
        }
        Ok(Self { bits, b_min, b_max })
    }

    /// `m` outputs with `b` bits each.
    pub fn equal(m: usize, b: u32, b_min: u32, b_max: u32) -> Result<Self> {
        Self::new(vec![b; m], b_min, b_max)
    }

    pub fn bits(&self) -> &[u32] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn budget(&self) -> u32 {
        self.bits.iter().sum()
    }

    pub fn bounds(&self) -> (u32, u32) {
        (self.b_min, self.b_max)
    }

    /// Moves one bit from output `d` to output `a`.
    pub fn transfer(&mut self, d: usize, a: usize) -> Result<()> {
        if d == a || self.bits[d] <= self.b_min || self.bits[a] >= self.b_max {
            return Err(Error::Saturated(format!("cannot move a bit from {d} to {a}")));
        }
        self.bits[d] -= 1;
        self.bits[a] += 1;
        Ok(())
    }

    /// Text form: `# budget`, `# bounds` header lines then `m B_m` per output.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# budget {}", self.budget());
        let _ = writeln!(s, "# bounds {} {}", self.b_min, self.b_max);
        for (m, b) in self.bits.iter().enumerate() {
            let _ = writeln!(s, "{m} {b}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let corrupt = |msg: String| Error::Corrupt(format!("allocation file: {msg}"));
        let mut budget = None;
        let mut bounds = None;
        let mut bits = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let fields: Vec<&str> = line.trim_start_matches('#').split_whitespace().collect();
            let num = |s: &str| s.parse::<u32>().map_err(|_| corrupt(format!("bad number {s:?}")));
            if line.starts_with('#') {
                match fields.as_slice() {
                    ["budget", v] => budget = Some(num(v)?),
                    ["bounds", lo, hi] => bounds = Some((num(lo)?, num(hi)?)),
                    _ => {}
                }
                continue;
            }
            match fields.as_slice() {
                [m, b] => {
                    if num(m)? as usize != bits.len() {
                        return Err(corrupt(format!("output index {m} out of order")));
                    }
                    bits.push(num(b)?);
                }
                _ => return Err(corrupt(format!("malformed line {line:?}"))),
            }
        }
        let (lo, hi) = bounds.ok_or_else(|| corrupt("missing bounds header".into()))?;
        let alloc = Self::new(bits, lo, hi).map_err(|e| corrupt(e.to_string()))?;
        if let Some(b) = budget {
            if b != alloc.budget() {
                return Err(corrupt(format!("budget {b} != sum of bits {}", alloc.budget())));
            }
        }
        Ok(alloc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Estimated losses of one output at its current bit count and one bit either side.
/// `lower` / `upper` are `None` when the bound forbids the move.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub lower: Option<f64>,
    pub current: f64,
    pub upper: Option<f64>,
}

impl LossRow {
    fn increase_if_removed(&self) -> Option<f64> {
        self.lower.map(|l| l - self.current)
    }

    fn decrease_if_added(&self) -> Option<f64> {
        self.upper.map(|u| self.current - u)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationLossTable {
    pub rows: Vec<LossRow>,
}

fn select(
    t: &AllocationLossTable,
    exclude: Option<usize>,
    score: impl Fn(&LossRow) -> Option<f64>,
    better: impl Fn(f64, f64) -> bool,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (m, row) in t.rows.iter().enumerate() {
        if Some(m) == exclude {
            continue;
        }
        if let Some(v) = score(row) {
            if best.map_or(true, |(_, b)| better(v, b)) {
                best = Some((m, v));
            }
        }
    }
    best.map(|(m, _)| m)
}

/// Output whose loss increases least when it gives up a bit; lower index on ties.
pub fn select_decrement(t: &AllocationLossTable) -> Result<usize> {
    select(t, None, LossRow::increase_if_removed, |v, b| v < b)
        .ok_or_else(|| Error::Saturated("every output is at the minimum bit count".into()))
}

/// Output whose loss decreases most when it gains a bit; lower index on ties.
pub fn select_increment(t: &AllocationLossTable) -> Result<usize> {
    select(t, None, LossRow::decrease_if_added, |v, b| v > b)
        .ok_or_else(|| Error::Saturated("every output is at the maximum bit count".into()))
}

/// Loss change of moving a bit from `d` to `a` (negative is an improvement).
fn swap_delta(t: &AllocationLossTable, d: usize, a: usize) -> Option<f64> {
    Some(t.rows[d].increase_if_removed()? - t.rows[a].decrease_if_added()?)
}

/// Picks the `(d, a)` pair for one iteration. When both rules name the same
/// output the better of the two runner-up pairs is used instead.
pub fn select_pair(t: &AllocationLossTable) -> Result<(usize, usize)> {
    let d = select_decrement(t)?;
    let a = select_increment(t)?;
    if d != a {
        return Ok((d, a));
    }
    let alt_a = select(t, Some(d), LossRow::decrease_if_added, |v, b| v > b).map(|a2| (d, a2));
    let alt_d = select(t, Some(a), LossRow::increase_if_removed, |v, b| v < b).map(|d2| (d2, a));
    let candidates = [alt_a, alt_d];
    candidates
        .into_iter()
        .flatten()
        .filter_map(|(d, a)| swap_delta(t, d, a).map(|delta| ((d, a), delta)))
        .fold(None, |best: Option<((usize, usize), f64)>, cur| match best {
            Some(b) if b.1 <= cur.1 => Some(b),
            _ => Some(cur),
        })
        .map(|(p, _)| p)
        .ok_or_else(|| Error::Saturated("no distinct pair of outputs can exchange a bit".into()))
}

/// Quantization loss of one output as a function of its bit count, with the
/// codebooks realizing it. Entries are computed on demand and cached.
///
/// The `b`-bit codebook is the better of a fresh quantile-seeded K-means run
/// and a run seeded with the `(b-1)`-bit codebook plus extra quantile
/// centers. The second run can only improve on the `(b-1)`-bit loss, so the
/// curve is non-increasing in `b`.
#[derive(Debug, Clone)]
pub struct LossCurve {
    sorted: Vec<f64>,
    b_min: u32,
    cache: Vec<Option<(Codebook, f64)>>,
    kmeans: KMeansConfig,
    /// Number of K-means runs performed, for diagnostics.
    pub kmeans_runs: usize,
}

impl LossCurve {
    pub fn new(samples: &[f64], b_min: u32, b_max: u32, kmeans: KMeansConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            sorted: prepare_samples(samples, kmeans.batch, seed)?,
            b_min,
            cache: vec![None; b_max as usize + 1],
            kmeans,
            kmeans_runs: 0,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.sorted
    }

    pub fn entry(&mut self, b: u32) -> Result<(Codebook, f64)> {
        let bi = b as usize;
        if b < self.b_min || bi >= self.cache.len() {
            return Err(Error::Input(format!("bit count {b} outside the curve's range")));
        }
        if let Some(e) = &self.cache[bi] {
            return Ok(e.clone());
        }
        let k = 1usize << b;
        let fresh = Codebook::new(kmeans_sorted(&self.sorted, k, &self.kmeans).centers)?;
        self.kmeans_runs += 1;
        let fresh_loss = estimate_quant_loss(&self.sorted, &fresh)?;
        let best = if b > self.b_min {
            let (prev, _) = self.entry(b - 1)?;
            let distinct = {
                let mut d = self.sorted.clone();
                d.dedup();
                d
            };
            let mut init = prev.codewords().to_vec();
            if distinct.len() > k / 2 {
                init.extend(quantile_centers(&self.sorted, &distinct, k / 2));
            } else {
                init.extend(distinct.iter().take(k / 2));
                init.resize(k, *distinct.last().unwrap());
            }
            init.sort_by(f64::total_cmp);
            make_strict(&mut init);
            let seeded = Codebook::new(kmeans_from(&self.sorted, init, &self.kmeans).centers)?;
            self.kmeans_runs += 1;
            let seeded_loss = estimate_quant_loss(&self.sorted, &seeded)?;
            if seeded_loss < fresh_loss {
                (seeded, seeded_loss)
            } else {
                (fresh, fresh_loss)
            }
        } else {
            (fresh, fresh_loss)
        };
        self.cache[bi] = Some(best.clone());
        Ok(best)
    }

    pub fn loss(&mut self, b: u32) -> Result<f64> {
        Ok(self.entry(b)?.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllocConfig {
    pub max_iters: usize,
    /// Minimum total-loss decrease for a move to be accepted.
    pub tol: f64,
    pub kmeans: KMeansConfig,
    pub seed: u64,
}

impl Default for AllocConfig {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            tol: 1e-9,
            kmeans: KMeansConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AllocationOutcome {
    pub allocation: BitAllocation,
    pub bank: CodebookBank,
    /// Total estimated loss before the first and after every accepted move.
    pub loss_history: Vec<f64>,
    pub moves: Vec<(usize, usize)>,
    pub iterations: usize,
}

impl AllocationOutcome {
    pub fn total_loss(&self) -> f64 {
        *self.loss_history.last().unwrap()
    }
}

/// Builds one loss curve per output sample set; output `m` subsamples with `seed + m`.
pub fn loss_curves(
    sample_sets: &[Vec<f64>],
    b_min: u32,
    b_max: u32,
    cfg: &AllocConfig,
) -> Result<Vec<LossCurve>> {
    sample_sets
        .iter()
        .enumerate()
        .map(|(m, s)| LossCurve::new(s, b_min, b_max, cfg.kmeans, cfg.seed.wrapping_add(m as u64)))
        .collect()
}

fn table(curves: &mut [LossCurve], alloc: &BitAllocation) -> Result<AllocationLossTable> {
    let (lo, hi) = alloc.bounds();
    let rows = curves
        .iter_mut()
        .zip(alloc.bits())
        .map(|(c, &b)| {
            Ok(LossRow {
                lower: if b > lo { Some(c.loss(b - 1)?) } else { None },
                current: c.loss(b)?,
                upper: if b < hi { Some(c.loss(b + 1)?) } else { None },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AllocationLossTable { rows })
}

fn total_loss(curves: &mut [LossCurve], alloc: &BitAllocation) -> Result<f64> {
    let mut sum = 0.0;
    for (c, &b) in curves.iter_mut().zip(alloc.bits()) {
        sum += c.loss(b)?;
    }
    Ok(sum)
}

/// Runs the greedy allocation from `start` on prepared loss curves.
pub fn allocate_with_curves(
    curves: &mut [LossCurve],
    start: &BitAllocation,
    cfg: &AllocConfig,
) -> Result<AllocationOutcome> {
    if curves.len() != start.len() {
        return Err(Error::Dimension(format!(
            "{} sample sets for {} outputs",
            curves.len(),
            start.len()
        )));
    }
    let mut alloc = start.clone();
    let mut total = total_loss(curves, &alloc)?;
    let mut history = vec![total];
    let mut moves = Vec::new();
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let t = table(curves, &alloc)?;
        let (d, a) = match select_pair(&t) {
            Ok(p) => p,
            Err(Error::Saturated(_)) => break,
            Err(e) => return Err(e),
        };
        let mut candidate = alloc.clone();
        candidate.transfer(d, a)?;
        let next = total_loss(curves, &candidate)?;
        if next < total - cfg.tol {
            alloc = candidate;
            total = next;
            history.push(total);
            moves.push((d, a));
        } else {
            break;
        }
    }
    let books = curves
        .iter_mut()
        .zip(alloc.bits())
        .map(|(c, &b)| Ok(c.entry(b)?.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(AllocationOutcome {
        allocation: alloc,
        bank: CodebookBank { books },
        loss_history: history,
        moves,
        iterations,
    })
}

/// Greedy bit allocation on per-output sample sets starting from `start`.
pub fn allocate_bits(
    sample_sets: &[Vec<f64>],
    start: &BitAllocation,
    cfg: &AllocConfig,
) -> Result<AllocationOutcome> {
    let (lo, hi) = start.bounds();
    let mut curves = loss_curves(sample_sets, lo, hi, cfg)?;
    allocate_with_curves(&mut curves, start, cfg)
}

/// Greedy allocation of `budget` bits starting from the most even split.
pub fn allocate_budget(
    sample_sets: &[Vec<f64>],
    budget: u32,
    b_min: u32,
    b_max: u32,
    cfg: &AllocConfig,
) -> Result<AllocationOutcome> {
    let m = sample_sets.len() as u32;
    if m == 0 {
        return Err(Error::Config("no outputs to allocate".into()));
    }
    if budget < m * b_min || budget > m * b_max {
        return Err(Error::Config(format!(
            "budget {budget} infeasible for {m} outputs with bounds [{b_min}, {b_max}]"
        )));
    }
    let base = budget / m;
    let extra = budget % m;
    let bits = (0..m).map(|i| base + u32::from(i < extra)).collect();
    allocate_bits(sample_sets, &BitAllocation::new(bits, b_min, b_max)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(lower: Option<f64>, current: f64, upper: Option<f64>) -> LossRow {
        LossRow {
            lower,
            current,
            upper,
        }
    }

    #[test]
    fn decrement_examples() {
        let t = AllocationLossTable {
            rows: vec![row(Some(0.11), 0.1, None), row(Some(1.0), 0.5, None)],
        };
        assert_eq!(select_decrement(&t).unwrap(), 0);
        let t = AllocationLossTable {
            rows: vec![row(Some(1.0), 0.5, None); 3],
        };
        assert_eq!(select_decrement(&t).unwrap(), 0);
        let t = AllocationLossTable {
            rows: vec![row(None, 0.1, None), row(Some(100.0), 0.5, None)],
        };
        assert_eq!(select_decrement(&t).unwrap(), 1);
        let t = AllocationLossTable {
            rows: vec![row(None, 0.1, Some(0.0))],
        };
        assert!(matches!(select_decrement(&t), Err(Error::Saturated(_))));
    }

    #[test]
    fn increment_examples() {
        let t = AllocationLossTable {
            rows: vec![row(None, 0.5, Some(0.49)), row(None, 0.5, Some(0.1))],
        };
        assert_eq!(select_increment(&t).unwrap(), 1);
        let t = AllocationLossTable {
            rows: vec![row(None, 0.5, Some(0.2)); 3],
        };
        assert_eq!(select_increment(&t).unwrap(), 0);
        let t = AllocationLossTable {
            rows: vec![row(None, 0.5, None), row(None, 0.5, Some(0.49))],
        };
        assert_eq!(select_increment(&t).unwrap(), 1);
        let t = AllocationLossTable {
            rows: vec![row(Some(1.0), 0.5, None)],
        };
        assert!(matches!(select_increment(&t), Err(Error::Saturated(_))));
    }

    #[test]
    fn collision_uses_runner_up() {
        // Output 0 is both cheapest to shrink and best to grow.
        let t = AllocationLossTable {
            rows: vec![
                row(Some(0.2), 0.1, Some(0.0)),
                row(Some(0.5), 0.2, Some(0.15)),
                row(Some(0.9), 0.3, Some(0.28)),
            ],
        };
        assert_eq!(select_decrement(&t).unwrap(), 0);
        assert_eq!(select_increment(&t).unwrap(), 0);
        // (0, 1): +0.1 - 0.05 ; (1, 0): +0.3 - 0.1
        assert_eq!(select_pair(&t).unwrap(), (0, 1));
    }

    #[test]
    fn allocation_text_round_trip() {
        let a = BitAllocation::new(vec![1, 3, 2], 1, 8).unwrap();
        let txt = a.to_text();
        assert!(txt.starts_with("# budget 6\n# bounds 1 8\n0 1\n"));
        assert_eq!(BitAllocation::from_text(&txt).unwrap(), a);
        assert!(BitAllocation::from_text("# budget 5\n# bounds 1 8\n0 1\n1 3\n2 2\n").is_err());
        assert!(BitAllocation::from_text("0 1\n").is_err());
    }

    #[test]
    fn allocation_bounds() {
        assert!(BitAllocation::new(vec![0, 2], 0, 8).is_err());
        assert!(BitAllocation::new(vec![9], 1, 8).is_err());
        let mut a = BitAllocation::new(vec![1, 8], 1, 8).unwrap();
        assert!(a.transfer(0, 1).is_err());
        a.transfer(1, 0).unwrap();
        assert_eq!(a.bits(), &[2, 7]);
    }

    #[test]
    fn infeasible_budget() {
        let sets = vec![vec![0.0, 1.0]; 2];
        let r = allocate_budget(&sets, 1, 1, 8, &AllocConfig::default());
        assert!(matches!(r, Err(Error::Config(_))));
        let r = allocate_budget(&sets, 17, 1, 8, &AllocConfig::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
