//! Block-coordinate solver.
//!
//! Given the reflectance of every slice, the best `P2` only matters through
//! the slice energies `E_t`, which must be non-negative and sum to the beam
//! energy `W`. That block is solved exactly by water-filling, so the search
//! is over reflectance assignments (and, for the `lambda2` term, over which
//! slices keep any area). Reflectances are updated slice by slice with the
//! energies held fixed, then by joint moves over runs of slices with the
//! energies re-solved. Every accepted step lowers the objective. Small
//! problems skip the descent and enumerate every assignment instead.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{argmin, extract_targets, Matrix, UnmixingProblem, UnmixingResult};
use crate::error::{domain, Result};

/// Enumerate all `(m1 + 1)^n` slice states while the count stays under this.
const EXHAUSTIVE_BUDGET: usize = 1 << 21;
/// Up to this many occupied slices the area support is searched exhaustively.
const EXACT_SUPPORT: usize = 10;
/// Single-slice moves with re-solved energies up to this many slices.
const SLICE_MOVES: usize = 24;
/// Pair-of-slices moves while `n^2 * m1^2` stays under this.
const PAIR_SLICE_BUDGET: usize = 100_000;
/// Pair-of-runs moves while `runs^2 * m1^2` stays under this.
const PAIR_RUN_BUDGET: usize = 20_000;

/// The problem restricted to occupied slices.
struct Reduced<'a> {
    l: Vec<f64>,
    runs: Vec<Range<usize>>,
    psi: &'a [f64],
    w: f64,
    lambda1: f64,
    lambda2: f64,
}

#[derive(Debug, Clone)]
struct Fit {
    cols: Vec<usize>,
    energy: Vec<f64>,
    residual: f64,
    total: f64,
}

impl Fit {
    fn better_than(&self, other: &Fit) -> bool {
        self.total < other.total - 1e-14 * other.total.abs()
    }
}

impl Reduced<'_> {
    fn n(&self) -> usize {
        self.l.len()
    }

    fn distinct(&self, cols: &[usize]) -> usize {
        let mut used = vec![false; self.psi.len()];
        cols.iter().for_each(|&c| used[c] = true);
        used.iter().filter(|&&u| u).count()
    }

    /// Objective of an explicit assignment and energy vector.
    fn fit_from(&self, cols: Vec<usize>, energy: Vec<f64>) -> Fit {
        let residual: f64 = (0..self.n()).map(|t| (self.psi[cols[t]] * energy[t] - self.l[t]).powi(2)).sum();
        let c2 = energy.iter().filter(|&&e| e > 0.0).count();
        let total = residual + self.lambda1 * self.distinct(&cols) as f64 + self.lambda2 * c2 as f64;
        Fit { cols, energy, residual, total }
    }

    /// Minimises `sum (rho_t E_t - L_t)^2` over `E >= 0`, `sum E = W`, with
    /// `E_t = 0` outside `mask`. `None` when the mask is empty.
    fn water_fill(&self, rho: &[f64], mask: &[bool]) -> Option<Vec<f64>> {
        let mut active: Vec<usize> = (0..self.n()).filter(|&t| mask[t]).collect();
        if active.is_empty() {
            return None;
        }
        let a = |t: usize| self.l[t] / rho[t];
        let b = |t: usize| 0.5 / (rho[t] * rho[t]);
        let mut energy = vec![0.0; self.n()];
        loop {
            let sa: f64 = active.iter().map(|&t| a(t)).sum();
            let sb: f64 = active.iter().map(|&t| b(t)).sum();
            let mu = (sa - self.w) / sb;
            let before = active.len();
            active.retain(|&t| a(t) - mu * b(t) > 0.0);
            if active.len() == before || active.is_empty() {
                energy.iter_mut().for_each(|e| *e = 0.0);
                if active.is_empty() {
                    return None;
                }
                for &t in &active {
                    energy[t] = a(t) - mu * b(t);
                }
                // Remove rounding drift so the energies sum to W.
                let sum: f64 = energy.iter().sum();
                energy.iter_mut().for_each(|e| *e *= self.w / sum);
                return Some(energy);
            }
        }
    }

    /// Best energies for `cols`, choosing which slices keep area.
    fn evaluate(&self, cols: &[usize]) -> Fit {
        let rho: Vec<f64> = cols.iter().map(|&c| self.psi[c]).collect();
        let n = self.n();
        let mut best: Option<Fit> = None;
        let consider = |mask: &[bool], best: &mut Option<Fit>| {
            if let Some(e) = self.water_fill(&rho, mask) {
                let f = self.fit_from(cols.to_vec(), e);
                if best.as_ref().is_none_or(|b| f.better_than(b)) {
                    *best = Some(f);
                }
            }
        };
        if n <= EXACT_SUPPORT || self.lambda2 == 0.0 {
            if self.lambda2 == 0.0 {
                consider(&vec![true; n], &mut best);
            } else {
                let mut mask = vec![false; n];
                for bits in (1u32..(1 << n)).rev() {
                    for (t, m) in mask.iter_mut().enumerate() {
                        *m = bits & (1 << t) != 0;
                    }
                    consider(&mask, &mut best);
                }
            }
            return best.expect("a non-empty support always fits");
        }
        // Drop the weakest slices first, then refine by single toggles.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| self.l[x].total_cmp(&self.l[y]).then(x.cmp(&y)));
        let mut best_mask = vec![true; n];
        consider(&best_mask, &mut best);
        let mut mask = vec![true; n];
        for &t in order.iter().take(n - 1) {
            mask[t] = false;
            let before = best.as_ref().map(|b| b.total);
            consider(&mask, &mut best);
            if best.as_ref().map(|b| b.total) != before {
                best_mask.clone_from(&mask);
            }
        }
        for _ in 0..3 {
            let mut changed = false;
            for t in 0..n {
                let mut trial = best_mask.clone();
                trial[t] = !trial[t];
                let before = best.as_ref().map(|b| b.total);
                consider(&trial, &mut best);
                if best.as_ref().map(|b| b.total) != before {
                    best_mask = trial;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        best.expect("the full support always fits")
    }

    /// Reassigns each slice's reflectance with the energies held fixed.
    fn p1_pass(&self, cur: &Fit) -> Fit {
        let m1 = self.psi.len();
        let mut cols = cur.cols.clone();
        let mut count = vec![0usize; m1];
        cols.iter().for_each(|&c| count[c] += 1);
        let mut scores = vec![0.0; m1];
        for t in 0..self.n() {
            count[cols[t]] -= 1;
            for (m, s) in scores.iter_mut().enumerate() {
                let activation = if count[m] == 0 { self.lambda1 } else { 0.0 };
                *s = (self.psi[m] * cur.energy[t] - self.l[t]).powi(2) + activation;
            }
            // Keep the current column on ties so the pass never cycles.
            let pick = argmin(&scores).expect("basis is non-empty");
            if scores[pick] < scores[cols[t]] {
                cols[t] = pick;
            }
            count[cols[t]] += 1;
        }
        self.fit_from(cols, cur.energy.clone())
    }

    fn try_cols(&self, cols: Vec<usize>, best: &mut Fit) -> bool {
        let f = self.evaluate(&cols);
        if f.better_than(best) {
            *best = f;
            true
        } else {
            false
        }
    }

    /// Joint reassignments with energies re-solved; keeps the best found.
    fn joint_moves(&self, cur: Fit) -> Fit {
        let m1 = self.psi.len();
        let n = self.n();
        let mut best = cur;
        for m in 0..m1 {
            self.try_cols(vec![m; n], &mut best);
        }
        if self.runs.len() > 1 {
            for r in 0..self.runs.len() {
                for m in 0..m1 {
                    let mut cols = best.cols.clone();
                    cols[self.runs[r].clone()].iter_mut().for_each(|c| *c = m);
                    self.try_cols(cols, &mut best);
                }
            }
        }
        let runs = self.runs.len();
        if runs > 1 && runs * runs * m1 * m1 <= PAIR_RUN_BUDGET {
            for r1 in 0..runs {
                for r2 in r1 + 1..runs {
                    for m in 0..m1 {
                        for q in 0..m1 {
                            let mut cols = best.cols.clone();
                            cols[self.runs[r1].clone()].iter_mut().for_each(|c| *c = m);
                            cols[self.runs[r2].clone()].iter_mut().for_each(|c| *c = q);
                            self.try_cols(cols, &mut best);
                        }
                    }
                }
            }
        }
        if n <= SLICE_MOVES {
            for t in 0..n {
                for m in 0..m1 {
                    if m != best.cols[t] {
                        let mut cols = best.cols.clone();
                        cols[t] = m;
                        self.try_cols(cols, &mut best);
                    }
                }
            }
        }
        if n * n * m1 * m1 <= PAIR_SLICE_BUDGET {
            for t in 0..n {
                for u in t + 1..n {
                    for m in 0..m1 {
                        for q in 0..m1 {
                            let mut cols = best.cols.clone();
                            cols[t] = m;
                            cols[u] = q;
                            self.try_cols(cols, &mut best);
                        }
                    }
                }
            }
        }
        best
    }

    /// Global minimum over every slice being empty or taking any column.
    /// Empty slices borrow the column of the nearest slice with area.
    fn enumerate(&self) -> Fit {
        let n = self.n();
        let m1 = self.psi.len();
        let mut state = vec![0usize; n];
        let mut best: Option<(f64, Vec<usize>, Vec<f64>)> = None;
        let mut rho = vec![1.0; n];
        let mut active = Vec::with_capacity(n);
        let mut energy = vec![0.0; n];
        loop {
            let mut i = 0;
            while i < n {
                state[i] += 1;
                if state[i] <= m1 {
                    break;
                }
                state[i] = 0;
                i += 1;
            }
            if i == n {
                break;
            }
            active.clear();
            let mut used = 0u64;
            for t in 0..n {
                if state[t] > 0 {
                    rho[t] = self.psi[state[t] - 1];
                    active.push(t);
                    used |= 1 << (state[t] - 1);
                }
            }
            if !self.fill_into(&rho, &mut active, &mut energy) {
                continue;
            }
            let residual: f64 = (0..n).map(|t| if state[t] > 0 { rho[t] * energy[t] - self.l[t] } else { -self.l[t] }.powi(2)).sum();
            let total = residual + self.lambda1 * used.count_ones() as f64 + self.lambda2 * active.len() as f64;
            if best.as_ref().is_none_or(|b| total < b.0 - 1e-14 * b.0.abs()) {
                best = Some((total, state.clone(), energy.clone()));
            }
        }
        let (_, state, energy) = best.expect("a single occupied slice always fits");
        let cols: Vec<usize> = (0..n)
            .map(|t| {
                let src = (0..n).filter(|&u| energy[u] > 0.0).min_by_key(|&u| u.abs_diff(t)).unwrap_or(t);
                state[src].max(1) - 1
            })
            .collect();
        self.fit_from(cols, energy)
    }

    /// Allocation-free [`Self::water_fill`] over the slices in `active`,
    /// which is pruned to the slices keeping energy. False when none do.
    fn fill_into(&self, rho: &[f64], active: &mut Vec<usize>, energy: &mut [f64]) -> bool {
        energy.iter_mut().for_each(|e| *e = 0.0);
        loop {
            let (mut sa, mut sb) = (0.0, 0.0);
            for &t in active.iter() {
                sa += self.l[t] / rho[t];
                sb += 0.5 / (rho[t] * rho[t]);
            }
            let mu = (sa - self.w) / sb;
            let before = active.len();
            active.retain(|&t| self.l[t] / rho[t] - mu * 0.5 / (rho[t] * rho[t]) > 0.0);
            if active.is_empty() {
                return false;
            }
            if active.len() == before {
                let mut sum = 0.0;
                for &t in active.iter() {
                    energy[t] = self.l[t] / rho[t] - mu * 0.5 / (rho[t] * rho[t]);
                    sum += energy[t];
                }
                for &t in active.iter() {
                    energy[t] *= self.w / sum;
                }
                return true;
            }
        }
    }

    fn descend(&self, start: Vec<usize>, max_iters: usize, tol: f64) -> (Fit, Vec<f64>, bool, usize) {
        let mut cur = self.evaluate(&start);
        let mut history = vec![cur.total];
        for it in 0..max_iters {
            let prev = cur.total;
            let fixed = self.p1_pass(&cur);
            if fixed.better_than(&cur) {
                cur = fixed;
            }
            let refit = self.evaluate(&cur.cols);
            if refit.better_than(&cur) {
                cur = refit;
            }
            cur = self.joint_moves(cur);
            history.push(cur.total);
            if prev - cur.total <= tol * prev.abs().max(f64::MIN_POSITIVE) {
                return (cur, history, true, it + 1);
            }
        }
        (cur, history, false, max_iters)
    }
}

/// Solves the unmixing program from one deterministic and several jittered
/// starts; the lowest objective wins, ties going to the earliest start.
pub fn solve_unmixing(problem: &UnmixingProblem) -> Result<UnmixingResult> {
    problem.validate()?;
    let values = &problem.lrcs.values;
    let t_len = values.len();
    let peak = values.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return domain("the LRCS carries no energy");
    }
    let cutoff = problem.options.occupancy_threshold * peak;
    let slices: Vec<usize> = (0..t_len).filter(|&t| values[t] > 0.0 && values[t] >= cutoff).collect();
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=slices.len() {
        if i == slices.len() || slices[i] != slices[i - 1] + 1 {
            runs.push(start..i);
            start = i;
        }
    }
    let w = problem.s_basis.total_energy();
    let red = Reduced {
        l: slices.iter().map(|&t| values[t]).collect(),
        runs,
        psi: problem.psi.values(),
        w,
        lambda1: problem.lambda1,
        lambda2: problem.lambda2,
    };

    let n = slices.len();
    let merged = red.l.iter().sum::<f64>() / w;
    let opts = problem.options;
    let small = problem.psi.len() <= 64 && (problem.psi.len() + 1).checked_pow(n as u32).is_some_and(|c| c <= EXHAUSTIVE_BUDGET);
    let restarts = if small { 0 } else { opts.restarts };
    let starts: Vec<Vec<usize>> = (0..=restarts)
        .map(|i| {
            if i == 0 {
                return vec![problem.psi.nearest(merged); n];
            }
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64);
            (0..n).map(|_| problem.psi.nearest(merged * (1.0 + 0.5 * rng.random_range(-1.0..1.0)))).collect()
        })
        .collect();
    let outcomes: Vec<_> = starts
        .into_par_iter()
        .map(|s| {
            if small {
                let fit = red.enumerate();
                let total = fit.total;
                (fit, vec![total], true, 1)
            } else {
                red.descend(s, opts.max_outer_iters, opts.tolerance)
            }
        })
        .collect();
    let (fit, history, converged, iterations) = outcomes
        .into_iter()
        .reduce(|a, b| if b.0.total < a.0.total { b } else { a })
        .expect("at least one start");

    // Lift back to every slice. Empty slices borrow the column of the nearest
    // occupied slice so they add no reflectance to the count.
    let mut p1 = vec![0usize; t_len];
    let mut energy = vec![0.0; t_len];
    for (i, &t) in slices.iter().enumerate() {
        p1[t] = fit.cols[i];
        energy[t] = fit.energy[i];
    }
    for t in 0..t_len {
        if values[t] > 0.0 && values[t] >= cutoff {
            continue;
        }
        let nearest = slices
            .iter()
            .enumerate()
            .min_by_key(|(_, &s)| s.abs_diff(t))
            .map(|(i, _)| i)
            .expect("at least one occupied slice");
        p1[t] = fit.cols[nearest];
    }
    let budgets = problem.s_basis.budgets();
    let mut p2 = Matrix::zeros(t_len, budgets.len());
    for (t, &e) in energy.iter().enumerate() {
        if e > 0.0 {
            for (k, b) in budgets.iter().enumerate() {
                p2.set(t, k, e / w * b);
            }
        }
    }
    let rho_t: Vec<f64> = p1.iter().map(|&c| problem.psi.values()[c]).collect();
    let area_t: Vec<f64> = (0..t_len)
        .map(|t| p2.row(t).iter().zip(problem.s_basis.densities()).map(|(a, b)| a * b).sum())
        .collect();
    // Residual of the slices left out as empty.
    let dropped: f64 = (0..t_len).filter(|&t| !(values[t] > 0.0 && values[t] >= cutoff)).map(|t| values[t] * values[t]).sum();
    let c1 = red.distinct(&fit.cols);
    let c2 = energy.iter().filter(|&&e| e > 0.0).count();
    let targets = extract_targets(&p1, &p2, &problem.psi, &problem.s_basis);
    Ok(UnmixingResult {
        p1,
        p2,
        rho_t,
        area_t,
        targets,
        residual: fit.residual + dropped,
        c1,
        c2,
        objective: fit.total + dropped,
        history: history.into_iter().map(|h| h + dropped).collect(),
        converged,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::LrcsSeries;
    use crate::unmix::{objective, EnergyDensityBasis, ReflectanceBasis};

    fn s_basis() -> EnergyDensityBasis {
        EnergyDensityBasis::new(vec![4.0, 2.0, 1.0], 0.25).unwrap()
    }

    fn problem(values: Vec<f64>, psi: ReflectanceBasis) -> UnmixingProblem {
        UnmixingProblem::new(LrcsSeries::new(values, 0.2e-9, 50.0).unwrap(), psi, s_basis())
    }

    #[test]
    fn single_extended_target() {
        let w = s_basis().total_energy();
        let mut v = vec![0.0; 8];
        v[3] = 0.5 * w;
        let r = solve_unmixing(&problem(v, ReflectanceBasis::uniform(4).unwrap())).unwrap();
        assert_eq!(r.targets.len(), 1);
        assert_eq!(r.targets[0].reflectance, 0.5);
        assert!(r.residual < 1e-10);
        assert!(r.converged);
        assert!((r.targets[0].area_m2 - s_basis().total_area()).abs() < 1e-12);
    }

    #[test]
    fn two_targets_with_zero_slices_between() {
        let w = s_basis().total_energy();
        let mut v = vec![0.0; 8];
        v[1] = 0.3 * 0.4 * w;
        v[6] = 0.9 * 0.6 * w;
        // No other pair from this basis satisfies L1/r1 + L2/r2 = W.
        let pr = problem(v.clone(), ReflectanceBasis::library(&[0.3, 0.6, 0.9]).unwrap());
        let r = solve_unmixing(&pr).unwrap();
        assert_eq!(r.targets.len(), 2);
        assert_eq!(r.targets[0].reflectance, 0.3);
        assert_eq!(r.targets[1].reflectance, 0.9);
        assert!((r.targets[0].energy / w - 0.4).abs() < 1e-9);
        for (t, &x) in v.iter().enumerate().take(8) {
            if x == 0.0 {
                assert_eq!(r.area_t[t], 0.0);
            }
        }
        let o = objective(&r.p1_dense(3), &r.p2, &pr).unwrap();
        assert!((o.total - r.objective).abs() < 1e-12 * r.objective.max(1e-30));
        for h in r.history.windows(2) {
            assert!(h[1] <= h[0]);
        }
    }

    #[test]
    fn huge_column_penalty_uses_one_column() {
        let w = s_basis().total_energy();
        let v = vec![0.0, 0.25 * 0.5 * w, 0.0, 0.0, 0.75 * 0.5 * w, 0.0];
        let pr = problem(v, ReflectanceBasis::uniform(4).unwrap()).with_lambdas(1e6, 0.0);
        let r = solve_unmixing(&pr).unwrap();
        assert_eq!(r.c1, 1);
    }

    #[test]
    fn scale_invariance() {
        let w = s_basis().total_energy();
        let v = vec![0.3 * 0.5 * w, 0.3 * 0.2 * w, 0.0, 0.9 * 0.3 * w];
        let psi = ReflectanceBasis::library(&[0.3, 0.6, 0.9]).unwrap();
        let a = solve_unmixing(&problem(v.clone(), psi.clone())).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| x * 3.0).collect();
        let pb = UnmixingProblem::new(LrcsSeries::new(scaled, 0.2e-9, 50.0).unwrap(), psi, s_basis().scaled(3.0).unwrap());
        let b = solve_unmixing(&pb).unwrap();
        assert_eq!(a.rho_t, b.rho_t);
        for (x, y) in a.area_t.iter().zip(&b.area_t) {
            assert!((3.0 * x - y).abs() < 1e-9 * y.abs().max(1e-30));
        }
    }

    #[test]
    fn empty_lrcs_is_rejected() {
        assert!(solve_unmixing(&problem(vec![0.0; 4], ReflectanceBasis::uniform(4).unwrap())).is_err());
    }
}
