use crate::error::{Error, Result};

/// Dense row-major square kernel in `f64`.
#[derive(Clone, Debug)]
pub(crate) struct Dense {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Dense {
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn principal(&self, idx: &[usize]) -> Dense {
        let mut data = Vec::with_capacity(idx.len() * idx.len());
        for &r in idx {
            data.extend(idx.iter().map(|&c| self.at(r, c)));
        }
        Dense { n: idx.len(), data }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Solution {
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
}

const TAU: f64 = 1e-12;

/// C-SVC dual by sequential minimal optimization with second-order working
/// set selection; stops when the maximal KKT violation falls below `tol`.
pub(crate) fn solve(k: &Dense, y: &[f64], c: f64, tol: f64, max_iter: usize) -> Result<Solution> {
    let n = k.n;
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let upper = |a: f64| a >= c;
    let lower = |a: f64| a <= 0.0;
    let mut iterations = 0;
    loop {
        // i maximizes -y G over the up set
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            let a = alpha[t];
            let v = -y[t] * grad[t];
            let in_up = if y[t] > 0.0 { !upper(a) } else { !lower(a) };
            if in_up && v >= gmax {
                gmax = v;
                i = t;
            }
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            let a = alpha[t];
            let in_low = if y[t] > 0.0 { !lower(a) } else { !upper(a) };
            if !in_low {
                continue;
            }
            let v = y[t] * grad[t];
            if v >= gmax2 {
                gmax2 = v;
            }
            if i == usize::MAX {
                continue;
            }
            let diff = gmax + v;
            if diff > 0.0 {
                let mut quad = k.at(i, i) + k.at(t, t) - 2.0 * k.at(i, t);
                if quad <= 0.0 {
                    quad = TAU;
                }
                let obj = -diff * diff / quad;
                if obj <= best {
                    best = obj;
                    j = t;
                }
            }
        }
        if gmax + gmax2 < tol || i == usize::MAX || j == usize::MAX {
            break;
        }
        if iterations == max_iter {
            return Err(Error::NonConvergence { what: "SMO solver", iterations });
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let kij = k.at(i, j);
        if y[i] != y[j] {
            let mut quad = k.at(i, i) + k.at(j, j) + 2.0 * (y[i] * y[j] * kij);
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = k.at(i, i) + k.at(j, j) - 2.0 * kij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let di = alpha[i] - old_i;
        let dj = alpha[j] - old_j;
        let (yi, yj) = (y[i], y[j]);
        let ri = &k.data[i * n..(i + 1) * n];
        let rj = &k.data[j * n..(j + 1) * n];
        for t in 0..n {
            grad[t] += y[t] * (yi * ri[t] * di + yj * rj[t] * dj);
        }
    }

    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut sum_free) = (0usize, 0.0);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if upper(alpha[t]) {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if lower(alpha[t]) {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum_free += yg;
        }
    }
    let rho = if free > 0 { sum_free / free as f64 } else { (ub + lb) / 2.0 };
    Ok(Solution { alpha, rho, iterations })
}

#[cfg(test)]
pub(crate) fn dual_objective(k: &Dense, y: &[f64], alpha: &[f64]) -> f64 {
    let n = k.n;
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += alpha[i] * alpha[j] * y[i] * y[j] * k.at(i, j);
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Exhaustive active-set enumeration: every assignment of each variable
    /// to {0, C, free}, free variables solved from the stationarity system
    /// with the equality constraint; best feasible dual objective.
    pub(crate) fn brute_force_dual(k: &Dense, y: &[f64], c: f64) -> f64 {
        let n = k.n;
        let mut best = f64::NEG_INFINITY;
        for code in 0..3usize.pow(n as u32) {
            let mut state = vec![0u8; n];
            let mut x = code;
            for s in state.iter_mut() {
                *s = (x % 3) as u8;
                x /= 3;
            }
            let free: Vec<usize> = (0..n).filter(|&t| state[t] == 2).collect();
            let mut alpha: Vec<f64> = state.iter().map(|&s| if s == 1 { c } else { 0.0 }).collect();
            if !free.is_empty() {
                // unknowns: alpha_free and the multiplier b
                let m = free.len() + 1;
                let mut a = vec![0.0; m * m];
                let mut rhs = vec![0.0; m];
                for (r, &p) in free.iter().enumerate() {
                    let mut fixed = 0.0;
                    for t in 0..n {
                        if state[t] == 1 {
                            fixed += y[p] * y[t] * k.at(p, t) * c;
                        }
                    }
                    for (s, &q) in free.iter().enumerate() {
                        a[r * m + s] = y[p] * y[q] * k.at(p, q);
                    }
                    a[r * m + free.len()] = y[p];
                    rhs[r] = 1.0 - fixed;
                }
                for (s, &q) in free.iter().enumerate() {
                    a[free.len() * m + s] = y[q];
                }
                rhs[free.len()] = -(0..n).filter(|&t| state[t] == 1).map(|t| y[t] * c).sum::<f64>();
                let Some(sol) = gauss(a, rhs, m) else { continue };
                for (s, &q) in free.iter().enumerate() {
                    alpha[q] = sol[s];
                }
            }
            let feasible = alpha.iter().all(|&v| v >= -1e-9 && v <= c + 1e-9)
                && alpha.iter().zip(y).map(|(a, y)| a * y).sum::<f64>().abs() < 1e-9;
            if feasible {
                best = best.max(dual_objective(k, y, &alpha));
            }
        }
        best
    }

    fn gauss(mut a: Vec<f64>, mut b: Vec<f64>, m: usize) -> Option<Vec<f64>> {
        for col in 0..m {
            let piv = (col..m).max_by(|&r, &s| a[r * m + col].abs().total_cmp(&a[s * m + col].abs()))?;
            if a[piv * m + col].abs() < 1e-12 {
                return None;
            }
            for k in 0..m {
                a.swap(col * m + k, piv * m + k);
            }
            b.swap(col, piv);
            for r in 0..m {
                if r != col {
                    let f = a[r * m + col] / a[col * m + col];
                    for k in 0..m {
                        a[r * m + k] -= f * a[col * m + k];
                    }
                    b[r] -= f * b[col];
                }
            }
        }
        Some((0..m).map(|r| b[r] / a[r * m + r]).collect())
    }

    pub(crate) fn linear_gram(points: &[[f64; 2]]) -> Dense {
        let n = points.len();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = points[i][0] * points[j][0] + points[i][1] * points[j][1];
            }
        }
        Dense { n, data }
    }

    #[test]
    fn two_orthonormal_points() {
        let k = Dense { n: 2, data: vec![1.0, 0.0, 0.0, 1.0] };
        let s = solve(&k, &[1.0, -1.0], 10.0, 1e-3, 1000).unwrap();
        assert!((s.alpha[0] - 1.0).abs() < 1e-12 && (s.alpha[1] - 1.0).abs() < 1e-12);
        assert!(s.rho.abs() < 1e-12);
    }

    #[test]
    fn contradictory_duplicates_sit_at_bound() {
        let k = Dense { n: 2, data: vec![1.0; 4] };
        let s = solve(&k, &[1.0, -1.0], 0.1, 1e-3, 1000).unwrap();
        assert_eq!(s.alpha, vec![0.1, 0.1]);
        assert!((brute_force_dual(&k, &[1.0, -1.0], 0.1) - dual_objective(&k, &[1.0, -1.0], &s.alpha)).abs() < 1e-12);
    }

    #[test]
    fn matches_enumeration_on_tiny_instances() {
        let mut rng = Rng::new(31);
        for trial in 0..200 {
            let n = 2 + trial % 3;
            let points: Vec<[f64; 2]> = (0..n).map(|_| [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)]).collect();
            let mut y: Vec<f64> = (0..n).map(|_| if rng.below(2) == 0 { -1.0 } else { 1.0 }).collect();
            y[0] = 1.0;
            y[1] = -1.0;
            let c = [0.1, 1.0, 10.0][trial % 3];
            let k = linear_gram(&points);
            let s = solve(&k, &y, c, 1e-3, 100_000).unwrap();
            let got = dual_objective(&k, &y, &s.alpha);
            let want = brute_force_dual(&k, &y, c);
            assert!((got - want).abs() < 1e-4, "trial {trial}: {got} vs {want}");
        }
    }
}
