//! Dense convex QP `min 1/2 x'Qx + c'x  s.t.  Ax = b, Gx <= h` with diagonal
//! `Q`, solved by a Mehrotra predictor-corrector interior-point method.

use nalgebra::{DMatrix, DVector};

use super::GridError;

#[derive(Clone, Debug)]
pub struct QpProblem {
    pub q_diag: DVector<f64>,
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

/// Initial primal point and multipliers.
#[derive(Clone, Debug)]
pub struct Start {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Equality multipliers, Lagrangian sign `+ y'(Ax - b)`.
    pub y: DVector<f64>,
    /// Inequality multipliers, `>= 0`.
    pub z: DVector<f64>,
    /// `h - Gx`.
    pub slack: DVector<f64>,
    pub active: Vec<bool>,
    /// Inequalities whose classification was not clear-cut.
    pub ambiguous: usize,
    pub iterations: usize,
    /// False when the active-set refinement was rejected and the raw
    /// interior-point iterate is returned.
    pub polished: bool,
}

/// Threshold separating zero from nonzero slacks and multipliers.
pub const ACTIVE_TOL: f64 = 1e-7;
const MAX_ITER: usize = 100;
const TOL: f64 = 1e-10;
const DUAL_REG: f64 = 1e-9;
const STEP_FRACTION: f64 = 0.99;

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Largest step in (0, 1] keeping `v + a dv` nonnegative.
fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .fold(1.0, |a, (x, d)| a.min(-x / d))
}

impl QpProblem {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.c.len(), self.b.len(), self.h.len())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.iter().zip(self.q_diag.iter()).map(|(v, q)| q * v * v).sum::<f64>()
            + self.c.dot(x)
    }

    pub fn solve(&self) -> Result<QpSolution, GridError> {
        self.solve_from(None)
    }

    /// Solves from a caller-supplied `(x, y, z)`. Slacks `h - Gx` and
    /// multipliers are lifted to at least a small positive floor, so the
    /// start need not be interior; a strictly feasible one converges best.
    pub fn solve_from(&self, start: Option<Start>) -> Result<QpSolution, GridError> {
        let (n, me, m) = self.dims();
        let scale_d = 1.0 + inf_norm(&self.c);
        let scale_p = 1.0 + inf_norm(&self.b).max(inf_norm(&self.h));
        let gt = self.g.transpose();
        let at = self.a.transpose();
        let (mut x, mut y, mut s, mut z) = match start {
            Some(st) => {
                let s = (&self.h - &self.g * &st.x).map(|v| v.max(1e-2));
                (st.x, st.y, s, st.z.map(|v| v.max(1e-2)))
            }
            None => self.start(&gt, &at)?,
        };
        let linear_only = self.q_diag.iter().all(|&q| q == 0.0);

        for it in 0..MAX_ITER {
            let r_d = self.q_diag.component_mul(&x) + &self.c + &at * &y + &gt * &z;
            let r_p = &self.a * &x - &self.b;
            let r_i = &self.g * &x + &s - &self.h;
            let gap = s.dot(&z);
            let obj = self.objective(&x);
            if inf_norm(&r_d) <= TOL * scale_d
                && inf_norm(&r_p).max(inf_norm(&r_i)) <= TOL * scale_p
                && gap <= TOL * (1.0 + obj.abs())
            {
                return Ok(self.finish(x, y, z, s, it));
            }
            let mu = gap / m as f64;

            // Unreduced Newton system in (dx, dy, dz, ds). Eliminating ds and
            // dz first would be smaller but loses the dual residual to
            // cancellation once z / s spans many orders of magnitude.
            let dim = n + me + 2 * m;
            let (oy, oz, os) = (n, n + me, n + me + m);
            let mut kkt = DMatrix::zeros(dim, dim);
            for i in 0..n {
                kkt[(i, i)] = self.q_diag[i];
            }
            kkt.view_mut((0, oy), (n, me)).copy_from(&at);
            kkt.view_mut((0, oz), (n, m)).copy_from(&gt);
            kkt.view_mut((oy, 0), (me, n)).copy_from(&self.a);
            for i in 0..me {
                kkt[(oy + i, oy + i)] = -DUAL_REG;
            }
            kkt.view_mut((oz, 0), (m, n)).copy_from(&self.g);
            for i in 0..m {
                kkt[(oz + i, os + i)] = 1.0;
                kkt[(os + i, oz + i)] = s[i];
                kkt[(os + i, os + i)] = z[i];
            }
            let lu = kkt.lu();

            // Newton direction for complementarity target `s z = -r_c`.
            let direction = |r_c: &DVector<f64>| -> Option<[DVector<f64>; 4]> {
                let mut rhs = DVector::zeros(dim);
                rhs.rows_mut(0, n).copy_from(&(-&r_d));
                rhs.rows_mut(oy, me).copy_from(&(-&r_p));
                rhs.rows_mut(oz, m).copy_from(&(-&r_i));
                rhs.rows_mut(os, m).copy_from(&(-r_c));
                let sol = lu.solve(&rhs)?;
                Some([
                    sol.rows(0, n).into_owned(),
                    sol.rows(oy, me).into_owned(),
                    sol.rows(os, m).into_owned(),
                    sol.rows(oz, m).into_owned(),
                ])
            };
            let singular = || GridError::Singular(format!("interior-point system at iteration {it}"));

            let r_aff = s.component_mul(&z);
            let [_, _, ds_a, dz_a] = direction(&r_aff).ok_or_else(singular)?;
            let a_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a));
            let mu_aff = (&s + a_aff * &ds_a).dot(&(&z + a_aff * &dz_a)) / m as f64;
            let sigma = (mu_aff / mu).powi(3).min(1.0);

            let r_c = r_aff + ds_a.component_mul(&dz_a) - DVector::from_element(m, sigma * mu);
            let [dx, dy, ds, dz] = direction(&r_c).ok_or_else(singular)?;
            // Separate primal and dual steps are only consistent for LPs;
            // with Q != 0 they would leave a residual proportional to Q dx.
            let mut a_p = (STEP_FRACTION * max_step(&s, &ds)).min(1.0);
            let mut a_d = (STEP_FRACTION * max_step(&z, &dz)).min(1.0);
            if !linear_only {
                (a_p, a_d) = (a_p.min(a_d), a_p.min(a_d));
            }
            x += a_p * dx;
            s += a_p * ds;
            y += a_d * dy;
            z += a_d * dz;
            if !(x.iter().chain(y.iter()).chain(z.iter()).all(|v| v.is_finite())) {
                return Err(GridError::NoConvergence {
                    iterations: it + 1,
                    primal: f64::NAN,
                    dual: f64::NAN,
                    gap: f64::NAN,
                });
            }
        }
        let r_d = self.q_diag.component_mul(&x) + &self.c + &at * &y + &gt * &z;
        let r_i = &self.g * &x + &s - &self.h;
        Err(GridError::NoConvergence {
            iterations: MAX_ITER,
            primal: inf_norm(&(&self.a * &x - &self.b)).max(inf_norm(&r_i)),
            dual: inf_norm(&r_d),
            gap: s.dot(&z),
        })
    }

    /// Least-squares primal and dual points shifted into the interior.
    #[allow(clippy::type_complexity)]
    fn start(
        &self,
        gt: &DMatrix<f64>,
        at: &DMatrix<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>), GridError> {
        let (n, me, _) = self.dims();
        let mut kkt = DMatrix::zeros(n + me, n + me);
        let mut hess = gt * &self.g;
        for i in 0..n {
            hess[(i, i)] += self.q_diag[i];
        }
        kkt.view_mut((0, 0), (n, n)).copy_from(&hess);
        kkt.view_mut((n, 0), (me, n)).copy_from(&self.a);
        kkt.view_mut((0, n), (n, me)).copy_from(at);
        for i in 0..me {
            kkt[(n + i, n + i)] = -DUAL_REG;
        }
        let lu = kkt.lu();
        let singular = || GridError::Singular("interior-point start".into());
        let mut rhs = DVector::zeros(n + me);
        rhs.rows_mut(0, n).copy_from(&(gt * &self.h));
        rhs.rows_mut(n, me).copy_from(&self.b);
        let primal = lu.solve(&rhs).ok_or_else(singular)?;
        let x = primal.rows(0, n).into_owned();
        rhs.rows_mut(0, n).copy_from(&(-&self.c));
        rhs.rows_mut(n, me).fill(0.0);
        let dual = lu.solve(&rhs).ok_or_else(singular)?;
        let y = dual.rows(n, me).into_owned();
        let s = &self.h - &self.g * &x;
        let z = &self.g * dual.rows(0, n);
        let shift = |v: DVector<f64>| {
            let low = v.min();
            let scale = 1.0 + inf_norm(&v);
            if low < 0.0 {
                v.add_scalar(-low + 1e-2 * scale)
            } else {
                v.add_scalar(1e-2 * scale)
            }
        };
        Ok((x, y, shift(s), shift(z)))
    }

    /// Classifies constraints by the larger of slack and multiplier, then
    /// re-solves the equality-constrained system on that active set to
    /// remove the residual barrier offset.
    fn finish(
        &self,
        x: DVector<f64>,
        y: DVector<f64>,
        z: DVector<f64>,
        s: DVector<f64>,
        iterations: usize,
    ) -> QpSolution {
        let active: Vec<bool> = z.iter().zip(s.iter()).map(|(zi, si)| zi > si).collect();
        let raw = QpSolution {
            ambiguous: z
                .iter()
                .zip(s.iter())
                .filter(|(zi, si)| zi.min(**si) > 1e-3 * zi.max(**si))
                .count(),
            x,
            y,
            z,
            slack: s,
            active,
            iterations,
            polished: false,
        };
        match self.polish(&raw) {
            Some(p) => p,
            None => raw,
        }
    }

    fn polish(&self, raw: &QpSolution) -> Option<QpSolution> {
        let (n, me, m) = self.dims();
        let rows: Vec<usize> = (0..m).filter(|&i| raw.active[i]).collect();
        let kkt = self.active_kkt(&rows);
        let mut rhs = DVector::zeros(n + me + rows.len());
        rhs.rows_mut(0, n).copy_from(&(-&self.c));
        rhs.rows_mut(n, me).copy_from(&self.b);
        for (k, &i) in rows.iter().enumerate() {
            rhs[n + me + k] = self.h[i];
        }
        let sol = kkt.clone().lu().solve(&rhs)?;
        if (&kkt * &sol - &rhs).amax() > 1e-8 * (1.0 + rhs.amax()) {
            return None;
        }
        let x = sol.rows(0, n).into_owned();
        let y = sol.rows(n, me).into_owned();
        let mut z = DVector::zeros(m);
        for (k, &i) in rows.iter().enumerate() {
            z[i] = sol[n + me + k];
        }
        let mut slack = &self.h - &self.g * &x;
        let feas = ACTIVE_TOL * (1.0 + inf_norm(&self.h));
        let dual = ACTIVE_TOL * (1.0 + inf_norm(&self.c));
        if slack.iter().any(|v| *v < -feas) || z.iter().any(|v| *v < -dual) {
            return None;
        }
        for &i in &rows {
            slack[i] = 0.0;
        }
        let ambiguous = (0..m)
            .filter(|&i| {
                if raw.active[i] {
                    z[i] <= dual
                } else {
                    slack[i] <= feas
                }
            })
            .count();
        Some(QpSolution {
            x,
            y,
            z: z.map(|v| v.max(0.0)),
            slack: slack.map(|v| v.max(0.0)),
            active: raw.active.clone(),
            ambiguous,
            iterations: raw.iterations,
            polished: true,
        })
    }

    /// `[[Q, A', G_S'], [A, 0, 0], [G_S, 0, 0]]` for the inequality rows `S`.
    pub fn active_kkt(&self, rows: &[usize]) -> DMatrix<f64> {
        let (n, me, _) = self.dims();
        let k = rows.len();
        let mut kkt = DMatrix::zeros(n + me + k, n + me + k);
        for i in 0..n {
            kkt[(i, i)] = self.q_diag[i];
        }
        kkt.view_mut((n, 0), (me, n)).copy_from(&self.a);
        kkt.view_mut((0, n), (n, me)).copy_from(&self.a.transpose());
        for (j, &i) in rows.iter().enumerate() {
            for c in 0..n {
                kkt[(n + me + j, c)] = self.g[(i, c)];
                kkt[(c, n + me + j)] = self.g[(i, c)];
            }
        }
        kkt
    }

    /// Primal minus dual objective.
    pub fn duality_gap(&self, sol: &QpSolution) -> f64 {
        let quad: f64 = sol
            .x
            .iter()
            .zip(self.q_diag.iter())
            .map(|(v, q)| q * v * v)
            .sum();
        let dual = -0.5 * quad - self.b.dot(&sol.y) - self.h.dot(&sol.z);
        self.objective(&sol.x) - dual
    }

    /// Solves the active-set system transposed against `[grad; 0; 0]`. The
    /// result `(u, v)` gives `d(grad' x*) = u' db + v' dh` for right-hand side
    /// perturbations that keep the active set; `v` is zero on inactive rows.
    /// The flag is set when the system was singular and a least-squares
    /// solution was used instead.
    pub fn adjoint(
        &self,
        sol: &QpSolution,
        grad: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, bool) {
        let (n, me, m) = self.dims();
        let rows: Vec<usize> = (0..m).filter(|&i| sol.active[i]).collect();
        let kkt = self.active_kkt(&rows);
        let mut rhs = DVector::zeros(n + me + rows.len());
        rhs.rows_mut(0, n).copy_from(grad);
        let (w, degenerate) = match kkt.clone().lu().solve(&rhs) {
            Some(w) if (&kkt * &w - &rhs).amax() <= 1e-9 * (1.0 + rhs.amax()) => (w, false),
            _ => {
                let svd = kkt.svd(true, true);
                let eps = 1e-10 * svd.singular_values.max();
                (svd.solve(&rhs, eps).expect("both factors computed"), true)
            }
        };
        let u = w.rows(n, me).into_owned();
        let mut v = DVector::zeros(m);
        for (k, &i) in rows.iter().enumerate() {
            v[i] = w[n + me + k];
        }
        (u, v, degenerate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// min x1 + 2 x2 s.t. x1 + x2 = 1, x >= 0, x1 <= 0.7.
    fn small_lp(reg: f64) -> QpProblem {
        QpProblem {
            q_diag: DVector::from_element(2, reg),
            c: DVector::from_vec(vec![1.0, 2.0]),
            a: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            b: DVector::from_vec(vec![1.0]),
            g: DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 0.0]),
            h: DVector::from_vec(vec![0.0, 0.0, 0.7]),
        }
    }

    #[test]
    fn lp_vertex_and_duals() {
        let p = small_lp(0.0);
        let sol = p.solve().unwrap();
        assert!(sol.polished);
        assert!((sol.x[0] - 0.7).abs() < 1e-12 && (sol.x[1] - 0.3).abs() < 1e-12);
        // Marginal unit comes from x2.
        assert!((sol.y[0] + 2.0).abs() < 1e-12);
        assert!((sol.z[2] - 1.0).abs() < 1e-12);
        assert_eq!(sol.active, vec![false, false, true]);
        assert!(p.duality_gap(&sol).abs() < 1e-10);
    }

    #[test]
    fn adjoint_matches_perturbation() {
        let p = small_lp(1e-6);
        let sol = p.solve().unwrap();
        let grad = p.c.clone();
        let (u, v, degenerate) = p.adjoint(&sol, &grad);
        assert!(!degenerate);
        let db = 1e-3;
        let mut q = p.clone();
        q.b[0] += db;
        let x1 = q.solve().unwrap().x;
        let fd = (grad.dot(&x1) - grad.dot(&sol.x)) / db;
        assert!((fd - u[0]).abs() < 1e-6, "{fd} vs {}", u[0]);
        let mut q = p.clone();
        q.h[2] += db;
        let x1 = q.solve().unwrap().x;
        let fd = (grad.dot(&x1) - grad.dot(&sol.x)) / db;
        assert!((fd - v[2]).abs() < 1e-6, "{fd} vs {}", v[2]);
    }

    #[test]
    fn strictly_convex_interior_optimum() {
        // min 1/2 |x|^2 - x1 s.t. x1 + x2 = 0: x = (0.5, -0.5).
        let p = QpProblem {
            q_diag: DVector::from_element(2, 1.0),
            c: DVector::from_vec(vec![-1.0, 0.0]),
            a: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            b: DVector::from_vec(vec![0.0]),
            g: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            h: DVector::from_vec(vec![10.0]),
        };
        let sol = p.solve().unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-12 && (sol.x[1] + 0.5).abs() < 1e-12);
        assert!(!sol.active[0]);
    }
}
