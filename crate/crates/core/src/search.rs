//! Bounded optimisation on the unit square (coarse lattice + Nelder-Mead)
//! and an unconstrained BFGS used for hyperparameter fitting.

/// Lattice scan followed by simplex refinement from the best cells.
///
/// Lattice points are visited wavelength-major, so among exactly equal
/// values the lowest-lexicographic point wins. Refinement only replaces
/// the lattice winner on strict improvement, so the result is never worse
/// than the best lattice value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxSearch {
    pub nx: usize,
    pub ny: usize,
    pub top_k: usize,
    /// Objective evaluations per simplex run.
    pub max_evals: usize,
}

impl Default for BoxSearch {
    fn default() -> Self {
        Self {
            nx: 41,
            ny: 31,
            top_k: 5,
            max_evals: 200,
        }
    }
}

impl BoxSearch {
    /// Dense lattice used to locate surface optima.
    pub fn fine() -> Self {
        Self {
            nx: 401,
            ny: 301,
            top_k: 5,
            max_evals: 200,
        }
    }

    pub fn lattice_point(&self, i: usize, j: usize) -> [f64; 2] {
        [
            i as f64 / (self.nx - 1) as f64,
            j as f64 / (self.ny - 1) as f64,
        ]
    }

    /// Best lattice point only.
    pub fn scan<F: FnMut([f64; 2]) -> f64>(&self, mut f: F) -> ([f64; 2], f64) {
        let mut best = (self.lattice_point(0, 0), f64::NEG_INFINITY);
        let mut first = true;
        for i in 0..self.nx {
            for j in 0..self.ny {
                let u = self.lattice_point(i, j);
                let v = sanitize(f(u));
                if first || v > best.1 {
                    best = (u, v);
                    first = false;
                }
            }
        }
        best
    }

    /// Maximises `f` over `[0, 1]²`.
    pub fn maximize<F: FnMut([f64; 2]) -> f64>(&self, f: F) -> ([f64; 2], f64) {
        self.maximize_with(f, &[])
    }

    /// As [`maximize`](Self::maximize), with `extra` points scored next to
    /// the lattice and eligible as refinement starts.
    pub fn maximize_with<F: FnMut([f64; 2]) -> f64>(&self, mut f: F, extra: &[[f64; 2]]) -> ([f64; 2], f64) {
        let mut cells: Vec<([f64; 2], f64)> = Vec::with_capacity(self.nx * self.ny + extra.len());
        for i in 0..self.nx {
            for j in 0..self.ny {
                let u = self.lattice_point(i, j);
                cells.push((u, sanitize(f(u))));
            }
        }
        for &u in extra {
            let u = clamp_unit(u);
            cells.push((u, sanitize(f(u))));
        }
        // Stable sort keeps lexicographic order among ties.
        cells.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut best = cells[0];
        let step = [1.0 / (self.nx - 1) as f64, 1.0 / (self.ny - 1) as f64];
        for &(start, value) in cells.iter().take(self.top_k) {
            let (u, v) = nelder_mead_max(&mut f, start, value, step, self.max_evals);
            if v > best.1 {
                best = (u, v);
            }
        }
        best
    }

    /// Minimises `f` over `[0, 1]²`.
    pub fn minimize<F: FnMut([f64; 2]) -> f64>(&self, f: F) -> ([f64; 2], f64) {
        self.minimize_with(f, &[])
    }

    pub fn minimize_with<F: FnMut([f64; 2]) -> f64>(&self, mut f: F, extra: &[[f64; 2]]) -> ([f64; 2], f64) {
        let (u, v) = self.maximize_with(|u| -f(u), extra);
        (u, -v)
    }
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

fn clamp_unit(u: [f64; 2]) -> [f64; 2] {
    [u[0].clamp(0.0, 1.0), u[1].clamp(0.0, 1.0)]
}

/// Nelder-Mead maximisation in two dimensions with vertices projected
/// onto the unit square.
fn nelder_mead_max<F: FnMut([f64; 2]) -> f64>(
    f: &mut F,
    start: [f64; 2],
    start_value: f64,
    step: [f64; 2],
    max_evals: usize,
) -> ([f64; 2], f64) {
    let mut evals = 0usize;
    let mut eval = |u: [f64; 2], evals: &mut usize| {
        *evals += 1;
        sanitize(f(u))
    };
    // Step towards the interior so the initial simplex is non-degenerate.
    let toward = |x: f64, h: f64| if x + h <= 1.0 { x + h } else { x - h };
    let p1 = [toward(start[0], step[0]), start[1]];
    let p2 = [start[0], toward(start[1], step[1])];
    let mut simplex = vec![(start, start_value)];
    for p in [p1, p2] {
        if evals >= max_evals {
            return (start, start_value);
        }
        let v = eval(p, &mut evals);
        simplex.push((p, v));
    }

    while evals < max_evals {
        simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
        let (best, worst) = (simplex[0], simplex[2]);
        let size = (0..2)
            .map(|d| (simplex[1].0[d] - best.0[d]).abs().max((worst.0[d] - best.0[d]).abs()))
            .fold(0.0, f64::max);
        if size < 1e-10 {
            break;
        }
        let c = [
            0.5 * (simplex[0].0[0] + simplex[1].0[0]),
            0.5 * (simplex[0].0[1] + simplex[1].0[1]),
        ];
        let along = |t: f64| clamp_unit([c[0] + t * (worst.0[0] - c[0]), c[1] + t * (worst.0[1] - c[1])]);

        let xr = along(-1.0);
        let fr = eval(xr, &mut evals);
        if fr > best.1 {
            if evals >= max_evals {
                simplex[2] = (xr, fr);
                break;
            }
            let xe = along(-2.0);
            let fe = eval(xe, &mut evals);
            simplex[2] = if fe > fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr > simplex[1].1 {
            simplex[2] = (xr, fr);
            continue;
        }
        if evals >= max_evals {
            break;
        }
        let (xc, fc) = if fr > worst.1 {
            let x = along(-0.5);
            (x, eval(x, &mut evals))
        } else {
            let x = along(0.5);
            (x, eval(x, &mut evals))
        };
        if fc > worst.1.max(fr) {
            simplex[2] = (xc, fc);
            continue;
        }
        // Shrink towards the best vertex.
        for k in 1..3 {
            if evals >= max_evals {
                break;
            }
            let p = simplex[k].0;
            let x = [0.5 * (best.0[0] + p[0]), 0.5 * (best.0[1] + p[1])];
            simplex[k] = (x, eval(x, &mut evals));
        }
    }
    simplex
        .into_iter()
        .fold((start, start_value), |acc, s| if s.1 > acc.1 { s } else { acc })
}

/// Outcome of a BFGS run.
#[derive(Clone, Debug)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    /// The first line search failed before any progress was made.
    pub stalled: bool,
}

/// Minimises a smooth function given value and gradient. The closure
/// returns `None` where the function is undefined; the line search backs
/// off from such points.
pub fn bfgs_minimize<F>(mut f: F, x0: &[f64], max_iters: usize, max_step: f64) -> Option<BfgsResult>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let (mut fx, mut g) = f(x0)?;
    if !fx.is_finite() {
        return None;
    }
    let mut x = x0.to_vec();
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    let mut stalled = false;
    let mut iters = 0;
    while iters < max_iters {
        let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gnorm < 1e-8 {
            break;
        }
        let mut d: Vec<f64> = (0..n).map(|i| -(0..n).map(|j| h[i * n + j] * g[j]).sum::<f64>()).collect();
        let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            // Lost descent; restart from steepest descent.
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] = if i == j { 1.0 } else { 0.0 };
                }
            }
            d = g.iter().map(|v| -v).collect();
            slope = -g.iter().map(|v| v * v).sum::<f64>();
        }
        let dnorm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut t = if dnorm > max_step { max_step / dnorm } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            if let Some((fn_, gn)) = f(&xn) {
                if fn_.is_finite() && fn_ <= fx + 1e-4 * t * slope {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            stalled = iters == 0;
            break;
        };
        iters += 1;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let improvement = fx - fn_;
        x = xn;
        fx = fn_;
        g = gn;
        if sy > 1e-12 {
            // Inverse-Hessian update: H ← (I − ρsyᵀ) H (I − ρysᵀ) + ρssᵀ.
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        if improvement.abs() <= 1e-12 * (1.0 + fx.abs()) {
            break;
        }
    }
    Some(BfgsResult {
        x,
        value: fx,
        iterations: iters,
        stalled,
    })
}
