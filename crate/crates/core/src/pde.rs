//! Finite-difference discretization of
//! `a ẅ + b ẇ = c Δw + d` with Neumann data `∂w/∂p = e` on every face.
//!
//! Grid points are numbered with axis 0 fastest. Boundary rows eliminate the
//! fictitious point through the central-difference boundary condition, and
//! actuator points are removed from the state: their neighbours read the
//! matching input component instead.

use std::fmt;
use std::sync::Arc;

use crate::dynamics::{Dynamics, HessEntry, Linearization, RowPattern};
use crate::error::{Error, Result};
use crate::Real;

/// Value and derivatives of a coefficient function of `(u, w)`.
///
/// `du`, `duw` and `duu` (row-major `n_u x n_u`) are empty for coefficients
/// that do not depend on the input.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoeffDerivs<T> {
    pub value: T,
    pub dw: T,
    pub dww: T,
    pub du: Vec<T>,
    pub duw: Vec<T>,
    pub duu: Vec<T>,
}

type StateFn<T> = Arc<dyn Fn(T) -> [T; 3] + Send + Sync>;
type GeneralFn<T> = Arc<dyn Fn(&[T], T, &mut CoeffDerivs<T>) + Send + Sync>;

/// A twice-differentiable scalar function of `(u, w)`.
#[derive(Clone)]
pub enum Coefficient<T> {
    Constant(T),
    /// `Σ_k c_k w^k`.
    Polynomial(Vec<T>),
    /// Closure of `w` returning `[value, d/dw, d²/dw²]`.
    State(StateFn<T>),
    /// Closure of `(u, w)` filling every derivative; the output vectors arrive
    /// zeroed with lengths `n_u`, `n_u`, `n_u²`.
    General(GeneralFn<T>),
}

impl<T: Real> Coefficient<T> {
    pub fn zero() -> Self {
        Coefficient::Constant(T::zero())
    }

    pub fn state(f: impl Fn(T) -> [T; 3] + Send + Sync + 'static) -> Self {
        Coefficient::State(Arc::new(f))
    }

    pub fn general(f: impl Fn(&[T], T, &mut CoeffDerivs<T>) + Send + Sync + 'static) -> Self {
        Coefficient::General(Arc::new(f))
    }

    pub fn depends_on_input(&self) -> bool {
        matches!(self, Coefficient::General(_))
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Coefficient::Constant(c) => *c == T::zero(),
            Coefficient::Polynomial(c) => c.iter().all(|v| *v == T::zero()),
            _ => false,
        }
    }

    pub fn value(&self, u: &[T], w: T) -> T {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::Polynomial(c) => c.iter().rev().fold(T::zero(), |acc, k| acc * w + *k),
            Coefficient::State(f) => f(w)[0],
            Coefficient::General(_) => {
                let mut d = CoeffDerivs::default();
                self.eval(u, w, &mut d);
                d.value
            }
        }
    }

    /// Fills `out` with value and derivatives at `(u, w)`.
    pub fn eval(&self, u: &[T], w: T, out: &mut CoeffDerivs<T>) {
        out.du.clear();
        out.duw.clear();
        out.duu.clear();
        match self {
            Coefficient::Constant(c) => {
                out.value = *c;
                out.dw = T::zero();
                out.dww = T::zero();
            }
            Coefficient::Polynomial(c) => {
                let (mut p, mut dp, mut ddp) = (T::zero(), T::zero(), T::zero());
                for k in c.iter().rev() {
                    ddp = ddp * w + dp + dp;
                    dp = dp * w + p;
                    p = p * w + *k;
                }
                out.value = p;
                out.dw = dp;
                out.dww = ddp;
            }
            Coefficient::State(f) => {
                let [v, d1, d2] = f(w);
                out.value = v;
                out.dw = d1;
                out.dww = d2;
            }
            Coefficient::General(f) => {
                let n = u.len();
                out.value = T::zero();
                out.dw = T::zero();
                out.dww = T::zero();
                out.du.resize(n, T::zero());
                out.duw.resize(n, T::zero());
                out.duu.resize(n * n, T::zero());
                f(u, w, out);
            }
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Coefficient<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Constant(c) => write!(f, "Constant({c:?})"),
            Coefficient::Polynomial(c) => write!(f, "Polynomial({c:?})"),
            Coefficient::State(_) => f.write_str("State(<fn>)"),
            Coefficient::General(_) => f.write_str("General(<fn>)"),
        }
    }
}

/// PDE of the class `a ẅ + b ẇ = c Δw + d`, `∂w/∂p = e` on the boundary.
#[derive(Debug, Clone)]
pub struct PdeModel<T> {
    pub sides: Vec<T>,
    pub time_order: usize,
    pub a: Coefficient<T>,
    pub b: Coefficient<T>,
    pub c: Coefficient<T>,
    pub d: Coefficient<T>,
    pub e: Coefficient<T>,
}

impl<T: Real> PdeModel<T> {
    /// `b ẇ = c Δw + d` on a box with the given side lengths.
    pub fn first_order(
        sides: Vec<T>,
        b: Coefficient<T>,
        c: Coefficient<T>,
        d: Coefficient<T>,
        e: Coefficient<T>,
    ) -> Self {
        Self { sides, time_order: 1, a: Coefficient::zero(), b, c, d, e }
    }

    pub fn second_order(
        sides: Vec<T>,
        a: Coefficient<T>,
        b: Coefficient<T>,
        c: Coefficient<T>,
        d: Coefficient<T>,
        e: Coefficient<T>,
    ) -> Self {
        Self { sides, time_order: 2, a, b, c, d, e }
    }

    pub fn dim(&self) -> usize {
        self.sides.len()
    }

    fn depends_on_input(&self) -> bool {
        [&self.a, &self.b, &self.c, &self.d, &self.e].iter().any(|c| c.depends_on_input())
    }
}

/// Tensor grid with `points[k]` points along axis `k` and a set of actuator
/// points whose values are inputs.
#[derive(Debug, Clone)]
pub struct SpatialGrid<T> {
    points: Vec<usize>,
    steps: Vec<T>,
    actuators: Vec<usize>,
    state_of: Vec<Option<usize>>,
    input_of: Vec<Option<usize>>,
    grid_of_state: Vec<usize>,
}

impl<T: Real> SpatialGrid<T> {
    /// `actuators` lists flat grid indices; their order defines the input
    /// numbering.
    pub fn new(points: &[usize], sides: &[T], actuators: Vec<usize>) -> Result<Self> {
        if points.is_empty() || points.len() > 3 {
            return Err(Error::InvalidGrid(format!("{} axes", points.len())));
        }
        if sides.len() != points.len() {
            return Err(Error::InvalidGrid("one side length per axis".into()));
        }
        if let Some(p) = points.iter().find(|&&p| p < 3) {
            return Err(Error::InvalidGrid(format!("{p} points on an axis, at least 3 required")));
        }
        if sides.iter().any(|s| !(*s > T::zero())) {
            return Err(Error::InvalidGrid("side lengths must be positive".into()));
        }
        let total: usize = points.iter().product();
        let mut input_of = vec![None; total];
        for (k, &g) in actuators.iter().enumerate() {
            if g >= total {
                return Err(Error::InvalidGrid(format!("actuator index {g} outside grid of {total}")));
            }
            if input_of[g].replace(k).is_some() {
                return Err(Error::InvalidGrid(format!("actuator index {g} listed twice")));
            }
        }
        let mut state_of = vec![None; total];
        let mut grid_of_state = Vec::with_capacity(total - actuators.len());
        for g in 0..total {
            if input_of[g].is_none() {
                state_of[g] = Some(grid_of_state.len());
                grid_of_state.push(g);
            }
        }
        if grid_of_state.is_empty() {
            return Err(Error::InvalidGrid("every grid point is an actuator".into()));
        }
        let steps = points.iter().zip(sides).map(|(&p, &s)| s / T::from_count(p - 1)).collect();
        Ok(Self { points: points.to_vec(), steps, actuators, state_of, input_of, grid_of_state })
    }

    /// Actuators on the tensor lattice `axis_indices[0] x axis_indices[1] x …`
    /// (axis 0 fastest).
    pub fn with_lattice(points: &[usize], sides: &[T], axis_indices: &[Vec<usize>]) -> Result<Self> {
        if axis_indices.len() != points.len() {
            return Err(Error::InvalidGrid("one index list per axis".into()));
        }
        let mut acts = vec![0usize];
        let mut stride = 1;
        for (k, idx) in axis_indices.iter().enumerate() {
            if let Some(&bad) = idx.iter().find(|&&i| i >= points[k]) {
                return Err(Error::InvalidGrid(format!("actuator axis index {bad} on axis {k}")));
            }
            acts = idx.iter().flat_map(|&i| acts.iter().map(move |&g| g + i * stride)).collect();
            stride *= points[k];
        }
        acts.sort_unstable();
        Self::new(points, sides, acts)
    }

    /// `count` indices spread uniformly over an axis of `points` points:
    /// `⌊(2j+1)·points / (2·count)⌋`.
    pub fn uniform_axis_indices(points: usize, count: usize) -> Vec<usize> {
        (0..count).map(|j| (2 * j + 1) * points / (2 * count)).collect()
    }

    pub fn dim(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[usize] {
        &self.points
    }

    pub fn steps(&self) -> &[T] {
        &self.steps
    }

    pub fn total_points(&self) -> usize {
        self.state_of.len()
    }

    pub fn actuators(&self) -> &[usize] {
        &self.actuators
    }

    pub fn n_grid_states(&self) -> usize {
        self.grid_of_state.len()
    }

    pub fn state_of(&self, g: usize) -> Option<usize> {
        self.state_of[g]
    }

    pub fn input_of(&self, g: usize) -> Option<usize> {
        self.input_of[g]
    }

    pub fn grid_of_state(&self, s: usize) -> usize {
        self.grid_of_state[s]
    }

    /// Axis coordinates of a flat index.
    pub fn coords(&self, mut g: usize) -> Vec<usize> {
        self.points
            .iter()
            .map(|&p| {
                let c = g % p;
                g /= p;
                c
            })
            .collect()
    }

    /// Scatters states and inputs into a full grid field.
    pub fn assemble_field(&self, w: &[T], u: &[T]) -> Vec<T> {
        (0..self.total_points())
            .map(|g| match (self.state_of[g], self.input_of[g]) {
                (Some(s), _) => w[s],
                (None, Some(k)) => u[k],
                (None, None) => unreachable!("grid point is neither state nor input"),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Node {
    State(usize),
    Input(usize),
}

/// Stencil of one spatial row: `ℓ = self_w·w + Σ weight·z + β·e(u, w)`.
#[derive(Debug, Clone)]
struct StencilRow<T> {
    self_w: T,
    beta: T,
    /// (local slot, weight)
    nbrs: Vec<(usize, T)>,
    /// Global ids of the local slots. Slot 0 is `w`, slot 1 is `ẇ` for
    /// second-order models.
    locals: Vec<usize>,
    /// First slot of the full input block when coefficients depend on `u`.
    input_base: Option<usize>,
}

/// Finite-dimensional system obtained from a [`PdeModel`] on a
/// [`SpatialGrid`].
#[derive(Debug, Clone)]
pub struct DiscretizedSystem<T> {
    model: PdeModel<T>,
    grid: SpatialGrid<T>,
    rows: Vec<StencilRow<T>>,
    pattern: Arc<RowPattern>,
    n_s: usize,
}

/// Builds the discretized system. See the module docs for conventions.
pub fn discretize<T: Real>(model: PdeModel<T>, grid: SpatialGrid<T>) -> Result<DiscretizedSystem<T>> {
    DiscretizedSystem::new(model, grid)
}

impl<T: Real> DiscretizedSystem<T> {
    pub fn new(model: PdeModel<T>, grid: SpatialGrid<T>) -> Result<Self> {
        if model.dim() != grid.dim() {
            return Err(Error::InvalidModel(format!(
                "model is {}-dimensional, grid is {}-dimensional",
                model.dim(),
                grid.dim()
            )));
        }
        for (k, (s, p)) in model.sides.iter().zip(grid.points()).enumerate() {
            let expect = *s / T::from_count(*p - 1);
            if (expect - grid.steps()[k]).abs() > T::epsilon() * T::lit(16.0) * expect {
                return Err(Error::InvalidModel(format!("side length of axis {k} differs between model and grid")));
            }
        }
        let n_u = grid.actuators().len();
        let probe_u = vec![T::zero(); n_u];
        let (lead, name) = match model.time_order {
            1 => (&model.b, "b"),
            2 => (&model.a, "a"),
            o => return Err(Error::InvalidModel(format!("time order {o}, expected 1 or 2"))),
        };
        for w in [T::zero(), T::one(), T::lit(300.0)] {
            let v = lead.value(&probe_u, w);
            if v == T::zero() || !v.is_finite() {
                return Err(Error::InvalidModel(format!("coefficient {name} vanishes at w = {w}")));
            }
        }

        let n_s = grid.n_grid_states();
        let order2 = model.time_order == 2;
        let input_dep = model.depends_on_input();
        let n_x = if order2 { 2 * n_s } else { n_s };
        let w_row_offset = if order2 { n_s } else { 0 };

        let mut rows = Vec::with_capacity(n_s);
        for s in 0..n_s {
            let g = grid.grid_of_state(s);
            let coords = grid.coords(g);
            let mut self_w = T::zero();
            let mut beta = T::zero();
            let mut raw: Vec<(Node, T)> = Vec::new();
            let mut stride = 1;
            for (k, &p) in grid.points().iter().enumerate() {
                let dp = grid.steps()[k];
                let inv2 = T::one() / (dp * dp);
                let node = |gg: usize| match grid.state_of(gg) {
                    Some(t) => Node::State(t),
                    None => Node::Input(grid.input_of(gg).expect("actuator")),
                };
                let i = coords[k];
                self_w -= inv2 + inv2;
                let two = T::lit(2.0);
                if i == 0 {
                    raw.push((node(g + stride), two * inv2));
                    beta -= two / dp;
                } else if i == p - 1 {
                    raw.push((node(g - stride), two * inv2));
                    beta += two / dp;
                } else {
                    raw.push((node(g - stride), inv2));
                    raw.push((node(g + stride), inv2));
                }
                stride *= p;
            }

            let mut locals = vec![s];
            if order2 {
                locals.push(n_s + s);
            }
            let mut nbrs: Vec<(usize, T)> = Vec::new();
            let input_base = if input_dep {
                let base = locals.len();
                locals.extend((0..n_u).map(|k| n_x + k));
                Some(base)
            } else {
                None
            };
            for (node, wgt) in raw {
                let id = match node {
                    Node::State(t) => t,
                    Node::Input(k) => n_x + k,
                };
                let slot = match (node, input_base) {
                    (Node::Input(k), Some(base)) => base + k,
                    _ => match locals.iter().position(|&l| l == id) {
                        Some(p) => p,
                        None => {
                            locals.push(id);
                            locals.len() - 1
                        }
                    },
                };
                match nbrs.iter_mut().find(|(sl, _)| *sl == slot) {
                    Some(e) => e.1 += wgt,
                    None => nbrs.push((slot, wgt)),
                }
            }
            rows.push(StencilRow { self_w, beta, nbrs, locals, input_base });
        }

        let mut pat_rows: Vec<Vec<usize>> = Vec::with_capacity(n_x);
        if order2 {
            pat_rows.extend((0..n_s).map(|s| vec![n_s + s]));
        }
        pat_rows.extend(rows.iter().map(|r| r.locals.clone()));
        debug_assert_eq!(pat_rows.len(), n_x);
        debug_assert_eq!(w_row_offset + n_s, n_x);
        let pattern = Arc::new(RowPattern::new(n_x, n_u, &pat_rows));
        Ok(Self { model, grid, rows, pattern, n_s })
    }

    pub fn model(&self) -> &PdeModel<T> {
        &self.model
    }

    pub fn grid(&self) -> &SpatialGrid<T> {
        &self.grid
    }

    /// Number of spatial state points (`W` length).
    pub fn n_spatial(&self) -> usize {
        self.n_s
    }

    fn order2(&self) -> bool {
        self.model.time_order == 2
    }

    #[inline]
    fn slot_value(&self, id: usize, u: &[T], x: &[T]) -> T {
        let n_x = self.pattern.n_x();
        if id < n_x {
            x[id]
        } else {
            u[id - n_x]
        }
    }

    fn row_value(&self, s: usize, u: &[T], x: &[T]) -> T {
        let row = &self.rows[s];
        let w = x[s];
        let mut lap = row.self_w * w;
        for &(slot, wgt) in &row.nbrs {
            lap += wgt * self.slot_value(row.locals[slot], u, x);
        }
        if row.beta != T::zero() {
            lap += row.beta * self.model.e.value(u, w);
        }
        let m = &self.model;
        let num = m.c.value(u, w) * lap + m.d.value(u, w);
        if self.order2() {
            let v = x[self.n_s + s];
            (num - m.b.value(u, w) * v) / m.a.value(u, w)
        } else {
            num / m.b.value(u, w)
        }
    }

    /// Finite-difference Laplacian of a full grid field (used by tests and
    /// the heat benchmark's diagnostics).
    pub fn laplacian_at_state(&self, s: usize, u: &[T], x: &[T]) -> T {
        let row = &self.rows[s];
        let mut lap = row.self_w * x[s];
        for &(slot, wgt) in &row.nbrs {
            lap += wgt * self.slot_value(row.locals[slot], u, x);
        }
        if row.beta != T::zero() {
            lap += row.beta * self.model.e.value(u, x[s]);
        }
        lap
    }
}

/// Local first and second derivatives over a row's slots.
struct Local<T> {
    m: usize,
    g: Vec<T>,
    h: Vec<T>,
}

impl<T: Real> Local<T> {
    fn new(m: usize) -> Self {
        Self { m, g: vec![T::zero(); m], h: vec![T::zero(); m * m] }
    }

    /// Switches to `m` slots, reusing the allocation.
    fn resize(&mut self, m: usize) {
        if self.m != m {
            self.m = m;
            self.g.resize(m, T::zero());
            self.h.resize(m * m, T::zero());
        }
    }

    fn clear(&mut self) {
        self.g.iter_mut().for_each(|v| *v = T::zero());
        self.h.iter_mut().for_each(|v| *v = T::zero());
    }

    /// Loads a coefficient's derivatives (function of `w` = slot 0 and the
    /// input block).
    fn load(&mut self, d: &CoeffDerivs<T>, input_base: Option<usize>) {
        self.clear();
        let m = self.m;
        self.g[0] = d.dw;
        self.h[0] = d.dww;
        if let Some(base) = input_base {
            let n = d.du.len();
            for k in 0..n {
                self.g[base + k] = d.du[k];
                self.h[base + k] = d.duw[k];
                self.h[(base + k) * m] = d.duw[k];
                for l in 0..n {
                    self.h[(base + k) * m + base + l] = d.duu[k * n + l];
                }
            }
        }
    }
}

impl<T: Real> Dynamics<T> for DiscretizedSystem<T> {
    fn n_x(&self) -> usize {
        self.pattern.n_x()
    }

    fn n_u(&self) -> usize {
        self.pattern.n_u()
    }

    fn pattern(&self) -> &Arc<RowPattern> {
        &self.pattern
    }

    fn second_order_split(&self) -> Option<usize> {
        self.order2().then_some(self.n_s)
    }

    fn eval(&self, u: &[T], x: &[T], f: &mut [T]) {
        let off = if self.order2() {
            f[..self.n_s].copy_from_slice(&x[self.n_s..]);
            self.n_s
        } else {
            0
        };
        for s in 0..self.n_s {
            f[off + s] = self.row_value(s, u, x);
        }
    }

    fn linearize(&self, u: &[T], x: &[T], out: &mut Linearization<T>) {
        out.hess.clear();
        let order2 = self.order2();
        let n_s = self.n_s;
        let off = if order2 { n_s } else { 0 };
        if order2 {
            for s in 0..n_s {
                out.f[s] = x[n_s + s];
                let k = self.pattern.range(s).start;
                out.grad[k] = T::one();
            }
        }
        let m_max = self.rows.iter().map(|r| r.locals.len()).max().unwrap_or(0);
        let mut ca = CoeffDerivs::default();
        let mut cb = CoeffDerivs::default();
        let mut cc = CoeffDerivs::default();
        let mut cd = CoeffDerivs::default();
        let mut ce = CoeffDerivs::default();
        let mut la = Local::new(m_max);
        let mut lb = Local::new(m_max);
        let mut lc = Local::new(m_max);
        let mut ld = Local::new(m_max);
        let mut le = Local::new(m_max);
        let mut num = Local::new(m_max);
        let mut q = Local::new(m_max);
        let mut lg = Vec::with_capacity(m_max);
        let model = &self.model;

        for (s, row) in self.rows.iter().enumerate() {
            let m = row.locals.len();
            for l in [&mut la, &mut lb, &mut lc, &mut ld, &mut le, &mut num, &mut q] {
                l.resize(m);
            }
            let w = x[s];
            model.b.eval(u, w, &mut cb);
            model.c.eval(u, w, &mut cc);
            model.d.eval(u, w, &mut cd);
            lb.load(&cb, row.input_base);
            lc.load(&cc, row.input_base);
            ld.load(&cd, row.input_base);
            let has_e = row.beta != T::zero();
            if has_e {
                model.e.eval(u, w, &mut ce);
                le.load(&ce, row.input_base);
            }

            // ℓ and its derivatives
            let mut lap = row.self_w * w;
            lg.clear();
            lg.resize(m, T::zero());
            lg[0] = row.self_w;
            for &(slot, wgt) in &row.nbrs {
                lap += wgt * self.slot_value(row.locals[slot], u, x);
                lg[slot] += wgt;
            }
            if has_e {
                lap += row.beta * ce.value;
                for a in 0..m {
                    lg[a] += row.beta * le.g[a];
                }
            }
            let lh = |a: usize, b: usize| if has_e { row.beta * le.h[a * m + b] } else { T::zero() };

            // coefficients only vary with w, ẇ and u, so second derivatives
            // vanish unless one of the two slots is among those
            let vslot = 1;
            let act = |a: usize| a == 0 || (order2 && a == vslot) || row.input_base.is_some_and(|b| a >= b);
            let pair = |a: usize, b: usize| act(a) || act(b);

            // numerator cℓ + d (− b v)
            let mut num_v = cc.value * lap + cd.value;
            for a in 0..m {
                num.g[a] = lc.g[a] * lap + cc.value * lg[a] + ld.g[a];
                for b in 0..m {
                    num.h[a * m + b] = if pair(a, b) {
                        lc.h[a * m + b] * lap + lc.g[a] * lg[b] + lc.g[b] * lg[a] + cc.value * lh(a, b) + ld.h[a * m + b]
                    } else {
                        T::zero()
                    };
                }
            }
            let den = if order2 {
                let v = x[n_s + s];
                num_v -= cb.value * v;
                for a in 0..m {
                    num.g[a] -= lb.g[a] * v;
                    for b in 0..m {
                        num.h[a * m + b] -= lb.h[a * m + b] * v;
                    }
                }
                num.g[vslot] -= cb.value;
                for a in 0..m {
                    num.h[a * m + vslot] -= lb.g[a];
                    num.h[vslot * m + a] -= lb.g[a];
                }
                model.a.eval(u, w, &mut ca);
                la.load(&ca, row.input_base);
                (&ca, &la)
            } else {
                (&cb, &lb)
            };
            let (dc, dl) = den;
            let g = dc.value;
            let qv = num_v / g;
            for a in 0..m {
                q.g[a] = (num.g[a] - qv * dl.g[a]) / g;
            }
            for a in 0..m {
                for b in 0..m {
                    q.h[a * m + b] = if pair(a, b) {
                        (num.h[a * m + b] - q.g[a] * dl.g[b] - q.g[b] * dl.g[a] - qv * dl.h[a * m + b]) / g
                    } else {
                        T::zero()
                    };
                }
            }

            let r = off + s;
            out.f[r] = qv;
            let base = self.pattern.range(r).start;
            out.grad[base..base + m].copy_from_slice(&q.g[..m]);
            for a in 0..m {
                for b in a..m {
                    let v = q.h[a * m + b];
                    if v != T::zero() {
                        out.hess.push(HessEntry { row: r, a: row.locals[a], b: row.locals[b], val: v });
                    }
                }
            }
        }
    }
}

/// Largest discrepancies between analytic operators and central finite
/// differences of `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub jac_x: f64,
    pub jac_u: f64,
    pub hess: f64,
    /// Largest absolute entry of the analytic Hessian contraction.
    pub hess_max_abs: f64,
    pub adjoint_x: f64,
    pub adjoint_u: f64,
}

impl FdReport {
    pub const TOLERANCE: f64 = 1e-5;

    pub fn max_error(&self) -> f64 {
        [self.jac_x, self.jac_u, self.hess, self.adjoint_x, self.adjoint_u].into_iter().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= Self::TOLERANCE
    }
}

fn rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let scale = fd.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic.iter().zip(fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Compares every derivative operator of `sys` with central differences of
/// `eval` at `(u, x)`; the Hessian contraction is checked against
/// differences of the analytic gradient of `λᵀf`. Adjointness is checked
/// with `probe` vectors `(v_x, w_x, v_u)`.
pub fn finite_difference_check<D: Dynamics<f64> + ?Sized>(
    sys: &D,
    u: &[f64],
    x: &[f64],
    lambda: &[f64],
) -> FdReport {
    let (n_x, n_u) = (sys.n_x(), sys.n_u());
    let mut lin = sys.new_linearization();
    sys.linearize(u, x, &mut lin);
    let (jx, ju) = lin.dense_jacobians();
    let step = |z: f64| 1e-6 * z.abs().max(1.0);

    let mut fp = vec![0.0; n_x];
    let mut fm = vec![0.0; n_x];
    let mut an_x = Vec::new();
    let mut fd_x = Vec::new();
    let mut xp = x.to_vec();
    for j in 0..n_x {
        let hj = step(x[j]);
        xp[j] = x[j] + hj;
        sys.eval(u, &xp, &mut fp);
        xp[j] = x[j] - hj;
        sys.eval(u, &xp, &mut fm);
        xp[j] = x[j];
        for r in 0..n_x {
            fd_x.push((fp[r] - fm[r]) / (2.0 * hj));
            an_x.push(jx[(r, j)]);
        }
    }
    let mut an_u = Vec::new();
    let mut fd_u = Vec::new();
    let mut up = u.to_vec();
    for j in 0..n_u {
        let hj = step(u[j]);
        up[j] = u[j] + hj;
        sys.eval(&up, x, &mut fp);
        up[j] = u[j] - hj;
        sys.eval(&up, x, &mut fm);
        up[j] = u[j];
        for r in 0..n_x {
            fd_u.push((fp[r] - fm[r]) / (2.0 * hj));
            an_u.push(ju[(r, j)]);
        }
    }

    // gradient of λᵀf via the analytic transposed operators
    let grad_at = |uu: &[f64], xx: &[f64], gx: &mut [f64], gu: &mut [f64]| {
        let mut l = sys.new_linearization();
        sys.linearize(uu, xx, &mut l);
        l.apply_dfdx_t(lambda, gx);
        l.apply_dfdu_t(lambda, gu);
    };
    let (mut gxp, mut gxm) = (vec![0.0; n_x], vec![0.0; n_x]);
    let (mut gup, mut gum) = (vec![0.0; n_u], vec![0.0; n_u]);
    let (mut hx, mut hu) = (vec![0.0; n_x], vec![0.0; n_u]);
    let mut an_h = Vec::new();
    let mut fd_h = Vec::new();
    let mut ex = vec![0.0; n_x];
    let mut eu = vec![0.0; n_u];
    let mut hess_max_abs = 0.0f64;
    for j in 0..n_x + n_u {
        let (mut xp, mut xm, mut up, mut um) = (x.to_vec(), x.to_vec(), u.to_vec(), u.to_vec());
        let hj = if j < n_x {
            let hj = step(x[j]);
            xp[j] += hj;
            xm[j] -= hj;
            ex[j] = 1.0;
            hj
        } else {
            let k = j - n_x;
            let hj = step(u[k]);
            up[k] += hj;
            um[k] -= hj;
            eu[k] = 1.0;
            hj
        };
        grad_at(&up, &xp, &mut gxp, &mut gup);
        grad_at(&um, &xm, &mut gxm, &mut gum);
        lin.hess_apply(lambda, &ex, &eu, &mut hx, &mut hu);
        if j < n_x {
            ex[j] = 0.0;
        } else {
            eu[j - n_x] = 0.0;
        }
        for r in 0..n_x {
            fd_h.push((gxp[r] - gxm[r]) / (2.0 * hj));
            an_h.push(hx[r]);
        }
        for r in 0..n_u {
            fd_h.push((gup[r] - gum[r]) / (2.0 * hj));
            an_h.push(hu[r]);
        }
        hess_max_abs = hx.iter().chain(&hu).fold(hess_max_abs, |m, v| m.max(v.abs()));
    }

    let (adjoint_x, adjoint_u) = adjoint_gaps(&lin, 0x5eed);
    FdReport {
        jac_x: rel_err(&an_x, &fd_x),
        jac_u: rel_err(&an_u, &fd_u),
        hess: rel_err(&an_h, &fd_h),
        hess_max_abs,
        adjoint_x,
        adjoint_u,
    }
}

/// Worst relative gap of `⟨w, J v⟩ − ⟨Jᵀ w, v⟩` over 20 random pairs, for
/// `J = ∇ₓf` and `J = ∇ᵤf`.
pub fn adjoint_gaps(lin: &Linearization<f64>, seed: u64) -> (f64, f64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (n_x, n_u) = (lin.n_x(), lin.n_u());
    let (mut gx, mut gu) = (0.0f64, 0.0f64);
    let mut jv = vec![0.0; n_x];
    let mut jtx = vec![0.0; n_x];
    let mut jtu = vec![0.0; n_u];
    for _ in 0..20 {
        let vx: Vec<f64> = (0..n_x).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vu: Vec<f64> = (0..n_u).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n_x).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gap = |a: f64, b: f64, sa: f64, sb: f64| (a - b).abs() / (sa + sb).max(f64::MIN_POSITIVE);
        lin.apply_dfdx(&vx, &mut jv);
        lin.apply_dfdx_t(&w, &mut jtx);
        let (a, sa) = dot_abs(&w, &jv);
        let (b, sb) = dot_abs(&jtx, &vx);
        gx = gx.max(gap(a, b, sa, sb));
        if n_u > 0 {
            lin.apply_dfdu(&vu, &mut jv);
            lin.apply_dfdu_t(&w, &mut jtu);
            let (a, sa) = dot_abs(&w, &jv);
            let (b, sb) = dot_abs(&jtu, &vu);
            gu = gu.max(gap(a, b, sa, sb));
        }
    }
    (gx, gu)
}

fn dot_abs(a: &[f64], b: &[f64]) -> (f64, f64) {
    a.iter().zip(b).fold((0.0, 0.0), |(s, m), (p, q)| (s + p * q, m + (p * q).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heat_1d(points: usize, e: Coefficient<f64>, actuators: Vec<usize>) -> DiscretizedSystem<f64> {
        let model = PdeModel::first_order(vec![1.0], Coefficient::Constant(1.0), Coefficient::Constant(1.0), Coefficient::zero(), e);
        let grid = SpatialGrid::new(&[points], &[1.0], actuators).unwrap();
        discretize(model, grid).unwrap()
    }

    fn plate(points: usize, e: Coefficient<f64>) -> DiscretizedSystem<f64> {
        let model =
            PdeModel::first_order(vec![1.0, 1.0], Coefficient::Constant(1.0), Coefficient::Constant(1.0), Coefficient::zero(), e);
        let grid = SpatialGrid::new(&[points, points], &[1.0, 1.0], Vec::new()).unwrap();
        discretize(model, grid).unwrap()
    }

    #[test]
    fn benchmark_actuator_layout() {
        assert_eq!(SpatialGrid::<f64>::uniform_axis_indices(13, 4), vec![1, 4, 8, 11]);
        let idx = SpatialGrid::<f64>::uniform_axis_indices(13, 4);
        let g = SpatialGrid::<f64>::with_lattice(&[13, 13], &[1.0, 1.0], &[idx.clone(), idx]).unwrap();
        assert_eq!((g.actuators().len(), g.n_grid_states()), (16, 153));
        assert_eq!(g.input_of(13 + 1), Some(0));
        assert_eq!(g.coords(11 * 13 + 4), vec![4, 11]);
    }

    #[test]
    fn constant_field_has_no_curvature() {
        let sys = plate(6, Coefficient::zero());
        let x = vec![2.5; sys.n_spatial()];
        for s in 0..sys.n_spatial() {
            assert!(sys.laplacian_at_state(s, &[], &x).abs() < 1e-12, "state {s}");
        }
    }

    #[test]
    fn neumann_data_is_the_axis_derivative() {
        // w = 3p has ∂w/∂p = 3 on both ends and Δw = 0
        let sys = heat_1d(7, Coefficient::Constant(3.0), Vec::new());
        let x: Vec<f64> = (0..7).map(|j| 3.0 * j as f64 / 6.0).collect();
        for s in 0..7 {
            assert!(sys.laplacian_at_state(s, &[], &x).abs() < 1e-10, "state {s}");
        }
    }

    #[test]
    fn quadratic_field_is_exact_inside() {
        let sys = plate(9, Coefficient::zero());
        let h = 1.0 / 8.0;
        // w = x² + 2y²
        let x: Vec<f64> = (0..81)
            .map(|g| {
                let (i, j) = ((g % 9) as f64 * h, (g / 9) as f64 * h);
                i * i + 2.0 * j * j
            })
            .collect();
        for g in 0..81 {
            let (i, j) = (g % 9, g / 9);
            if (1..8).contains(&i) && (1..8).contains(&j) {
                assert!((sys.laplacian_at_state(g, &[], &x) - 6.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn actuator_neighbours_read_the_input() {
        let sys = heat_1d(5, Coefficient::zero(), vec![2]);
        assert_eq!(sys.n_spatial(), 4);
        // states at grid 0, 1, 3, 4; the input sits in the middle
        let x = [0.0, 0.0, 0.0, 0.0];
        let h2 = 1.0 / 16.0;
        assert!((sys.laplacian_at_state(1, &[1.0], &x) - 1.0 / h2).abs() < 1e-9);
        assert!((sys.laplacian_at_state(2, &[1.0], &x) - 1.0 / h2).abs() < 1e-9);
        assert_eq!(sys.laplacian_at_state(0, &[1.0], &x), 0.0);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let e = Coefficient::state(|w: f64| [0.1 * w * w, 0.2 * w, 0.2]);
        let model = PdeModel::first_order(
            vec![1.0, 1.0],
            Coefficient::Polynomial(vec![2.0, 0.1]),
            Coefficient::state(|w: f64| [1.0 + w.sin() * 0.3, 0.3 * w.cos(), -0.3 * w.sin()]),
            Coefficient::Polynomial(vec![0.0, -1.0, 0.0, 0.0, -0.05]),
            e,
        );
        let grid = SpatialGrid::with_lattice(&[5, 5], &[1.0, 1.0], &[vec![1, 3], vec![2]]).unwrap();
        let sys = discretize(model, grid).unwrap();
        let n_x = sys.n_x();
        let x: Vec<f64> = (0..n_x).map(|k| 0.5 + 0.1 * (k as f64).sin()).collect();
        let lam: Vec<f64> = (0..n_x).map(|k| (k as f64 * 0.7).cos()).collect();
        let report = finite_difference_check(&sys, &[0.3, 0.8], &x, &lam);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn bad_grids_are_rejected() {
        assert!(SpatialGrid::<f64>::new(&[2], &[1.0], Vec::new()).is_err());
        assert!(SpatialGrid::<f64>::new(&[3, 3], &[1.0], Vec::new()).is_err());
        assert!(SpatialGrid::<f64>::new(&[3], &[1.0], vec![1, 1]).is_err());
        assert!(SpatialGrid::<f64>::new(&[3], &[1.0], vec![0, 1, 2]).is_err());
        assert!(SpatialGrid::<f64>::with_lattice(&[4], &[1.0], &[vec![4]]).is_err());
        let model = PdeModel::first_order(vec![1.0], Coefficient::zero(), Coefficient::Constant(1.0), Coefficient::zero(), Coefficient::zero());
        let grid = SpatialGrid::new(&[4], &[1.0], Vec::new()).unwrap();
        assert!(matches!(discretize(model, grid), Err(Error::InvalidModel(_))));
    }
}
