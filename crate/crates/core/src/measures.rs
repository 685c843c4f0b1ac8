//! Finite atomic measures over a metrized point set: exact Wasserstein-1
//! with ground cost d /\ 1, the self-correlation functional g_mu(eps), and
//! the weak atomic metric W_a = W_1 + sup_eps |g_mu - g_nu|.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{substream, StreamKind};

/// Points a measure can sit on. Distances are capped at 1 before transport,
/// so implementations may return any nonnegative value.
pub trait MetricPoint {
    fn distance(&self, other: &Self) -> f64;
}

impl MetricPoint for f64 {
    fn distance(&self, other: &Self) -> f64 {
        (self - other).abs()
    }
}

impl MetricPoint for Vec<f64> {
    fn distance(&self, other: &Self) -> f64 {
        self.iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Finitely atomic measure; exact duplicates are merged on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure<P> {
    atoms: Vec<(P, f64)>,
}

impl<P: MetricPoint> DiscreteMeasure<P> {
    pub fn new(atoms: Vec<(P, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::Measure("measure needs at least one atom".into()));
        }
        let mut merged: Vec<(P, f64)> = Vec::with_capacity(atoms.len());
        for (p, m) in atoms {
            if !(m > 0.0) || !m.is_finite() {
                return Err(Error::Measure(format!("atom mass {m} must be positive")));
            }
            match merged.iter_mut().find(|(q, _)| q.distance(&p) == 0.0) {
                Some((_, mm)) => *mm += m,
                None => merged.push((p, m)),
            }
        }
        Ok(DiscreteMeasure { atoms: merged })
    }

    /// Probability measure; total mass must be 1 within 1e-12.
    pub fn probability(atoms: Vec<(P, f64)>) -> Result<Self> {
        let m = Self::new(atoms)?;
        let t = m.total_mass();
        if (t - 1.0).abs() > 1e-12 {
            return Err(Error::Measure(format!("total mass {t} != 1")));
        }
        Ok(m)
    }

    pub fn atoms(&self) -> &[(P, f64)] {
        &self.atoms
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|(_, m)| m).sum()
    }

    /// Max-mass atom; exact ties broken uniformly by the seed.
    pub fn largest_atom(&self, seed: u64) -> (&P, f64) {
        let max = self
            .atoms
            .iter()
            .map(|(_, m)| *m)
            .fold(f64::NEG_INFINITY, f64::max);
        let ties: Vec<usize> = self
            .atoms
            .iter()
            .enumerate()
            .filter(|(_, (_, m))| *m >= max * (1.0 - 1e-12))
            .map(|(i, _)| i)
            .collect();
        let pick = if ties.len() == 1 {
            ties[0]
        } else {
            let mut rng = substream(seed, StreamKind::Aux, 0);
            ties[rng.gen_range(0..ties.len())]
        };
        (&self.atoms[pick].0, self.atoms[pick].1)
    }

    /// g_mu(eps) = sum_{i,j} m_i m_j (1 - d(x_i,x_j)/eps)^+.
    pub fn self_correlation(&self, eps: f64) -> f64 {
        assert!(eps > 0.0, "eps must be positive");
        let mut s = 0.0;
        for (i, (p, m)) in self.atoms.iter().enumerate() {
            s += m * m;
            for (q, mm) in &self.atoms[i + 1..] {
                let d = p.distance(q);
                if d < eps {
                    s += 2.0 * m * mm * (1.0 - d / eps);
                }
            }
        }
        s
    }

    /// Exact Wasserstein-1 with ground cost d /\ 1.
    pub fn wasserstein1(&self, other: &Self) -> Result<f64> {
        let (ta, tb) = (self.total_mass(), other.total_mass());
        if (ta - tb).abs() > 1e-9 * ta.max(tb).max(1.0) {
            return Err(Error::Measure(format!(
                "cannot transport mass {ta} onto mass {tb}"
            )));
        }
        // Mass shared at coincident points never needs to move; removing it
        // is exact for metric ground costs and shrinks the flow problem.
        let mut a: Vec<(usize, f64)> = (0..self.atoms.len())
            .map(|i| (i, self.atoms[i].1))
            .collect();
        let mut b: Vec<(usize, f64)> = (0..other.atoms.len())
            .map(|j| (j, other.atoms[j].1))
            .collect();
        for (i, ma) in a.iter_mut() {
            for (j, mb) in b.iter_mut() {
                if *ma > 0.0 && *mb > 0.0 && self.atoms[*i].0.distance(&other.atoms[*j].0) == 0.0 {
                    let c = ma.min(*mb);
                    *ma -= c;
                    *mb -= c;
                }
            }
        }
        let eps = 1e-12 * ta.max(1.0);
        a.retain(|(_, m)| *m > eps);
        b.retain(|(_, m)| *m > eps);
        if a.is_empty() || b.is_empty() {
            return Ok(0.0);
        }
        let cost = |i: usize, j: usize| self.atoms[i].0.distance(&other.atoms[j].0).min(1.0);
        Ok(min_cost_transport(
            &a.iter().map(|(_, m)| *m).collect::<Vec<_>>(),
            &b.iter().map(|(_, m)| *m).collect::<Vec<_>>(),
            |ii, jj| cost(a[ii].0, b[jj].0),
        ))
    }

    /// Weak atomic metric W_a = W_1 + sup_{0 < eps <= 1} |g_mu - g_nu|.
    ///
    /// Writing g(eps) = A(eps) - B(eps)/eps with A, B piecewise constant
    /// between pairwise distances, the difference is one-sided monotone on
    /// each piece, so the sup is attained at a breakpoint, at eps = 1, or in
    /// the eps -> 0 limit. One sorted sweep over the pair distances of both
    /// supports evaluates all of these exactly.
    pub fn weak_atomic(&self, other: &Self) -> Result<f64> {
        let w = self.wasserstein1(other)?;
        // signed pair contributions 2 m_i m_j at distance d, + for self.
        let mut events: Vec<(f64, f64)> = Vec::new();
        let mut push_pairs = |m: &DiscreteMeasure<P>, sign: f64| {
            for (i, (p, mp)) in m.atoms.iter().enumerate() {
                for (q, mq) in &m.atoms[i + 1..] {
                    let d = p.distance(q);
                    if d > 0.0 && d <= 1.0 {
                        events.push((d, sign * 2.0 * mp * mq));
                    }
                }
            }
        };
        push_pairs(self, 1.0);
        push_pairs(other, -1.0);
        events.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        // running A and B over pairs with distance < eps; atoms coincide
        // only within a measure (merged at construction), so the diagonal
        // term is the squared-mass sum.
        let mut a = self.atom_mass_sq() - other.atom_mass_sq();
        let mut b = 0.0;
        let mut sup = a.abs(); // eps -> 0 limit
        let mut idx = 0;
        while idx < events.len() {
            let d = events[idx].0;
            // a pair at distance exactly d contributes 0 at eps = d, so the
            // value there needs only the pairs strictly below d.
            sup = sup.max((a - b / d).abs());
            while idx < events.len() && events[idx].0 == d {
                a += events[idx].1;
                b += events[idx].1 * d;
                idx += 1;
            }
        }
        sup = sup.max((a - b).abs()); // eps = 1
        Ok(w + sup)
    }

    /// eps -> 0 limit of the self-correlation: sum of squared atom masses.
    fn atom_mass_sq(&self) -> f64 {
        self.atoms.iter().map(|(_, m)| m * m).sum()
    }
}

/// Exact transportation cost between supplies `a` and demands `b`:
/// min-cost flow by successive shortest augmenting paths (Bellman-Ford
/// over the residual graph, which tolerates the negative back-arcs).
fn min_cost_transport(a: &[f64], b: &[f64], cost: impl Fn(usize, usize) -> f64) -> f64 {
    struct Edge {
        to: usize,
        cap: f64,
        cost: f64,
    }
    // node layout: 0 = source, 1..=n supplies, n+1..=n+m demands, n+m+1 = sink.
    let (n, m) = (a.len(), b.len());
    let v = n + m + 2;
    let sink = v - 1;
    let mut edges: Vec<Edge> = Vec::with_capacity(2 * (n + m + n * m));
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); v];
    let push = |edges: &mut Vec<Edge>, adj: &mut Vec<Vec<usize>>, u: usize, w: usize, cap: f64, c: f64| {
        adj[u].push(edges.len());
        edges.push(Edge { to: w, cap, cost: c });
        adj[w].push(edges.len());
        edges.push(Edge { to: u, cap: 0.0, cost: -c });
    };
    for (i, &s) in a.iter().enumerate() {
        push(&mut edges, &mut adj, 0, 1 + i, s, 0.0);
    }
    for (j, &d) in b.iter().enumerate() {
        push(&mut edges, &mut adj, 1 + n + j, sink, d, 0.0);
    }
    for i in 0..n {
        for j in 0..m {
            push(&mut edges, &mut adj, 1 + i, 1 + n + j, f64::INFINITY, cost(i, j));
        }
    }

    let total: f64 = a.iter().sum();
    let eps = 1e-12 * total.max(1.0);
    let mut moved = 0.0;
    let mut total_cost = 0.0;
    while moved < total - eps {
        // Bellman-Ford (queue-based) for the cheapest augmenting path.
        let mut dist = vec![f64::INFINITY; v];
        let mut prev_edge = vec![usize::MAX; v];
        let mut in_queue = vec![false; v];
        dist[0] = 0.0;
        let mut queue = std::collections::VecDeque::from([0usize]);
        in_queue[0] = true;
        while let Some(u) = queue.pop_front() {
            in_queue[u] = false;
            for &ei in &adj[u] {
                let e = &edges[ei];
                if e.cap > eps && dist[u] + e.cost < dist[e.to] - 1e-15 {
                    dist[e.to] = dist[u] + e.cost;
                    prev_edge[e.to] = ei;
                    if !in_queue[e.to] {
                        in_queue[e.to] = true;
                        queue.push_back(e.to);
                    }
                }
            }
        }
        assert!(dist[sink].is_finite(), "transport problem infeasible");
        // bottleneck along the path, then apply it.
        let mut bottleneck = f64::INFINITY;
        let mut u = sink;
        while u != 0 {
            let ei = prev_edge[u];
            bottleneck = bottleneck.min(edges[ei].cap);
            u = edges[ei ^ 1].to;
        }
        let mut u = sink;
        while u != 0 {
            let ei = prev_edge[u];
            edges[ei].cap -= bottleneck;
            edges[ei ^ 1].cap += bottleneck;
            u = edges[ei ^ 1].to;
        }
        moved += bottleneck;
        total_cost += bottleneck * dist[sink];
    }
    total_cost
}
