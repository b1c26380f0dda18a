//! Rectangular min-cost assignment and Murty's ranked assignments.
//!
//! Every row (measurement) is assigned to a distinct column; columns may stay
//! unassigned. Forbidden cells carry `+inf`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignmentError {
    #[error("cost matrix has more rows ({rows}) than columns ({cols})")]
    TooManyRows { rows: usize, cols: usize },
    #[error("cost matrix entry ({0}, {1}) is NaN or -inf")]
    InvalidEntry(usize, usize),
    #[error("row {0} has no finite entry")]
    EmptyRow(usize),
    #[error("no feasible assignment exists")]
    Infeasible,
    #[error("data length {len} does not match {rows}x{cols}")]
    Shape { rows: usize, cols: usize, len: usize },
}

/// Dense row-major cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AssignmentError> {
        if data.len() != rows * cols {
            return Err(AssignmentError::Shape {
                rows,
                cols,
                len: data.len(),
            });
        }
        if rows > cols {
            return Err(AssignmentError::TooManyRows { rows, cols });
        }
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            if let Some(c) = row.iter().position(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
                return Err(AssignmentError::InvalidEntry(r, c));
            }
            if !row.iter().any(|v| v.is_finite()) {
                return Err(AssignmentError::EmptyRow(r));
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AssignmentError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Sum of the selected entries, accumulated in row order.
    pub fn cost_of(&self, row_to_col: &[usize]) -> f64 {
        row_to_col
            .iter()
            .enumerate()
            .map(|(r, &c)| self.get(r, c))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub row_to_col: Vec<usize>,
    pub total_cost: f64,
}

/// Shortest-augmenting-path Hungarian algorithm on a matrix view.
/// `cell(r, c)` returns the cost or `+inf` when forbidden.
fn hungarian(
    rows: usize,
    cols: usize,
    cell: impl Fn(usize, usize) -> f64,
) -> Option<Vec<usize>> {
    if rows == 0 {
        return Some(Vec::new());
    }
    let inf = f64::INFINITY;
    // 1-based potentials; p[j] is the row matched to column j, 0 if free
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    let mut minv = vec![inf; cols + 1];
    let mut used = vec![false; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|m| *m = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = usize::MAX;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let c = cell(i0 - 1, j - 1);
                if c.is_finite() {
                    let cur = c - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            if j1 == usize::MAX || !delta.is_finite() {
                return None;
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    Some(row_to_col)
}

/// Globally optimal assignment of every row to a distinct column.
pub fn solve_min_cost(c: &CostMatrix) -> Result<Assignment, AssignmentError> {
    let row_to_col = hungarian(c.rows, c.cols, |r, col| c.get(r, col))
        .ok_or(AssignmentError::Infeasible)?;
    let total_cost = c.cost_of(&row_to_col);
    if !total_cost.is_finite() {
        return Err(AssignmentError::Infeasible);
    }
    Ok(Assignment {
        row_to_col,
        total_cost,
    })
}

/// Subproblem constraints of Murty's partitioning.
#[derive(Debug, Clone, Default)]
struct Constraints {
    /// `forced[r] = Some(c)` fixes row r to column c.
    forced: Vec<Option<usize>>,
    forbidden: Vec<(usize, usize)>,
}

impl Constraints {
    fn solve(&self, c: &CostMatrix) -> Option<Assignment> {
        let mut col_forced_by = vec![usize::MAX; c.cols];
        for (r, f) in self.forced.iter().enumerate() {
            if let Some(col) = f {
                col_forced_by[*col] = r;
            }
        }
        let cell = |r: usize, col: usize| -> f64 {
            match self.forced[r] {
                Some(fc) if fc != col => return f64::INFINITY,
                _ => {}
            }
            if col_forced_by[col] != usize::MAX && col_forced_by[col] != r {
                return f64::INFINITY;
            }
            if self.forbidden.iter().any(|&(fr, fc)| fr == r && fc == col) {
                return f64::INFINITY;
            }
            c.get(r, col)
        };
        let row_to_col = hungarian(c.rows, c.cols, cell)?;
        let total_cost = c.cost_of(&row_to_col);
        total_cost.is_finite().then_some(Assignment {
            row_to_col,
            total_cost,
        })
    }
}

struct Node {
    assignment: Assignment,
    constraints: Constraints,
}

impl Node {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.assignment
            .total_cost
            .total_cmp(&other.assignment.total_cost)
            .then_with(|| self.assignment.row_to_col.cmp(&other.assignment.row_to_col))
    }
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.key_cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // reversed: BinaryHeap is a max-heap and we pop the cheapest
    fn cmp(&self, other: &Self) -> Ordering {
        other.key_cmp(self)
    }
}

/// The `k` lowest-cost assignments in nondecreasing cost order.
pub fn murty_kbest(c: &CostMatrix, k: usize) -> Result<Vec<Assignment>, AssignmentError> {
    murty_kbest_bounded(c, k, f64::INFINITY)
}

/// Like [`murty_kbest`] but stops once the next assignment would cost more
/// than `best + max_gap`.
pub fn murty_kbest_bounded(
    c: &CostMatrix,
    k: usize,
    max_gap: f64,
) -> Result<Vec<Assignment>, AssignmentError> {
    let first = solve_min_cost(c)?;
    let mut out = Vec::new();
    if k == 0 {
        return Ok(out);
    }
    let limit = first.total_cost + max_gap;
    let mut heap = BinaryHeap::new();
    heap.push(Node {
        assignment: first,
        constraints: Constraints {
            forced: vec![None; c.rows],
            forbidden: Vec::new(),
        },
    });
    while let Some(node) = heap.pop() {
        if node.assignment.total_cost > limit {
            break;
        }
        // partition the remaining solution space of this node
        let mut fixed = node.constraints.clone();
        for r in 0..c.rows {
            if node.constraints.forced[r].is_some() {
                continue;
            }
            let col = node.assignment.row_to_col[r];
            let mut child = fixed.clone();
            child.forbidden.push((r, col));
            if let Some(a) = child.solve(c) {
                heap.push(Node {
                    assignment: a,
                    constraints: child,
                });
            }
            fixed.forced[r] = Some(col);
        }
        out.push(node.assignment);
        if out.len() == k {
            break;
        }
    }
    Ok(out)
}
