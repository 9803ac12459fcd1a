use crate::error::{Error, Result};

/// Dense `rows × cols` cost matrix; rows are prediction slots, columns are
/// annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("cost_matrix", &[rows, cols], &[data.len()]));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// For every prediction slot, the annotation it is matched to (`None` is
/// background).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub slots: Vec<Option<usize>>,
}

impl Assignment {
    pub fn background(slots: usize) -> Self {
        Self {
            slots: vec![None; slots],
        }
    }

    /// `(slot, annotation)` pairs ordered by annotation index.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs: Vec<(usize, usize)> = self
            .slots
            .iter()
            .enumerate()
            .filter_map(|(s, a)| a.map(|a| (s, a)))
            .collect();
        pairs.sort_by_key(|p| p.1);
        pairs
    }

    pub fn matched(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    /// Total cost, summed in annotation order.
    pub fn total(&self, cost: &CostMatrix) -> f64 {
        self.pairs().iter().map(|&(s, a)| cost.get(s, a)).sum()
    }
}

/// Minimum-cost injective assignment of every column (annotation) to a
/// distinct row (slot), for `rows ≥ cols`.
///
/// Shortest-augmenting-path Hungarian method with row/column potentials,
/// `O(cols² · rows)`. Columns are inserted in index order and candidate rows
/// scanned in index order with strict improvement, so among equal-cost
/// alternatives the lower slot index is kept and results are reproducible.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let (m, n) = (cost.rows, cost.cols);
    if m < n {
        return Err(Error::Contract(format!(
            "hungarian needs at least as many slots as annotations ({m} < {n})"
        )));
    }
    if let Some(bad) = cost.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Contract(format!("non-finite cost entry {bad}")));
    }
    if n == 0 {
        return Ok(Assignment::background(m));
    }

    // Internally annotations are "workers" (1..=n) and slots "jobs" (1..=m);
    // index 0 is the virtual source.
    let a = |worker: usize, job: usize| cost.get(job - 1, worker - 1);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for worker in 1..=n {
        owner[0] = worker;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut slots = vec![None; m];
    for job in 1..=m {
        if owner[job] != 0 {
            slots[job - 1] = Some(owner[job] - 1);
        }
    }
    Ok(Assignment { slots })
}
