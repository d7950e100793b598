use super::MetricError;

/// Dense `rows × cols` cost matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, MetricError> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(MetricError::Shape(format!(
                "cost matrix {rows}x{cols} with {} entries",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MetricError::InvalidCost {
                row: i / cols,
                col: i % cols,
                value: values[i],
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self, MetricError> {
        let values = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self::new(rows, cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

/// Partial row → column map covering `min(rows, cols)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub row_to_col: Vec<Option<usize>>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.row_to_col
            .iter()
            .enumerate()
            .filter_map(|(r, c)| c.map(|c| (r, c)))
    }

    pub fn col_to_row(&self, cols: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; cols];
        for (r, c) in self.pairs() {
            out[c] = Some(r);
        }
        out
    }
}

/// Minimum-cost assignment (Kuhn–Munkres with row/column potentials).
///
/// Rectangular inputs are padded to square with a constant one above the
/// largest real entry; padded pairs are dropped from the result.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment, MetricError> {
    let n = cost.rows.max(cost.cols);
    let pad = cost.values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let at = |r: usize, c: usize| -> f64 {
        if r < cost.rows && c < cost.cols {
            cost.get(r, c)
        } else {
            pad
        }
    };

    // 1-based potentials formulation; column 0 is a sentinel.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![None; cost.rows];
    let mut total_cost = 0.0;
    for j in 1..=n {
        let r = col_row[j] - 1;
        let c = j - 1;
        if r < cost.rows && c < cost.cols {
            row_to_col[r] = Some(c);
            total_cost += cost.get(r, c);
        }
    }
    Ok(Assignment {
        row_to_col,
        total_cost,
    })
}
