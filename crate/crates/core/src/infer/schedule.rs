//! Hilbert-curve ordering of a 2-D tile grid.

/// Visit order over a `grid_m × grid_n` tile grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileSchedule {
    pub grid_m: usize,
    pub grid_n: usize,
    /// `(tile_row, tile_col)` pairs, every tile exactly once.
    pub order: Vec<(usize, usize)>,
}

impl TileSchedule {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// True when `order` visits every grid cell exactly once.
    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.grid_m * self.grid_n];
        for &(r, c) in &self.order {
            if r >= self.grid_m || c >= self.grid_n || seen[r * self.grid_n + c] {
                return false;
            }
            seen[r * self.grid_n + c] = true;
        }
        self.order.len() == seen.len()
    }
}

/// Maps distance `d` along the Hilbert curve of side `n` (a power of two)
/// to `(x, y)`.
fn d2xy(n: usize, mut d: usize) -> (usize, usize) {
    let (mut x, mut y) = (0, 0);
    let mut s = 1;
    while s < n {
        let rx = 1 & (d / 2);
        let ry = 1 & (d ^ rx);
        if ry == 0 {
            if rx == 1 {
                x = s - 1 - x;
                y = s - 1 - y;
            }
            std::mem::swap(&mut x, &mut y);
        }
        x += s * rx;
        y += s * ry;
        d /= 4;
        s *= 2;
    }
    (x, y)
}

/// Hilbert order over the grid. Non power-of-two grids walk the enclosing
/// power-of-two curve and skip cells outside the grid. An empty grid gives
/// an empty schedule.
pub fn hilbert_schedule(grid_m: usize, grid_n: usize) -> TileSchedule {
    let side = grid_m.max(grid_n).next_power_of_two();
    let mut order = Vec::with_capacity(grid_m * grid_n);
    if grid_m > 0 && grid_n > 0 {
        for d in 0..side * side {
            let (x, y) = d2xy(side, d);
            if x < grid_m && y < grid_n {
                order.push((x, y));
            }
        }
    }
    TileSchedule { grid_m, grid_n, order }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adjacent(s: &TileSchedule) -> bool {
        s.order
            .windows(2)
            .all(|w| w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1) == 1)
    }

    #[test]
    fn single_tile() {
        assert_eq!(hilbert_schedule(1, 1).order, vec![(0, 0)]);
    }

    #[test]
    fn square_grids_are_adjacent_bijections() {
        for side in [2, 4, 8, 16] {
            let s = hilbert_schedule(side, side);
            assert!(s.is_bijection());
            assert!(adjacent(&s), "side {side}");
        }
    }

    #[test]
    fn ragged_grids_are_bijections() {
        for (m, n) in [(3, 5), (1, 7), (9, 2), (13, 13)] {
            assert!(hilbert_schedule(m, n).is_bijection(), "{m}x{n}");
        }
    }
}
