use crate::error::{Error, Result};

use super::{EnvParams, Family};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridSide {
    Train,
    Test,
}

/// Five training values per parameter, evenly spread over its range, and
/// five held-out test values offset by half a step.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrid {
    family: Family,
    ranges: Vec<(f64, f64)>,
    train: Vec<Vec<f64>>,
    test: Vec<Vec<f64>>,
}

pub const VALUES_PER_PARAM: usize = 5;

pub fn grid_make(family: Family, ranges: &[(f64, f64)]) -> Result<ParamGrid> {
    if ranges.len() != family.num_params() {
        return Err(Error::dim(
            format!("{} parameter ranges", family.name()),
            family.num_params(),
            ranges.len(),
        ));
    }
    let mut train = Vec::with_capacity(ranges.len());
    let mut test = Vec::with_capacity(ranges.len());
    for (i, &(lo, hi)) in ranges.iter().enumerate() {
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::invalid(format!(
                "range for `{}` must satisfy 0 < lo < hi, got ({lo}, {hi})",
                family.param_names()[i]
            )));
        }
        let step = (hi - lo) / (VALUES_PER_PARAM - 1) as f64;
        let t: Vec<f64> = (0..VALUES_PER_PARAM).map(|k| lo + k as f64 * step).collect();
        test.push(t.iter().map(|v| v + step / 2.0).collect());
        train.push(t);
    }
    Ok(ParamGrid {
        family,
        ranges: ranges.to_vec(),
        train,
        test,
    })
}

impl ParamGrid {
    pub fn family(&self) -> Family {
        self.family
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }

    pub fn values(&self, side: GridSide) -> &[Vec<f64>] {
        match side {
            GridSide::Train => &self.train,
            GridSide::Test => &self.test,
        }
    }

    pub fn num_cells(&self) -> usize {
        VALUES_PER_PARAM.pow(self.train.len() as u32)
    }

    /// Mixed-radix digits of `cell`, last parameter varying fastest.
    pub fn cell_digits(&self, cell: usize) -> Vec<usize> {
        let mut digits = vec![0; self.train.len()];
        let mut rest = cell;
        for d in digits.iter_mut().rev() {
            *d = rest % VALUES_PER_PARAM;
            rest /= VALUES_PER_PARAM;
        }
        digits
    }

    pub fn cell_index(&self, digits: &[usize]) -> usize {
        digits.iter().fold(0, |acc, &d| acc * VALUES_PER_PARAM + d)
    }

    pub fn cell_values(&self, side: GridSide, cell: usize) -> Vec<f64> {
        let vals = self.values(side);
        self.cell_digits(cell)
            .iter()
            .enumerate()
            .map(|(p, &d)| vals[p][d])
            .collect()
    }

    pub fn params(&self, side: GridSide, cell: usize) -> Result<EnvParams> {
        if cell >= self.num_cells() {
            return Err(Error::invalid(format!("grid cell {cell} out of range")));
        }
        EnvParams::new(self.family, self.cell_values(side, cell))
    }

    /// Index of the cell holding every parameter's middle training value.
    pub fn center_cell(&self) -> usize {
        self.cell_index(&vec![VALUES_PER_PARAM / 2; self.train.len()])
    }

    /// Per-parameter midpoint of the training values; the default used when
    /// sweeping one parameter at a time.
    pub fn default_values(&self) -> Vec<f64> {
        self.train.iter().map(|v| v[VALUES_PER_PARAM / 2]).collect()
    }

    pub fn param_index(&self, name: &str) -> Result<usize> {
        self.family
            .param_names()
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}` for {}", self.family.name())))
    }

    /// Mean and variance of each parameter over the training cells.
    pub fn train_moments(&self) -> Vec<(f64, f64)> {
        self.train
            .iter()
            .map(|v| {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                (mean, var)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_range_matches_documented_example() {
        let g = grid_make(Family::SlidePuck, &[(1.0, 5.0), (1.0, 5.0)]).unwrap();
        assert_eq!(g.values(GridSide::Train)[0], vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(g.values(GridSide::Test)[0], vec![1.5, 2.5, 3.5, 4.5, 5.5]);
        assert_eq!(g.num_cells(), 25);
        assert_eq!(g.cell_values(GridSide::Train, g.center_cell()), vec![3.0, 3.0]);
    }

    #[test]
    fn degenerate_ranges_rejected() {
        assert!(grid_make(Family::SlidePuck, &[(2.0, 2.0), (1.0, 2.0)]).is_err());
        assert!(grid_make(Family::SlidePuck, &[(0.0, 2.0), (1.0, 2.0)]).is_err());
        assert!(grid_make(Family::SlidePuck, &[(1.0, 2.0)]).is_err());
    }

    #[test]
    fn digits_round_trip() {
        let g = grid_make(Family::SpringHopper, &Family::SpringHopper.default_ranges()).unwrap();
        assert_eq!(g.num_cells(), 625);
        for c in [0, 1, 5, 124, 624] {
            assert_eq!(g.cell_index(&g.cell_digits(c)), c);
        }
        assert!(g.params(GridSide::Train, 625).is_err());
    }

    proptest! {
        #[test]
        fn train_and_test_values_never_intersect(lo in 0.01f64..10.0, width in 1e-3f64..10.0) {
            let g = grid_make(Family::SlidePuck, &[(lo, lo + width), (1.0, 2.0)]).unwrap();
            for t in &g.values(GridSide::Test)[0] {
                prop_assert!(!g.values(GridSide::Train)[0].iter().any(|v| v == t));
            }
        }
    }
}
