//! Fixtures shared by the benchmarks.

use rwre_core::{Direction, EmpiricalCgf, EnvironmentModel, SampleSet};

/// Default non-nestling model in the plane with direction `e1`.
pub fn planar() -> (EnvironmentModel, Direction) {
    (EnvironmentModel::non_nestling_default(), Direction::new(vec![1, 0]).expect("valid direction"))
}

/// A harvested sample set and its cumulant.
pub fn fitted(count: usize, seed: u64) -> (SampleSet, EmpiricalCgf) {
    let (model, dir) = planar();
    let set = SampleSet::harvest(&model, &dir, count, None, seed, None).expect("harvest");
    let cgf = EmpiricalCgf::new(&set).expect("cgf");
    (set, cgf)
}
