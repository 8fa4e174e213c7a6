use crate::geometry::Pose;

/// Progressive pseudo poses: for each target, the nearest training pose
/// (by camera center) moved a fraction `round / steps` of the way toward the
/// target, clamped at the target.
pub fn schedule_pseudo_poses(train: &[Pose], targets: &[Pose], steps: usize, round: usize) -> Vec<Pose> {
    assert!(!train.is_empty() && steps >= 1);
    let frac = (round as f64 / steps as f64).min(1.0);
    targets
        .iter()
        .map(|t| {
            let near = nearest(train, t);
            Pose::interpolate(near, t, frac)
        })
        .collect()
}

pub fn nearest<'a>(train: &'a [Pose], target: &Pose) -> &'a Pose {
    let c = target.center();
    train
        .iter()
        .min_by(|a, b| (a.center() - c).norm().total_cmp(&(b.center() - c).norm()))
        .unwrap()
}

/// Iterations at which pseudo ground truth is (re)generated.
pub fn injection_iterations(iterations: usize, start_fraction: f64, interval_fraction: f64) -> Vec<usize> {
    if iterations == 0 || interval_fraction <= 0.0 {
        return Vec::new();
    }
    let start = (start_fraction * iterations as f64).round() as usize;
    let step = ((interval_fraction * iterations as f64).round() as usize).max(1);
    (start..iterations).step_by(step).collect()
}
