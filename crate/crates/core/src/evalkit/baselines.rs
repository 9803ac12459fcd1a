use super::Detection;
use crate::assignment::{hungarian, BBox, CostMatrix};
use crate::error::Result;

/// Maximum center distance (normalized units) for linking two detections.
pub const TRACKING_GATE: f64 = 0.2;

/// Frame-`t` detections reused as the future prediction.
pub fn naive_baseline(current: &[Detection]) -> Vec<Detection> {
    current.to_vec()
}

/// Detections on the future frame itself.
pub fn oracle(future: &[Detection]) -> Vec<Detection> {
    future.to_vec()
}

/// Links frame `t-1` and frame `t` detections per class by minimum total
/// center distance, then extrapolates every linked center by
/// `(c_t - c_{t-1}) · horizon / dt`. Links longer than the gate are dropped;
/// unlinked frame-`t` detections pass through unchanged.
///
/// The output keeps the order of `current`.
pub fn tracking_baseline(
    previous: &[Detection],
    current: &[Detection],
    dt: f64,
    horizon: f64,
) -> Result<Vec<Detection>> {
    let mut out = current.to_vec();
    let classes = current.iter().map(|d| d.class + 1).max().unwrap_or(0);
    for class in 0..classes {
        let cur: Vec<usize> = (0..current.len()).filter(|&i| current[i].class == class).collect();
        let prev: Vec<usize> = (0..previous.len()).filter(|&i| previous[i].class == class).collect();
        if cur.is_empty() || prev.is_empty() {
            continue;
        }
        for (c, p) in link(&cur, &prev, current, previous)? {
            let (a, b) = (&previous[p].bbox, &current[c].bbox);
            if a.center_distance(b) > TRACKING_GATE {
                continue;
            }
            let k = horizon / dt;
            out[c].bbox = BBox::new(
                b.cx + (b.cx - a.cx) * k,
                b.cy + (b.cy - a.cy) * k,
                b.w,
                b.h,
            );
        }
    }
    Ok(out)
}

/// Minimum-cost pairs `(current index, previous index)`.
fn link(cur: &[usize], prev: &[usize], current: &[Detection], previous: &[Detection]) -> Result<Vec<(usize, usize)>> {
    let dist = |c: usize, p: usize| current[c].bbox.center_distance(&previous[p].bbox);
    // the larger side plays the slots of the assignment
    if cur.len() >= prev.len() {
        let m = CostMatrix::from_fn(cur.len(), prev.len(), |r, k| dist(cur[r], prev[k]));
        Ok(hungarian(&m)?
            .pairs()
            .into_iter()
            .map(|(r, k)| (cur[r], prev[k]))
            .collect())
    } else {
        let m = CostMatrix::from_fn(prev.len(), cur.len(), |r, k| dist(cur[k], prev[r]));
        Ok(hungarian(&m)?
            .pairs()
            .into_iter()
            .map(|(r, k)| (cur[k], prev[r]))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class: usize, cx: f64, cy: f64) -> Detection {
        Detection {
            sample: 0,
            class,
            confidence: 0.9,
            bbox: BBox::new(cx, cy, 0.1, 0.1),
        }
    }

    #[test]
    fn linear_extrapolation() {
        let out = tracking_baseline(&[det(0, 0.40, 0.5)], &[det(0, 0.45, 0.5)], 0.5, 0.5).unwrap();
        assert!((out[0].bbox.cx - 0.50).abs() < 1e-12);
        assert_eq!(out[0].bbox.w, 0.1);
        assert_eq!(out[0].confidence, 0.9);
    }

    #[test]
    fn unmatched_and_gated_pass_through() {
        let cur = [det(0, 0.5, 0.5), det(1, 0.2, 0.2)];
        let out = tracking_baseline(&[det(0, 0.9, 0.9)], &cur, 0.5, 0.5).unwrap();
        assert_eq!(out, cur.to_vec());
        assert!(tracking_baseline(&[], &[], 0.5, 0.5).unwrap().is_empty());
    }

    #[test]
    fn static_objects_stay_put() {
        let d = [det(0, 0.3, 0.3), det(0, 0.6, 0.7)];
        assert_eq!(tracking_baseline(&d, &d, 0.5, 0.5).unwrap(), d.to_vec());
    }
}
