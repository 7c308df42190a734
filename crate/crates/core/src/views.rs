//! Camera rings and the view chain that fixes which view drives which.

use crate::error::{Error, Result};
use crate::geometry::CameraView;

/// Processing order over views plus, for each view, the view that drives
/// it (transports its noise and supplies the gradient it is scored
/// against). The root has no driver. Drivers always precede the views
/// they drive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewChain {
    order: Vec<usize>,
    drivers: Vec<Option<usize>>,
}

impl ViewChain {
    pub fn new(order: Vec<usize>, drivers: Vec<Option<usize>>) -> Result<Self> {
        let n = drivers.len();
        let mut seen = vec![false; n];
        if order.len() != n {
            return Err(Error::Config("chain order must list every view once".into()));
        }
        for (pos, &v) in order.iter().enumerate() {
            if v >= n || seen[v] {
                return Err(Error::Config(format!("view {v} repeated or out of range in chain")));
            }
            match drivers[v] {
                None if pos != 0 => {
                    return Err(Error::Config(format!("only the first view may lack a driver (view {v})")))
                }
                Some(d) if d >= n || !seen[d] => {
                    return Err(Error::Config(format!("driver {d} of view {v} is not processed before it")))
                }
                Some(_) if pos == 0 => {
                    return Err(Error::Config("the first view cannot have a driver".into()))
                }
                _ => {}
            }
            seen[v] = true;
        }
        if n == 0 {
            return Err(Error::Config("chain needs at least one view".into()));
        }
        Ok(Self { order, drivers })
    }

    /// `0 -> 1 -> 2 -> ...`
    pub fn linear(n: usize) -> Result<Self> {
        let drivers = (0..n).map(|i| i.checked_sub(1)).collect();
        Self::new((0..n).collect(), drivers)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn root(&self) -> usize {
        self.order[0]
    }

    pub fn driver(&self, view: usize) -> Option<usize> {
        self.drivers[view]
    }
}

/// Signed ring step of the view at chain position `k`: 0, +1, -1, +2, -2, ...
pub fn ring_offset(k: usize) -> i64 {
    let m = k.div_ceil(2) as i64;
    if k % 2 == 1 {
        m
    } else {
        -m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RingSpec {
    pub views: usize,
    pub radius: f64,
    /// Maximum absolute pitch in degrees.
    pub pitch_range_deg: f64,
    pub focal: f64,
    pub resolution: usize,
}

impl Default for RingSpec {
    fn default() -> Self {
        Self {
            views: 13,
            radius: 3.0,
            pitch_range_deg: 30.0,
            focal: 38.4,
            resolution: 32,
        }
    }
}

impl RingSpec {
    pub fn azimuth_step_deg(&self) -> f64 {
        360.0 / self.views as f64
    }

    /// Azimuth and pitch of view `k` (its chain position).
    pub fn angles(&self, k: usize) -> (f64, f64) {
        let az = ring_offset(k) as f64 * self.azimuth_step_deg();
        let pitch = self.pitch_range_deg * az.to_radians().sin();
        (az, pitch)
    }
}

/// Cameras evenly spaced in azimuth around the origin, starting frontal and
/// alternating sides with growing azimuth. Pitch follows
/// `pitch_range * sin(azimuth)`, staying within the range. Each view is
/// driven by its angular neighbour one step closer to the front.
pub fn camera_ring(spec: &RingSpec) -> Result<(Vec<CameraView>, ViewChain)> {
    if spec.views == 0 {
        return Err(Error::Config("ring needs at least one view".into()));
    }
    if !(spec.pitch_range_deg.abs() < 90.0) {
        return Err(Error::Config("pitch range must stay below 90 degrees".into()));
    }
    let mut cams = Vec::with_capacity(spec.views);
    let mut drivers = Vec::with_capacity(spec.views);
    for k in 0..spec.views {
        let (az, pitch) = spec.angles(k);
        cams.push(CameraView::orbit(k, az, pitch, spec.radius, spec.focal, spec.resolution)?);
        // The neighbour one step towards the front sits two chain positions back.
        drivers.push(match k {
            0 => None,
            1 | 2 => Some(0),
            _ => Some(k - 2),
        });
    }
    let chain = ViewChain::new((0..spec.views).collect(), drivers)?;
    Ok((cams, chain))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_offsets_alternate() {
        let got: Vec<i64> = (0..7).map(ring_offset).collect();
        assert_eq!(got, vec![0, 1, -1, 2, -2, 3, -3]);
    }

    #[test]
    fn ring_pitch_within_range_and_drivers_adjacent() {
        let spec = RingSpec::default();
        let (cams, chain) = camera_ring(&spec).unwrap();
        assert_eq!(cams.len(), 13);
        for k in 0..13 {
            let (az, pitch) = spec.angles(k);
            assert!(pitch.abs() <= 30.0 + 1e-12);
            if let Some(d) = chain.driver(k) {
                let (daz, _) = spec.angles(d);
                assert!(((az - daz).abs() - spec.azimuth_step_deg()).abs() < 1e-9);
            }
        }
        assert_eq!(chain.root(), 0);
    }

    #[test]
    fn invalid_chains_are_rejected() {
        assert!(ViewChain::new(vec![0, 1], vec![None, None]).is_err());
        assert!(ViewChain::new(vec![1, 0], vec![Some(1), None]).is_ok());
        assert!(ViewChain::new(vec![0, 1], vec![Some(1), Some(0)]).is_err());
        assert!(ViewChain::new(vec![0, 0], vec![None, Some(0)]).is_err());
        assert!(ViewChain::linear(0).is_err());
    }
}
