//! Relative geometry between two descriptors.
//!
//! Positions are stored as differences and every scale field as a log
//! ratio, which makes `apply` the exact inverse of `relative_geometry` and
//! lets relations compose along paths.

use super::descriptor::{SpatialDescriptor, DESCRIPTOR_DIM};

/// Scale fields below this (in meters, or m³ for volume) are floored
/// before taking log ratios.
pub const SCALE_FLOOR: f64 = 1e-6;

/// `[dpos(3), dstd(3), dextent(3), dvol, dlen]`, log ratios for all but dpos.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeGeometry(pub [f64; DESCRIPTOR_DIM]);

impl EdgeGeometry {
    pub fn zero() -> Self {
        Self([0.0; DESCRIPTOR_DIM])
    }

    pub fn dpos(&self) -> [f64; 3] {
        [self.0[0], self.0[1], self.0[2]]
    }

    /// The relation seen from the other endpoint.
    pub fn reversed(&self) -> Self {
        Self(self.0.map(|v| -v))
    }

    pub fn as_array(&self) -> &[f64; DESCRIPTOR_DIM] {
        &self.0
    }
}

fn floored(v: f64) -> f64 {
    v.max(SCALE_FLOOR)
}

pub fn relative_geometry(si: &SpatialDescriptor, sj: &SpatialDescriptor) -> EdgeGeometry {
    let a = si.to_array();
    let b = sj.to_array();
    let mut r = [0.0; DESCRIPTOR_DIM];
    for k in 0..3 {
        r[k] = b[k] - a[k];
    }
    for k in 3..DESCRIPTOR_DIM {
        r[k] = (floored(b[k]) / floored(a[k])).ln();
    }
    EdgeGeometry(r)
}

/// `s ⊕ r`. Scale fields that were floored come back as the floor.
pub fn apply(s: &SpatialDescriptor, r: &EdgeGeometry) -> SpatialDescriptor {
    let a = s.to_array();
    let mut out = [0.0; DESCRIPTOR_DIM];
    for k in 0..3 {
        out[k] = a[k] + r.0[k];
    }
    for k in 3..DESCRIPTOR_DIM {
        out[k] = floored(a[k]) * r.0[k].exp();
    }
    SpatialDescriptor::from_array(&out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc(c: [f64; 3], s: [f64; 3], e: [f64; 3]) -> SpatialDescriptor {
        SpatialDescriptor {
            centroid: c,
            std: s,
            extent: e,
            volume: e[0] * e[1] * e[2],
            max_length: e[0].max(e[1]).max(e[2]),
        }
    }

    fn close(a: &SpatialDescriptor, b: &SpatialDescriptor) -> bool {
        a.to_array()
            .iter()
            .zip(b.to_array())
            .all(|(x, y)| (x - y).abs() <= 1e-9 * y.abs().max(1e-12))
    }

    #[test]
    fn identity_is_zero() {
        let s = desc([1., 2., 3.], [0.1, 0.2, 0.3], [0.5, 0.6, 0.7]);
        assert_eq!(relative_geometry(&s, &s), EdgeGeometry::zero());
    }

    #[test]
    fn chain_composes() {
        let a = desc([0., 0., 0.], [0.1, 0.2, 0.3], [0.5, 0.6, 0.7]);
        let b = desc([1., -2., 0.5], [0.4, 0.1, 0.2], [1.5, 0.2, 0.9]);
        let c = desc([3., 1., 0.2], [0.05, 0.3, 0.3], [0.2, 1.1, 1.3]);
        let rab = relative_geometry(&a, &b);
        let rbc = relative_geometry(&b, &c);
        assert!(close(&apply(&apply(&a, &rab), &rbc), &c));
        assert!(close(&apply(&c, &rbc.reversed()), &b));
    }

    #[test]
    fn position_antisymmetric() {
        let a = desc([0.3, 0., 1.], [0.1; 3], [0.5; 3]);
        let b = desc([1., -2., 0.5], [0.4; 3], [1.5; 3]);
        let rab = relative_geometry(&a, &b).dpos();
        let rba = relative_geometry(&b, &a).dpos();
        for k in 0..3 {
            assert_eq!(rab[k], -rba[k]);
        }
    }

    #[test]
    fn zero_scales_are_floored() {
        let flat = desc([0.; 3], [0.1, 0.1, 0.0], [1.0, 1.0, 0.0]);
        let b = desc([1.; 3], [0.2; 3], [0.5; 3]);
        let r = relative_geometry(&flat, &b);
        assert!(r.0.iter().all(|v| v.is_finite()));
        assert!(close(&apply(&flat, &r), &b));
    }
}
