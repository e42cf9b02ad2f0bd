use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// Absolute layout of one object: `[centroid, std, extent, volume, max_length]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialDescriptor {
    pub centroid: [f64; 3],
    /// Population standard deviation per axis.
    pub std: [f64; 3],
    /// `max − min` per axis.
    pub extent: [f64; 3],
    pub volume: f64,
    pub max_length: f64,
}

pub const DESCRIPTOR_DIM: usize = 11;

impl SpatialDescriptor {
    pub fn to_array(&self) -> [f64; DESCRIPTOR_DIM] {
        let mut a = [0.0; DESCRIPTOR_DIM];
        a[0..3].copy_from_slice(&self.centroid);
        a[3..6].copy_from_slice(&self.std);
        a[6..9].copy_from_slice(&self.extent);
        a[9] = self.volume;
        a[10] = self.max_length;
        a
    }

    pub fn from_array(a: &[f64; DESCRIPTOR_DIM]) -> Self {
        Self {
            centroid: [a[0], a[1], a[2]],
            std: [a[3], a[4], a[5]],
            extent: [a[6], a[7], a[8]],
            volume: a[9],
            max_length: a[10],
        }
    }
}

pub fn compute_descriptor(points: &[Point]) -> Result<SpatialDescriptor> {
    if points.is_empty() {
        return Err(Error::invalid("descriptor of an empty point set"));
    }
    let n = points.len() as f64;
    let mut centroid = [0.0; 3];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for k in 0..3 {
            centroid[k] += p[k];
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n);
    let mut var = [0.0; 3];
    for p in points {
        for k in 0..3 {
            var[k] += (p[k] - centroid[k]).powi(2);
        }
    }
    let std = var.map(|v| (v / n).sqrt());
    let extent = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    Ok(SpatialDescriptor {
        centroid,
        std,
        extent,
        volume: extent[0] * extent[1] * extent[2],
        max_length: extent[0].max(extent[1]).max(extent[2]),
    })
}
