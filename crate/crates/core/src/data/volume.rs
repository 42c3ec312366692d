use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Free-form provenance stored in the JSON sidecar.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VolumeMeta {
    pub axis_labels: Vec<String>,
    pub source: String,
}

impl VolumeMeta {
    pub fn new(source: impl Into<String>) -> Self {
        Self {
            axis_labels: vec!["slice".into(), "depth".into(), "trace".into()],
            source: source.into(),
        }
    }
}

fn check_dims(dims: [usize; 3], len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::dim(format!("volume extents must be >= 1, got {dims:?}")));
    }
    if dims.iter().product::<usize>() != len {
        return Err(Error::dim(format!("{len} samples for a {dims:?} volume")));
    }
    Ok(())
}

/// Amplitudes, `slices x depth x traces`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f32>,
    pub meta: VolumeMeta,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>, meta: VolumeMeta) -> Result<Self> {
        check_dims(dims, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::dim(format!("non-finite sample at flat index {i}")));
        }
        Ok(Self { dims, data, meta })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn slices(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn slice(&self, i: usize) -> &[f32] {
        let n = self.dims[1] * self.dims[2];
        &self.data[i * n..(i + 1) * n]
    }

    /// Replaces the samples, keeping dims and metadata.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.dims, data, self.meta.clone())
    }
}

/// Class labels, same layout as [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    dims: [usize; 3],
    data: Vec<u8>,
    num_classes: usize,
}

impl MaskVolume {
    pub fn new(dims: [usize; 3], data: Vec<u8>, num_classes: usize) -> Result<Self> {
        check_dims(dims, data.len())?;
        if let Some(i) = data.iter().position(|&v| v as usize >= num_classes) {
            let per = dims[1] * dims[2];
            let (s, r) = (i / per, i % per);
            return Err(Error::Label {
                value: data[i],
                num_classes,
                position: format!("(slice={s}, row={}, col={})", r / dims[2], r % dims[2]),
            });
        }
        Ok(Self {
            dims,
            data,
            num_classes,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn slices(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn slice(&self, i: usize) -> &[u8] {
        let n = self.dims[1] * self.dims[2];
        &self.data[i * n..(i + 1) * n]
    }
}

/// Original label to merged label: classes 2 and 3 become one.
pub const MERGE_MAP: [u8; 8] = [0, 1, 2, 2, 3, 4, 5, 6];

/// Maps an 8-class mask onto 7 classes.
pub fn merge_classes(m: &MaskVolume) -> Result<MaskVolume> {
    if m.num_classes != 8 {
        return Err(Error::contract(format!(
            "class merging expects an 8-class mask, got {} classes",
            m.num_classes
        )));
    }
    let data = m.data.iter().map(|&v| MERGE_MAP[v as usize]).collect();
    MaskVolume::new(m.dims, data, 7)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_map_values() {
        let m = MaskVolume::new([1, 1, 8], (0..8).collect(), 8).unwrap();
        let merged = merge_classes(&m).unwrap();
        assert_eq!(merged.data(), &[0, 1, 2, 2, 3, 4, 5, 6]);
        assert_eq!(merged.num_classes(), 7);
        assert_eq!(merged.dims(), m.dims());
    }

    #[test]
    fn merging_twice_is_rejected() {
        let m = MaskVolume::new([1, 2, 2], vec![0, 3, 7, 1], 8).unwrap();
        let once = merge_classes(&m).unwrap();
        assert!(matches!(merge_classes(&once), Err(Error::Contract(_))));
    }

    #[test]
    fn out_of_range_label_reports_position() {
        let err = MaskVolume::new([2, 2, 3], vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 9, 0], 7).unwrap_err();
        match err {
            Error::Label { value, position, .. } => {
                assert_eq!(value, 9);
                assert_eq!(position, "(slice=1, row=1, col=1)");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn volume_rejects_bad_extents_and_nan() {
        assert!(Volume::new([0, 1, 1], vec![], VolumeMeta::default()).is_err());
        assert!(Volume::new([1, 2, 2], vec![0.0; 3], VolumeMeta::default()).is_err());
        assert!(Volume::new([1, 1, 2], vec![0.0, f32::NAN], VolumeMeta::default()).is_err());
        let v = Volume::new([2, 1, 2], vec![1.0, 2.0, 3.0, 4.0], VolumeMeta::default()).unwrap();
        assert_eq!(v.slice(1), &[3.0, 4.0]);
    }
}
