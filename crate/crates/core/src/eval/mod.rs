//! Non-overlapping tiled prediction, per-class IOU, per-image mIOU and
//! test-set mmIOU.

mod metrics;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_pgm, MaskVolume, Volume};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::topology::Model;

pub use metrics::{confusion_matrix, iou_from_confusion, iou_per_class, miou_image, mmiou};

/// Anything that turns a batch of `N x H x W x 1` tiles into class scores.
pub trait Segmenter {
    fn num_classes(&self) -> usize;
    /// Rejects tile shapes the segmenter cannot take.
    fn check_tile(&self, tile_h: usize, tile_w: usize) -> Result<()>;
    /// `N x H x W x classes` scores.
    fn scores(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl<T: Scalar> Segmenter for Model<T> {
    fn num_classes(&self) -> usize {
        Model::num_classes(self)
    }

    fn check_tile(&self, tile_h: usize, tile_w: usize) -> Result<()> {
        self.check_input(&[1, tile_h, tile_w, self.spec().input_channels])
            .map_err(|e| Error::config(format!("tile {tile_h}x{tile_w} does not fit the model: {e}")))
    }

    fn scores(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.predict(&batch.cast::<T>())?.cast())
    }
}

/// Per-pixel argmax; ties go to the lowest class.
pub fn argmax_classes(scores: &[f32], classes: usize) -> Vec<u8> {
    scores
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Predicted labels over the covered region of one slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

/// Extent covered by whole non-overlapping tiles.
pub fn covered_region(h: usize, w: usize, tile_h: usize, tile_w: usize) -> (usize, usize) {
    (h / tile_h * tile_h, w / tile_w * tile_w)
}

/// Tiles of a batch are predicted together.
const PREDICT_BATCH: usize = 16;

/// Splits the slice into non-overlapping tiles, predicts each and writes
/// the argmax labels back at the tile origins. The border not covered by a
/// whole tile is left out.
pub fn predict_slice_mask<S: Segmenter + ?Sized>(
    model: &S,
    image: &[f32],
    h: usize,
    w: usize,
    tile_h: usize,
    tile_w: usize,
) -> Result<SliceMask> {
    if image.len() != h * w {
        return Err(Error::dim(format!("{} pixels for a {h}x{w} slice", image.len())));
    }
    if tile_h == 0 || tile_w == 0 || tile_h > h || tile_w > w {
        return Err(Error::config(format!(
            "tile {tile_h}x{tile_w} does not fit a {h}x{w} slice"
        )));
    }
    model.check_tile(tile_h, tile_w)?;
    let (ch, cw) = covered_region(h, w, tile_h, tile_w);
    let origins: Vec<(usize, usize)> = (0..ch / tile_h)
        .flat_map(|i| (0..cw / tile_w).map(move |j| (i * tile_h, j * tile_w)))
        .collect();
    let mut labels = vec![0u8; ch * cw];
    let per = tile_h * tile_w;
    let classes = model.num_classes();
    for chunk in origins.chunks(PREDICT_BATCH) {
        let mut batch = Vec::with_capacity(chunk.len() * per);
        for &(r0, c0) in chunk {
            for r in r0..r0 + tile_h {
                batch.extend_from_slice(&image[r * w + c0..r * w + c0 + tile_w]);
            }
        }
        let batch = Tensor::new(&[chunk.len(), tile_h, tile_w, 1], batch)?;
        let scores = model.scores(&batch)?;
        if scores.shape() != [chunk.len(), tile_h, tile_w, classes] {
            return Err(Error::config(format!(
                "segmenter returned {:?} for {} tiles of {tile_h}x{tile_w}",
                scores.shape(),
                chunk.len()
            )));
        }
        let pred = argmax_classes(scores.data(), classes);
        for (t, &(r0, c0)) in chunk.iter().enumerate() {
            for r in 0..tile_h {
                let src = &pred[t * per + r * tile_w..t * per + (r + 1) * tile_w];
                labels[(r0 + r) * cw + c0..(r0 + r) * cw + c0 + tile_w].copy_from_slice(src);
            }
        }
    }
    Ok(SliceMask {
        height: ch,
        width: cw,
        labels,
    })
}

/// Ground truth restricted to the top-left `ch x cw` region.
pub fn crop(labels: &[u8], w: usize, ch: usize, cw: usize) -> Vec<u8> {
    (0..ch)
        .flat_map(|r| labels[r * w..r * w + cw].iter().copied())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub slice: usize,
    pub iou: Vec<f64>,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub num_classes: usize,
    /// `[height, width]` of the region actually scored.
    pub coverage: [usize; 2],
    pub images: Vec<ImageReport>,
    pub mmiou: f64,
    /// Mean over images of each class's IOU.
    pub class_mean_iou: Vec<f64>,
    /// `confusion[gt][pred]` pixel counts over all images.
    pub confusion: Vec<Vec<u64>>,
}

impl SegmentationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One row per image (`index,iou_0..,miou`), then an `mmiou` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index");
        (0..self.num_classes).for_each(|c| write!(out, ",iou_{c}").expect("string write"));
        out.push_str(",miou\n");
        for img in &self.images {
            write!(out, "{}", img.slice).expect("string write");
            img.iou
                .iter()
                .for_each(|v| write!(out, ",{v:.6}").expect("string write"));
            writeln!(out, ",{:.6}", img.miou).expect("string write");
        }
        writeln!(out, "mmiou{},{:.6}", ",".repeat(self.num_classes), self.mmiou).expect("string write");
        out
    }

    pub fn write(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        for (path, text) in [(json_path, self.to_json()?), (csv_path, self.to_csv())] {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::write(path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Predicts every test slice and scores it on its covered region.
pub fn evaluate_testset<S: Segmenter + ?Sized>(
    model: &S,
    volume: &Volume,
    masks: &MaskVolume,
    test_indices: &[usize],
    tile_h: usize,
    tile_w: usize,
) -> Result<SegmentationReport> {
    if volume.dims() != masks.dims() {
        return Err(Error::dim(format!(
            "volume {:?} and masks {:?} differ in shape",
            volume.dims(),
            masks.dims()
        )));
    }
    let nc = masks.num_classes();
    if model.num_classes() != nc {
        return Err(Error::config(format!(
            "model predicts {} classes, masks have {nc}",
            model.num_classes()
        )));
    }
    let mut order = test_indices.to_vec();
    order.sort_unstable();
    order.dedup();
    if order.is_empty() {
        return Err(Error::config("no test slices to evaluate"));
    }
    let (h, w) = (volume.height(), volume.width());
    let mut confusion = vec![vec![0u64; nc]; nc];
    let mut images = Vec::with_capacity(order.len());
    let mut coverage = [0, 0];
    for &s in &order {
        if s >= volume.slices() {
            return Err(Error::config(format!("test slice {s} out of range")));
        }
        let pred = predict_slice_mask(model, volume.slice(s), h, w, tile_h, tile_w)?;
        coverage = [pred.height, pred.width];
        let gt = crop(masks.slice(s), w, pred.height, pred.width);
        let m = confusion_matrix(&pred.labels, &gt, nc)?;
        for (acc, row) in confusion.iter_mut().zip(&m) {
            acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        let iou = iou_from_confusion(&m);
        let miou = miou_image(&iou)?;
        images.push(ImageReport { slice: s, iou, miou });
    }
    let mmiou = mmiou(&images.iter().map(|i| i.miou).collect::<Vec<_>>())?;
    let class_mean_iou = (0..nc)
        .map(|c| images.iter().map(|i| i.iou[c]).sum::<f64>() / images.len() as f64)
        .collect();
    Ok(SegmentationReport {
        num_classes: nc,
        coverage,
        images,
        mmiou,
        class_mean_iou,
        confusion,
    })
}

/// Labels scaled by `floor(255 / (classes - 1))` for viewing.
pub fn mask_to_grey(labels: &[u8], num_classes: usize) -> Vec<u8> {
    let step = 255 / (num_classes.max(2) - 1);
    labels.iter().map(|&l| (l as usize * step).min(255) as u8).collect()
}

pub fn export_mask_pgm(path: &Path, mask: &SliceMask, num_classes: usize) -> Result<()> {
    write_pgm(path, mask.width, mask.height, &mask_to_grey(&mask.labels, num_classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reads the class straight off the pixel value.
    struct PixelOracle(usize);

    impl Segmenter for PixelOracle {
        fn num_classes(&self) -> usize {
            self.0
        }

        fn check_tile(&self, _: usize, _: usize) -> Result<()> {
            Ok(())
        }

        fn scores(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
            let mut shape = batch.shape().to_vec();
            shape[3] = self.0;
            let mut out = vec![0.0; batch.len() * self.0];
            for (i, &v) in batch.data().iter().enumerate() {
                out[i * self.0 + v as usize] = 1.0;
            }
            Tensor::new(&shape, out)
        }
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax_classes(&[1.0, 3.0, 3.0, 0.0, 0.0, 0.0], 3), vec![1, 0]);
    }

    #[test]
    fn covered_region_of_survey_slice() {
        assert_eq!(covered_region(481, 1501, 80, 120), (480, 1440));
    }

    #[test]
    fn oracle_reassembles_ground_truth() {
        let (h, w) = (9, 13);
        let gt: Vec<u8> = (0..h * w).map(|i| ((i / 3 + i % 5) % 4) as u8).collect();
        let image: Vec<f32> = gt.iter().map(|&v| v as f32).collect();
        let mask = predict_slice_mask(&PixelOracle(4), &image, h, w, 4, 6).unwrap();
        assert_eq!((mask.height, mask.width), (8, 12));
        assert_eq!(mask.labels, crop(&gt, w, 8, 12));
    }

    #[test]
    fn constant_prediction_report() {
        // 4x4 mask, top row class 0 (25%), rest class 1; model says class 0.
        let gt: Vec<u8> = (0..16).map(|i| u8::from(i >= 4)).collect();
        let vol = Volume::new([1, 4, 4], vec![0.0; 16], Default::default()).unwrap();
        let masks = MaskVolume::new([1, 4, 4], gt, 2).unwrap();
        let r = evaluate_testset(&PixelOracle(2), &vol, &masks, &[0], 2, 2).unwrap();
        assert_eq!(r.images[0].iou, vec![0.25, 0.0]);
        assert_eq!(r.mmiou, 0.125);
        assert_eq!(r.confusion, vec![vec![4, 0], vec![12, 0]]);
        assert!(r.to_csv().ends_with("mmiou,,,0.125000\n"));
    }

    #[test]
    fn grey_scaling() {
        assert_eq!(mask_to_grey(&[0, 1, 6], 7), vec![0, 42, 252]);
    }
}
