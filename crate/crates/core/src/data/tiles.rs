use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::segv::{read_segv, write_segv, SegvArray, SegvPayload};
use super::{MaskVolume, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgePolicy {
    /// Tiles that would cross the slice border are not emitted.
    #[default]
    DropPartial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TileConfig {
    pub tile_h: usize,
    pub tile_w: usize,
    pub overlap: f64,
    pub edge_policy: EdgePolicy,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            tile_h: 80,
            tile_w: 120,
            overlap: 0.5,
            edge_policy: EdgePolicy::DropPartial,
        }
    }
}

impl TileConfig {
    pub fn new(tile_h: usize, tile_w: usize, overlap: f64) -> Self {
        Self {
            tile_h,
            tile_w,
            overlap,
            edge_policy: EdgePolicy::DropPartial,
        }
    }

    /// `(stride_h, stride_w)`; both must be positive integers.
    pub fn strides(&self) -> Result<(usize, usize)> {
        if self.tile_h == 0 || self.tile_w == 0 {
            return Err(Error::config("tiles: tile extents must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::config(format!(
                "tiles.overlap must be in [0, 1), got {}",
                self.overlap
            )));
        }
        let stride = |t: usize, axis: &str| {
            let s = t as f64 * (1.0 - self.overlap);
            let r = s.round();
            if (s - r).abs() > 1e-9 || r < 1.0 {
                Err(Error::config(format!(
                    "tiles: {axis} stride {t} x (1 - {}) = {s} is not a positive integer",
                    self.overlap
                )))
            } else {
                Ok(r as usize)
            }
        };
        Ok((stride(self.tile_h, "vertical")?, stride(self.tile_w, "horizontal")?))
    }
}

/// One image/mask crop and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub slice: usize,
    pub row: usize,
    pub col: usize,
}

/// Tiles of equal size in `(slice, row, col)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct TileSet {
    pub tile_h: usize,
    pub tile_w: usize,
    pub num_classes: usize,
    pub tiles: Vec<Tile>,
}

/// Origins along one axis: `0, s, 2s, ...` while the tile still fits.
pub fn tile_origins(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    if tile > extent {
        return Vec::new();
    }
    (0..=(extent - tile) / stride).map(|i| i * stride).collect()
}

/// Closed-form tile count per slice.
pub fn tile_count(h: usize, w: usize, cfg: &TileConfig) -> Result<usize> {
    let (sh, sw) = cfg.strides()?;
    if cfg.tile_h > h || cfg.tile_w > w {
        return Ok(0);
    }
    Ok(((h - cfg.tile_h) / sh + 1) * ((w - cfg.tile_w) / sw + 1))
}

/// Sliding-window crops of one slice.
pub fn tile_slice(image: &[f32], mask: &[u8], h: usize, w: usize, slice: usize, cfg: &TileConfig) -> Result<Vec<Tile>> {
    let (sh, sw) = cfg.strides()?;
    if image.len() != h * w || mask.len() != h * w {
        return Err(Error::dim(format!(
            "slice is {h}x{w} but image has {} and mask {} pixels",
            image.len(),
            mask.len()
        )));
    }
    if cfg.tile_h > h || cfg.tile_w > w {
        return Err(Error::config(format!(
            "tile {}x{} is larger than the {h}x{w} slice",
            cfg.tile_h, cfg.tile_w
        )));
    }
    let (th, tw) = (cfg.tile_h, cfg.tile_w);
    let mut out = Vec::new();
    for row in tile_origins(h, th, sh) {
        for col in tile_origins(w, tw, sw) {
            let mut img = Vec::with_capacity(th * tw);
            let mut msk = Vec::with_capacity(th * tw);
            for r in row..row + th {
                img.extend_from_slice(&image[r * w + col..r * w + col + tw]);
                msk.extend_from_slice(&mask[r * w + col..r * w + col + tw]);
            }
            out.push(Tile {
                image: img,
                mask: msk,
                slice,
                row,
                col,
            });
        }
    }
    Ok(out)
}

/// Tiles of the given slices, in `(slice, row, col)` order.
pub fn tile_volume(volume: &Volume, masks: &MaskVolume, slices: &[usize], cfg: &TileConfig) -> Result<TileSet> {
    if volume.dims() != masks.dims() {
        return Err(Error::dim(format!(
            "volume {:?} and masks {:?} differ in shape",
            volume.dims(),
            masks.dims()
        )));
    }
    let mut order = slices.to_vec();
    order.sort_unstable();
    if let Some(&bad) = order.iter().find(|&&s| s >= volume.slices()) {
        return Err(Error::config(format!("slice {bad} out of range")));
    }
    let (h, w) = (volume.height(), volume.width());
    let parts: Vec<Vec<Tile>> = order
        .par_iter()
        .map(|&s| tile_slice(volume.slice(s), masks.slice(s), h, w, s, cfg))
        .collect::<Result<_>>()?;
    Ok(TileSet {
        tile_h: cfg.tile_h,
        tile_w: cfg.tile_w,
        num_classes: masks.num_classes(),
        tiles: parts.into_iter().flatten().collect(),
    })
}

#[derive(Serialize, Deserialize)]
struct TileSetMeta {
    num_classes: usize,
    /// `[slice, row, col]` per tile.
    origins: Vec<[usize; 3]>,
}

impl TileSet {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Sorted distinct slice indices.
    pub fn slices(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.tiles.iter().map(|t| t.slice).collect();
        s.dedup();
        s
    }

    /// Writes `<stem>.images.segv` and `<stem>.masks.segv`; provenance goes
    /// into the mask sidecar.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let n = self.tiles.len();
        let dims = vec![n, self.tile_h, self.tile_w];
        let images = SegvArray {
            dims: dims.clone(),
            payload: SegvPayload::F32(self.tiles.iter().flat_map(|t| t.image.iter().copied()).collect()),
        };
        let masks = SegvArray {
            dims,
            payload: SegvPayload::U8(self.tiles.iter().flat_map(|t| t.mask.iter().copied()).collect()),
        };
        let meta = TileSetMeta {
            num_classes: self.num_classes,
            origins: self.tiles.iter().map(|t| [t.slice, t.row, t.col]).collect(),
        };
        write_segv(&dir.join(format!("{stem}.images.segv")), &images, None)?;
        write_segv(
            &dir.join(format!("{stem}.masks.segv")),
            &masks,
            Some(&serde_json::to_value(meta)?),
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let img_path = dir.join(format!("{stem}.images.segv"));
        let mask_path = dir.join(format!("{stem}.masks.segv"));
        let (images, _) = read_segv(&img_path)?;
        let (masks, meta) = read_segv(&mask_path)?;
        let format = |path: &Path, message: &str| Error::Format {
            path: path.to_owned(),
            message: message.into(),
        };
        let meta: TileSetMeta =
            serde_json::from_value(meta.ok_or_else(|| format(&mask_path, "tile provenance sidecar missing"))?)
                .map_err(|e| format(&mask_path, &e.to_string()))?;
        let (SegvPayload::F32(img), SegvPayload::U8(msk)) = (images.payload, masks.payload) else {
            return Err(format(&img_path, "expected f32 images and u8 masks"));
        };
        let [n, th, tw] = <[usize; 3]>::try_from(images.dims.as_slice())
            .map_err(|_| format(&img_path, "expected rank-3 tile stack"))?;
        if masks.dims != images.dims || meta.origins.len() != n {
            return Err(Error::Corruption {
                path: mask_path,
                message: format!(
                    "images {:?}, masks {:?}, {} origins",
                    images.dims,
                    masks.dims,
                    meta.origins.len()
                ),
            });
        }
        let per = th * tw;
        let tiles = meta
            .origins
            .iter()
            .enumerate()
            .map(|(i, &[slice, row, col])| Tile {
                image: img[i * per..(i + 1) * per].to_vec(),
                mask: msk[i * per..(i + 1) * per].to_vec(),
                slice,
                row,
                col,
            })
            .collect();
        Ok(Self {
            tile_h: th,
            tile_w: tw,
            num_classes: meta.num_classes,
            tiles,
        })
    }
}
