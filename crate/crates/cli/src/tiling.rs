//! Overlapping-tile inference for images larger than the attention limit.
//!
//! Tiles are blended with weights that ramp linearly across each interior
//! overlap, so the result is an approximation of a whole-image forward
//! pass near tile seams.

use ltcf_core::{LtcfNet, Result, Tensor};

/// Tile origins covering `len` with tiles of `tile` overlapping by at least
/// `overlap`; the last tile is aligned to the end.
pub fn tile_starts(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&s| s + tile < len)
        .collect();
    starts.push(len - tile);
    starts
}

fn ramp(i: usize, len: usize, lead: bool, trail: bool, overlap: usize) -> f32 {
    let mut w = 1.0f32;
    if lead {
        w = w.min((i + 1) as f32 / (overlap + 1) as f32);
    }
    if trail {
        w = w.min((len - i) as f32 / (overlap + 1) as f32);
    }
    w
}

fn crop(img: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Tensor {
    let (iw, c) = (img.shape()[1], img.shape()[2]);
    Tensor::from_fn(&[h, w, c], |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        img.data()[((y0 + y) * iw + x0 + x) * c + ch]
    })
}

/// Enhances `img` whole when it fits in one tile, otherwise tile by tile.
pub fn enhance_tiled(net: &LtcfNet, img: &Tensor, tile: usize, overlap: usize) -> Result<Tensor> {
    let (h, w, c) = img.hwc()?;
    if h <= tile && w <= tile {
        return net.enhance(img);
    }
    let ys = tile_starts(h, tile, overlap);
    let xs = tile_starts(w, tile, overlap);
    let mut acc = vec![0.0f32; h * w * c];
    let mut weight = vec![0.0f32; h * w];
    for (iy, &y0) in ys.iter().enumerate() {
        for (ix, &x0) in xs.iter().enumerate() {
            let (th, tw) = (tile.min(h), tile.min(w));
            let out = net.enhance(&crop(img, y0, x0, th, tw))?;
            for y in 0..th {
                let wy = ramp(y, th, iy > 0, iy + 1 < ys.len(), overlap);
                for x in 0..tw {
                    let wxy = wy * ramp(x, tw, ix > 0, ix + 1 < xs.len(), overlap);
                    let p = (y0 + y) * w + x0 + x;
                    weight[p] += wxy;
                    for ch in 0..c {
                        acc[p * c + ch] += wxy * out.data()[(y * tw + x) * c + ch];
                    }
                }
            }
        }
    }
    for (p, wt) in weight.iter().enumerate() {
        for ch in 0..c {
            acc[p * c + ch] /= wt;
        }
    }
    Tensor::new(&[h, w, c], acc)
}
