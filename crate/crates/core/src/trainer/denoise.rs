use crate::autograd::Tensor;
use crate::backbone::Networks;
use crate::dataio::{ImageTensor, MaskTensor};
use crate::error::{Error, Result};

/// Tile geometry for large inputs.
///
/// Tiles start every `tile − overlap` pixels; each contributes only the
/// part at least `overlap / 2` pixels away from its inner edges. Results
/// match untiled inference whenever the network's receptive radius is at
/// most `overlap / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tiling {
    pub tile: usize,
    pub overlap: usize,
}

fn tile_starts(len: usize, tile: usize, step: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|i| i * step).take_while(|&s| s + tile < len).collect();
    starts.push(len - tile);
    starts
}

/// `[1,H,W,C(+1)]` input tensor of a reflect-padded image.
fn prepare(
    nets: &Networks<f32>,
    img: &ImageTensor,
    mask: Option<&MaskTensor>,
    h: usize,
    w: usize,
) -> Result<Tensor<f32>> {
    let padded = img.pad_reflect_to(h, w);
    let c = img.channels();
    if !nets.cfg.mask_channel {
        return ImageTensor::stack(&[&padded]);
    }
    let mask_img = match mask {
        Some(m) => {
            if (m.height(), m.width()) != (img.height(), img.width()) {
                return Err(Error::Shape("mask and image sizes differ".into()));
            }
            m.to_image().pad_reflect_to(h, w)
        }
        None => ImageTensor::filled(h, w, 1, 1.0),
    };
    let mut data = Vec::with_capacity(h * w * (c + 1));
    for p in 0..h * w {
        data.extend_from_slice(&padded.data()[p * c..(p + 1) * c]);
        data.push(mask_img.data()[p]);
    }
    Ok(Tensor::new(vec![1, h, w, c + 1], data))
}

fn crop(t: &Tensor<f32>, y0: usize, x0: usize, th: usize, tw: usize) -> Tensor<f32> {
    let s = t.shape();
    let (w, c) = (s[2], s[3]);
    let mut data = Vec::with_capacity(th * tw * c);
    for y in y0..y0 + th {
        let row = (y * w + x0) * c;
        data.extend_from_slice(&t.data()[row..row + tw * c]);
    }
    Tensor::new(vec![1, th, tw, c], data)
}

/// `clip(D(G(img)), 0, 1)`, padding to the backbone's size multiple and
/// cropping back. `mask` is only used by backbones with a mask channel.
pub fn denoise(
    nets: &Networks<f32>,
    img: &ImageTensor,
    mask: Option<&MaskTensor>,
    tiling: Option<Tiling>,
) -> Result<ImageTensor> {
    let cfg = &nets.cfg;
    if img.channels() != cfg.image_channels {
        return Err(Error::Shape(format!(
            "model restores {}-channel images, got {}",
            cfg.image_channels,
            img.channels()
        )));
    }
    let m = cfg.size_multiple();
    let (h, w, c) = img.shape();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let input = prepare(nets, img, mask, ph, pw)?;

    let out = match tiling {
        Some(t) if ph > t.tile || pw > t.tile => {
            if t.tile <= t.overlap || t.tile % m != 0 || t.overlap % m != 0 {
                return Err(Error::Config(format!(
                    "tile {} / overlap {} invalid: need tile > overlap, both multiples of {m}",
                    t.tile, t.overlap
                )));
            }
            let step = t.tile - t.overlap;
            let half = t.overlap / 2;
            let (th, tw) = (t.tile.min(ph), t.tile.min(pw));
            let mut acc = vec![0.0f32; ph * pw * c];
            let mut weight = vec![0u32; ph * pw];
            for &y0 in &tile_starts(ph, th, step) {
                for &x0 in &tile_starts(pw, tw, step) {
                    let res = nets.restore(&crop(&input, y0, x0, th, tw))?;
                    let ylo = if y0 == 0 { 0 } else { half };
                    let yhi = if y0 + th == ph { th } else { th - half };
                    let xlo = if x0 == 0 { 0 } else { half };
                    let xhi = if x0 + tw == pw { tw } else { tw - half };
                    for ty in ylo..yhi {
                        for tx in xlo..xhi {
                            let p = (y0 + ty) * pw + x0 + tx;
                            weight[p] += 1;
                            let src = (ty * tw + tx) * c;
                            for ch in 0..c {
                                acc[p * c + ch] += res.data()[src + ch];
                            }
                        }
                    }
                }
            }
            for (p, &wt) in weight.iter().enumerate() {
                debug_assert!(wt > 0, "tiles must cover every pixel");
                for ch in 0..c {
                    acc[p * c + ch] /= wt as f32;
                }
            }
            Tensor::new(vec![1, ph, pw, c], acc)
        }
        _ => nets.restore(&input)?,
    };
    if !out.all_finite() {
        return Err(Error::Numerical("model produced non-finite output".into()));
    }
    let full = ImageTensor::new(ph, pw, c, out.into_data())?;
    Ok(full.crop(0, 0, h, w)?.clamped())
}

/// Applies [`denoise`] to each image in turn.
pub fn denoise_batch(nets: &Networks<f32>, imgs: &[ImageTensor], tiling: Option<Tiling>) -> Result<Vec<ImageTensor>> {
    imgs.iter().map(|img| denoise(nets, img, None, tiling)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_networks, BackboneConfig};
    use crate::dataio::synthetic;

    #[test]
    fn starts_cover_axis() {
        assert_eq!(tile_starts(96, 48, 32), vec![0, 32, 48]);
        assert_eq!(tile_starts(40, 48, 32), vec![0]);
        assert_eq!(tile_starts(80, 48, 32), vec![0, 32]);
    }

    #[test]
    fn tiled_matches_untiled() {
        let nets = build_networks::<f32>(&BackboneConfig::conv_small(3, 8), 1).unwrap();
        let img = synthetic::toy_image(2, 96);
        let whole = denoise(&nets, &img, None, None).unwrap();
        let tiled = denoise(&nets, &img, None, Some(Tiling { tile: 48, overlap: 16 })).unwrap();
        let diff = whole
            .data()
            .iter()
            .zip(tiled.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-5, "max diff {diff}");
    }

    #[test]
    fn output_in_range_and_deterministic() {
        let cfg = BackboneConfig {
            channels: 8,
            heads: 2,
            window: 4,
            patch_embed: 2,
            ..BackboneConfig::windowed_attention()
        };
        let nets = build_networks::<f32>(&cfg, 1).unwrap();
        // 21×13 needs padding to a multiple of 8.
        let img = synthetic::toy_image(3, 24).crop(0, 0, 21, 13).unwrap();
        let a = denoise(&nets, &img, None, None).unwrap();
        assert_eq!(a.shape(), (21, 13, 3));
        assert!(a.in_unit_range());
        assert_eq!(a, denoise(&nets, &img, None, None).unwrap());
        assert!(denoise(&nets, &ImageTensor::filled(8, 8, 1, 0.5), None, None).is_err());
    }
}
