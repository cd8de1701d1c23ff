use rand::Rng;

use super::{DetectorConfig, GridTensor, SLOT};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::nn::{Bound, Graph, ParamSet, Tensor, Var};

const LEAK: f64 = 0.1;
/// Initial objectness bias, a prior of about 2% per slot.
const OBJ_PRIOR_LOGIT: f64 = -4.0;

fn he_conv(p: &mut ParamSet, name: &str, out_c: usize, in_c: usize, k: usize, rng: &mut impl Rng) {
    let std = (2.0 / (in_c * k * k) as f64).sqrt();
    p.insert(format!("{name}.w"), Tensor::randn(&[out_c, in_c, k, k], rng).map(|v| v * std));
    p.insert(format!("{name}.b"), Tensor::zeros(&[1, out_c, 1, 1]));
}

/// Fresh detector parameters.
pub fn init_detector(config: &DetectorConfig, rng: &mut impl Rng) -> Result<ParamSet> {
    config.validate()?;
    let mut p = ParamSet::new();
    let mut in_c = 1;
    for (i, &c) in config.widths.iter().enumerate() {
        he_conv(&mut p, &format!("conv{i}"), c, in_c, 3, rng);
        in_c = c;
    }
    let out = config.boxes_per_cell * SLOT;
    he_conv(&mut p, "head", out, in_c, 1, rng);
    let mut bias = Tensor::zeros(&[1, out, 1, 1]);
    for k in 0..config.boxes_per_cell {
        bias.data_mut()[k * SLOT + 4] = OBJ_PRIOR_LOGIT;
    }
    p.insert("head.b", bias);
    Ok(p)
}

fn conv<'g>(p: &Bound<'g>, name: &str, x: Var<'g>) -> Var<'g> {
    let y = x.conv2d(p.get(&format!("{name}.w")));
    let b = p.get(&format!("{name}.b")).expand(&y.shape());
    y + b
}

/// Penultimate feature map `[N, C, S, S]`.
pub(crate) fn backbone<'g>(p: &Bound<'g>, config: &DetectorConfig, x: Var<'g>) -> Var<'g> {
    let mut h = x;
    let n_down = config.downsamplings();
    for i in 0..config.widths.len() {
        h = conv(p, &format!("conv{i}"), h).leaky_relu(LEAK);
        if i < n_down {
            h = h.avg_pool2();
        }
    }
    h
}

/// Raw head logits `[N, B * 5, S, S]`.
pub(crate) fn logits<'g>(p: &Bound<'g>, config: &DetectorConfig, x: Var<'g>) -> Var<'g> {
    conv(p, "head", backbone(p, config, x))
}

/// Stack images into `[N, 1, R, R]`, mapping `[0, 1]` to `[-1, 1]`.
pub fn images_tensor(images: &[&GrayImage], resolution: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * resolution * resolution);
    for img in images {
        if img.width() != resolution || img.height() != resolution {
            return Err(Error::InvalidInput(format!(
                "detector expects {resolution}x{resolution} images, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        data.extend(img.pixels().iter().map(|&v| f64::from(v) * 2.0 - 1.0));
    }
    Ok(Tensor::new(&[images.len(), 1, resolution, resolution], data))
}

/// Apply the output activations and rearrange `[N, B*5, S, S]` logits into
/// one `[S, S, B, 5]` grid per image.
pub fn raw_to_predictions(raw: &Tensor, config: &DetectorConfig) -> Vec<GridTensor> {
    let (n, c, s, _) = raw.dims4();
    let b = config.boxes_per_cell;
    assert_eq!(c, b * SLOT);
    (0..n)
        .map(|ni| {
            let mut g = GridTensor::zeros(s, b);
            for k in 0..b {
                for f in 0..SLOT {
                    let ch = k * SLOT + f;
                    for row in 0..s {
                        for col in 0..s {
                            let v = raw.data()[((ni * c + ch) * s + row) * s + col];
                            g.slot_mut(row, col, k)[f] = crate::nn::graph::sigmoid(v);
                        }
                    }
                }
            }
            g
        })
        .collect()
}

/// Activated predictions for each image. Offsets, sizes and objectness all
/// pass through a sigmoid, so every field lies in `(0, 1)`.
pub fn detector_forward(params: &ParamSet, config: &DetectorConfig, images: &[&GrayImage]) -> Result<Vec<GridTensor>> {
    let x = images_tensor(images, config.input_resolution)?;
    let g = Graph::new();
    let p = params.bind(&g, false);
    let raw = logits(&p, config, g.constant(x));
    Ok(raw_to_predictions(&raw.value(), config))
}

/// Spatially averaged penultimate features, one vector per image.
pub fn extract_features(params: &ParamSet, config: &DetectorConfig, images: &[&GrayImage]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let x = images_tensor(chunk, config.input_resolution)?;
        let g = Graph::new();
        let p = params.bind(&g, false);
        let f = backbone(&p, config, g.constant(x)).value();
        let (n, c, h, w) = f.dims4();
        for ni in 0..n {
            out.push(
                (0..c)
                    .map(|ci| {
                        let s = &f.data()[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                        s.iter().sum::<f64>() / (h * w) as f64
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}
