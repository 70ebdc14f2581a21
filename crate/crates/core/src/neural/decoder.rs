use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cnn::{ConvLayer, DenseLayer};
use super::layers::{self, Shape};
use crate::error::{Error, Result};
use crate::imaging::VeinImage;

/// Channel widths after the seed projection and after each upsampling block.
pub(crate) const DECODER_CHANNELS: [usize; 4] = [32, 16, 8, 1];

/// Forward-only image decoder: dense seed projection, then three
/// nearest-upsample + 3x3 conv blocks ending in a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderNet {
    pub latent_dim: usize,
    pub seed_height: usize,
    pub seed_width: usize,
    pub dense: DenseLayer<f32>,
    pub convs: Vec<ConvLayer<f32>>,
}

impl DecoderNet {
    pub fn output_width(&self) -> usize {
        self.seed_width * 8
    }

    pub fn output_height(&self) -> usize {
        self.seed_height * 8
    }

    pub fn validate(&self) -> Result<()> {
        let seed = DECODER_CHANNELS[0] * self.seed_height * self.seed_width;
        let d = &self.dense;
        if self.latent_dim == 0 || seed == 0 {
            return Err(Error::InvalidWeights("decoder has empty latent or seed grid".into()));
        }
        if d.inp != self.latent_dim || d.out != seed || d.weight.len() != d.inp * d.out || d.bias.len() != d.out {
            return Err(Error::InvalidWeights("decoder projection has wrong shape".into()));
        }
        if self.convs.len() != 3 {
            return Err(Error::InvalidWeights(format!(
                "decoder needs 3 conv layers, found {}",
                self.convs.len()
            )));
        }
        for (i, c) in self.convs.iter().enumerate() {
            if c.in_c != DECODER_CHANNELS[i]
                || c.out_c != DECODER_CHANNELS[i + 1]
                || c.k != 3
                || c.weight.len() != c.out_c * c.in_c * 9
                || c.bias.len() != c.out_c
            {
                return Err(Error::InvalidWeights(format!("decoder conv {i} has wrong shape")));
            }
        }
        let finite = d.weight.iter().chain(&d.bias).all(|v| v.is_finite())
            && self
                .convs
                .iter()
                .all(|c| c.weight.iter().chain(&c.bias).all(|v| v.is_finite()));
        if !finite {
            return Err(Error::NonFinite("decoder weights".into()));
        }
        Ok(())
    }

    /// Decodes one latent vector to an image in [0, 1].
    pub fn decode(&self, z: &[f32]) -> Result<VeinImage> {
        if z.len() != self.latent_dim {
            return Err(Error::DimensionMismatch(format!(
                "latent has {} entries, decoder expects {}",
                z.len(),
                self.latent_dim
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent".into()));
        }
        let mut act = layers::relu_forward(&layers::dense_forward(z, &self.dense.weight, &self.dense.bias, self.dense.out));
        let mut shape = Shape::new(DECODER_CHANNELS[0], self.seed_height, self.seed_width);
        for (i, c) in self.convs.iter().enumerate() {
            act = layers::upsample2(&act, shape);
            shape = Shape::new(shape.c, shape.h * 2, shape.w * 2);
            act = layers::conv_forward(&act, shape, &c.weight, &c.bias, c.out_c, c.k);
            shape = Shape::new(c.out_c, shape.h, shape.w);
            if i + 1 < self.convs.len() {
                act = layers::relu_forward(&act);
            }
        }
        let px = act.into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        VeinImage::new(shape.w, shape.h, px)
    }
}

/// Reference latents and the images an external implementation decoded them to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityFixture {
    pub width: usize,
    pub height: usize,
    pub latents: Vec<Vec<f32>>,
    pub images: Vec<Vec<f32>>,
}

impl ParityFixture {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Decodes every fixture latent and returns the largest absolute pixel
/// difference; fails when it exceeds `tolerance`.
pub fn check_decoder_parity(net: &DecoderNet, fixture: &ParityFixture, tolerance: f32) -> Result<f32> {
    if fixture.latents.len() != fixture.images.len() || fixture.latents.is_empty() {
        return Err(Error::InvalidWeights(
            "parity fixture needs matching, nonempty latent and image lists".into(),
        ));
    }
    if fixture.width != net.output_width() || fixture.height != net.output_height() {
        return Err(Error::DimensionMismatch(format!(
            "fixture is {}x{}, decoder produces {}x{}",
            fixture.width,
            fixture.height,
            net.output_width(),
            net.output_height()
        )));
    }
    let mut worst = 0.0f32;
    for (i, (z, want)) in fixture.latents.iter().zip(&fixture.images).enumerate() {
        let got = net.decode(z)?;
        if want.len() != got.pixels().len() {
            return Err(Error::DimensionMismatch(format!("fixture image {i} has {} pixels", want.len())));
        }
        for (a, b) in got.pixels().iter().zip(want) {
            worst = worst.max((a - b).abs());
        }
    }
    if !(worst <= tolerance) {
        return Err(Error::InvalidWeights(format!(
            "decoder parity off by {worst:e} (tolerance {tolerance:e})"
        )));
    }
    Ok(worst)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_decoder(latent_dim: usize, h0: usize, w0: usize, seed: u64) -> DecoderNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |n: usize, s: f32| -> Vec<f32> { (0..n).map(|_| (rng.random::<f32>() - 0.5) * s).collect() };
        let seed_len = 32 * h0 * w0;
        let dense = DenseLayer {
            out: seed_len,
            inp: latent_dim,
            weight: v(seed_len * latent_dim, 0.8),
            bias: v(seed_len, 0.2),
        };
        let convs = (0..3)
            .map(|i| {
                let (ic, oc) = (DECODER_CHANNELS[i], DECODER_CHANNELS[i + 1]);
                ConvLayer {
                    out_c: oc,
                    in_c: ic,
                    k: 3,
                    weight: v(oc * ic * 9, 0.4),
                    bias: v(oc, 0.2),
                }
            })
            .collect();
        DecoderNet {
            latent_dim,
            seed_height: h0,
            seed_width: w0,
            dense,
            convs,
        }
    }

    /// Straight-loop decoder used as the reference.
    fn naive_decode(net: &DecoderNet, z: &[f32]) -> Vec<f64> {
        let (mut h, mut w) = (net.seed_height, net.seed_width);
        let mut act: Vec<f64> = (0..net.dense.out)
            .map(|o| {
                let s: f64 = (0..net.latent_dim)
                    .map(|i| net.dense.weight[o * net.latent_dim + i] as f64 * z[i] as f64)
                    .sum();
                (s + net.dense.bias[o] as f64).max(0.0)
            })
            .collect();
        let mut c = 32;
        for (li, conv) in net.convs.iter().enumerate() {
            let (uh, uw) = (2 * h, 2 * w);
            let mut up = vec![0.0; c * uh * uw];
            for ch in 0..c {
                for y in 0..uh {
                    for x in 0..uw {
                        up[(ch * uh + y) * uw + x] = act[(ch * h + y / 2) * w + x / 2];
                    }
                }
            }
            let mut out = vec![0.0; conv.out_c * uh * uw];
            for o in 0..conv.out_c {
                for y in 0..uh as isize {
                    for x in 0..uw as isize {
                        let mut acc = conv.bias[o] as f64;
                        for i in 0..c {
                            for ky in -1..=1isize {
                                for kx in -1..=1isize {
                                    let (sy, sx) = (y + ky, x + kx);
                                    if sy < 0 || sx < 0 || sy >= uh as isize || sx >= uw as isize {
                                        continue;
                                    }
                                    let wi = ((o * c + i) * 3 + (ky + 1) as usize) * 3 + (kx + 1) as usize;
                                    acc += conv.weight[wi] as f64 * up[(i * uh + sy as usize) * uw + sx as usize];
                                }
                            }
                        }
                        out[(o * uh + y as usize) * uw + x as usize] =
                            if li < 2 { acc.max(0.0) } else { 1.0 / (1.0 + (-acc).exp()) };
                    }
                }
            }
            act = out;
            c = conv.out_c;
            h = uh;
            w = uw;
        }
        act
    }

    #[test]
    fn decode_matches_naive() {
        let net = random_decoder(6, 3, 4, 1);
        net.validate().unwrap();
        let z: Vec<f32> = (0..6).map(|i| (i as f32 * 0.7).sin()).collect();
        let img = net.decode(&z).unwrap();
        assert_eq!((img.width(), img.height()), (32, 24));
        for (a, b) in img.pixels().iter().zip(naive_decode(&net, &z)) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn decode_rejects_bad_latent() {
        let net = random_decoder(4, 3, 4, 2);
        assert!(matches!(net.decode(&[0.0; 3]), Err(Error::DimensionMismatch(_))));
        assert!(matches!(net.decode(&[0.0, f32::NAN, 0.0, 0.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn parity_self_fixture() {
        let net = random_decoder(4, 3, 4, 3);
        let latents = vec![vec![0.1, -0.2, 0.3, 0.0], vec![1.0, 1.0, -1.0, 0.5]];
        let images = latents.iter().map(|z| net.decode(z).unwrap().pixels().to_vec()).collect();
        let mut fx = ParityFixture {
            width: 32,
            height: 24,
            latents,
            images,
        };
        assert_eq!(check_decoder_parity(&net, &fx, 1e-5).unwrap(), 0.0);
        fx.images[1][10] += 0.1;
        assert!(check_decoder_parity(&net, &fx, 1e-5).is_err());
        fx.width = 64;
        assert!(matches!(check_decoder_parity(&net, &fx, 1.0), Err(Error::DimensionMismatch(_))));
    }
}
