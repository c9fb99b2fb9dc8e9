//! Local implicit upsampler: an MLP over the nearest low-res feature, the
//! query's offset from that cell's center and the query's RGB value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::interp::resize_image;
use crate::error::{Error, Result};
use crate::linalg::{linear, linear_backward};
use crate::nn::{gelu, gelu_grad};
use crate::params::{variance_scaled, Param, ParamSet};
use crate::types::{axis_coord, FeatureMap, ImageTensor};
use crate::upsampler::{Trainable, Upsampler};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalImplicitConfig {
    pub channels: usize,
    pub hidden: usize,
}

impl Default for LocalImplicitConfig {
    fn default() -> Self {
        LocalImplicitConfig { channels: 384, hidden: 256 }
    }
}

impl LocalImplicitConfig {
    pub fn with_channels(channels: usize) -> Self {
        LocalImplicitConfig {
            channels,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct LocalImplicit {
    cfg: LocalImplicitConfig,
}

#[derive(Debug)]
pub struct LocalImplicitTape {
    input: Vec<f64>,
    pre: Vec<f64>,
    out_h: usize,
    out_w: usize,
}

/// Nearest low-res cell for query `i` of `n_out` and the offset from its
/// center in cell widths, within `[-0.5, 0.5]`.
fn nearest_cell(i: usize, n_out: usize, n_in: usize) -> (usize, f64) {
    let u = axis_coord(i, n_out);
    let cell = (((u + 1.0) / 2.0 * n_in as f64).floor() as usize).min(n_in - 1);
    let center = axis_coord(cell, n_in);
    (cell, (u - center) * n_in as f64 / 2.0)
}

impl LocalImplicit {
    pub fn new(cfg: LocalImplicitConfig) -> Result<Self> {
        if cfg.channels == 0 || cfg.hidden == 0 {
            return Err(Error::Config("local-implicit needs channels ≥ 1 and hidden ≥ 1".into()));
        }
        Ok(LocalImplicit { cfg })
    }

    fn d_in(&self) -> usize {
        self.cfg.channels + 5
    }

    fn inputs(&self, img: &ImageTensor, lowres: &FeatureMap, out_h: usize, out_w: usize) -> Result<Vec<f64>> {
        let c = self.cfg.channels;
        if lowres.channels() != c {
            return Err(Error::invalid(format!("expected {c} channels, got {}", lowres.channels())));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("output size must be positive"));
        }
        let rgb = resize_image(img, out_h, out_w)?;
        let (h, w) = (lowres.height(), lowres.width());
        let mut x = Vec::with_capacity(out_h * out_w * self.d_in());
        let tokens = lowres.tokens(0);
        for oy in 0..out_h {
            let (cy, dy) = nearest_cell(oy, out_h, h);
            for ox in 0..out_w {
                let (cx, dx) = nearest_cell(ox, out_w, w);
                let cell = cy * w + cx;
                x.extend_from_slice(&tokens[cell * c..(cell + 1) * c]);
                x.push(dx);
                x.push(dy);
                for ch in 0..3 {
                    x.push(rgb.get(0, ch, oy, ox));
                }
            }
        }
        Ok(x)
    }

    fn run(&self, params: &ParamSet, x: &[f64], rows: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let (c, hd, d) = (self.cfg.channels, self.cfg.hidden, self.d_in());
        let pre = linear(x, rows, params.data("fc1.weight", &[hd, d])?, params.data("fc1.bias", &[hd])?, d, hd);
        let act: Vec<f64> = pre.iter().map(|v| gelu(*v)).collect();
        let y = linear(&act, rows, params.data("fc2.weight", &[c, hd])?, params.data("fc2.bias", &[c])?, hd, c);
        Ok((y, pre))
    }
}

impl Upsampler for LocalImplicit {
    fn name(&self) -> &'static str {
        "local-implicit"
    }

    fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, hd, d) = (self.cfg.channels, self.cfg.hidden, self.d_in());
        let mut p = ParamSet::new();
        let mut add = |name: &str, param: Param| p.insert(name, param).expect("unique parameter names");
        add("fc1.weight", variance_scaled(&mut rng, vec![hd, d], d));
        add("fc1.bias", Param::zeros(vec![hd]));
        add("fc2.weight", variance_scaled(&mut rng, vec![c, hd], hd));
        add("fc2.bias", Param::zeros(vec![c]));
        p
    }

    fn forward(&self, params: &ParamSet, img: &ImageTensor, lowres: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
        if img.batch() != lowres.batch() {
            return Err(Error::invalid("image and feature batches differ"));
        }
        let maps = (0..img.batch())
            .map(|b| {
                let x = self.inputs(&img.image(b), &lowres.image(b), out_h, out_w)?;
                let (y, _) = self.run(params, &x, out_h * out_w)?;
                FeatureMap::from_tokens(&y, self.cfg.channels, out_h, out_w)
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureMap::stack(&maps)
    }
}

impl Trainable for LocalImplicit {
    type Tape = LocalImplicitTape;

    fn forward_train(&self, params: &ParamSet, img: &ImageTensor, lowres: &FeatureMap, out_h: usize, out_w: usize) -> Result<(FeatureMap, LocalImplicitTape)> {
        if img.batch() != 1 || lowres.batch() != 1 {
            return Err(Error::invalid("training forward takes a single image"));
        }
        let input = self.inputs(img, lowres, out_h, out_w)?;
        let (y, pre) = self.run(params, &input, out_h * out_w)?;
        let out = FeatureMap::from_tokens(&y, self.cfg.channels, out_h, out_w)?;
        Ok((out, LocalImplicitTape { input, pre, out_h, out_w }))
    }

    fn backward(&self, params: &ParamSet, tape: &LocalImplicitTape, grad_out: &FeatureMap) -> Result<ParamSet> {
        let (c, hd, d) = (self.cfg.channels, self.cfg.hidden, self.d_in());
        if (grad_out.batch(), grad_out.channels(), grad_out.height(), grad_out.width()) != (1, c, tape.out_h, tape.out_w) {
            return Err(Error::invalid("output gradient does not match the recorded forward"));
        }
        let rows = tape.out_h * tape.out_w;
        let dy = grad_out.tokens(0);
        let act: Vec<f64> = tape.pre.iter().map(|v| gelu(*v)).collect();
        let mut g = params.zeros_like();
        let (mut dw2, mut db2) = (vec![0.0; c * hd], vec![0.0; c]);
        let dact = linear_backward(&act, &dy, rows, params.data("fc2.weight", &[c, hd])?, hd, c, &mut dw2, &mut db2, true)
            .expect("requested");
        let dpre: Vec<f64> = dact.iter().zip(&tape.pre).map(|(a, p)| a * gelu_grad(*p)).collect();
        let (mut dw1, mut db1) = (vec![0.0; hd * d], vec![0.0; hd]);
        linear_backward(&tape.input, &dpre, rows, params.data("fc1.weight", &[hd, d])?, d, hd, &mut dw1, &mut db1, false);
        g.data_mut("fc1.weight")?.copy_from_slice(&dw1);
        g.data_mut("fc1.bias")?.copy_from_slice(&db1);
        g.data_mut("fc2.weight")?.copy_from_slice(&dw2);
        g.data_mut("fc2.bias")?.copy_from_slice(&db2);
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn cell_lookup_and_offsets() {
        // two queries per cell, a quarter cell either side of its center
        let got: Vec<_> = (0..4).map(|i| nearest_cell(i, 4, 2)).collect();
        assert_eq!(got, vec![(0, -0.25), (0, 0.25), (1, -0.25), (1, 0.25)]);
        assert_eq!(nearest_cell(0, 1, 1), (0, 0.0));
    }

    #[test]
    fn output_depends_only_on_nearest_cell() {
        let m = LocalImplicit::new(LocalImplicitConfig { channels: 2, hidden: 8 }).unwrap();
        let p = m.init_params(1);
        let img = ImageTensor::filled(1, 8, 8, 0.3).unwrap();
        let a = FeatureMap::from_fn(2, 2, 2, |c, y, x| (c + 2 * y + x) as f64).unwrap();
        let mut data = a.data().to_vec();
        data[3] += 5.0; // channel 0, cell (1, 1)
        let b = FeatureMap::new(1, 2, 2, 2, data).unwrap();
        let (oa, ob) = (m.forward(&p, &img, &a, 8, 8).unwrap(), m.forward(&p, &img, &b, 8, 8).unwrap());
        for y in 0..8 {
            for x in 0..8 {
                let same = oa.get(0, 1, y, x) == ob.get(0, 1, y, x);
                assert_eq!(same, y < 4 || x < 4, "({y}, {x})");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = LocalImplicit::new(LocalImplicitConfig { channels: 3, hidden: 6 }).unwrap();
        let params = m.init_params(4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = ImageTensor::from_fn(6, 6, |y, x| [y as f64 / 6.0, x as f64 / 6.0, 0.5]).unwrap();
        let f = FeatureMap::from_fn(3, 3, 3, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let probe = FeatureMap::from_fn(3, 6, 6, |_, _, _| rng.random_range(-1.0..1.0)).unwrap();
        let loss = |p: &ParamSet| -> f64 {
            let out = m.forward(p, &img, &f, 6, 6).unwrap();
            out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = m.forward_train(&params, &img, &f, 6, 6).unwrap();
        let grads = m.backward(&params, &tape, &probe).unwrap();
        let eps = 1e-6;
        for (name, g) in grads.iter() {
            for i in (0..g.len()).step_by(3) {
                let mut a = params.clone();
                a.data_mut(name).unwrap()[i] += eps;
                let mut b = params.clone();
                b.data_mut(name).unwrap()[i] -= eps;
                let num = (loss(&a) - loss(&b)) / (2.0 * eps);
                assert!((num - g.data()[i]).abs() <= 1e-6 * num.abs().max(1.0), "{name}[{i}]");
            }
        }
    }
}
