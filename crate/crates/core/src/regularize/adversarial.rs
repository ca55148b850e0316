//! Patch discriminator and the regularized adversarial objective
//! `E[f(D(fake)) + f(−D(real)) − λ_gp·‖∇ₓD(x_p)‖²]`, maximized by the
//! discriminator, with `f(x) = −log(1 + e^{−x})`.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::image::{sample_patch, Image, Mask, PixelRect};
use crate::optim::{Adam, AdamConfig};

/// `f(x) = −log(1 + e^{−x})`, stable for large `|x|`.
pub fn f(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

/// `f'(x) = 1 / (1 + e^{x})`.
pub fn f_prime(x: f64) -> f64 {
    if x >= 0.0 {
        let e = (-x).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + x.exp())
    }
}

/// MLP over flattened HWC patches with leaky-ReLU hidden layers and a scalar
/// logit.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// `fan_in × fan_out` per layer.
    pub weights: Vec<Array2<f64>>,
    /// `1 × fan_out` per layer.
    pub biases: Vec<Array2<f64>>,
}

/// Parameter leaves of one forward pass, in `weights`/`biases` order.
#[derive(Clone, Debug)]
pub struct DiscVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl DiscVars {
    pub fn all(&self) -> Vec<Var> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [*w, *b]).collect()
    }
}

impl Discriminator {
    /// He-style normal initialization for leaky-ReLU, zero biases.
    pub fn new(input_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if input_dim == 0 || hidden.contains(&0) {
            return Err(Error::InvalidConfig("discriminator widths must be positive".into()));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in dims.windows(2) {
            let std = gain / (pair[0] as f64).sqrt();
            weights.push(Array2::from_shape_simple_fn((pair[0], pair[1]), || std * rng.sample::<f64, _>(StandardNormal)));
            biases.push(Array2::zeros((1, pair[1])));
        }
        Ok(Self {
            input_dim,
            hidden: hidden.to_vec(),
            weights,
            biases,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().zip(&self.biases).map(|(w, b)| w.len() + b.len()).sum()
    }

    /// Parameters flattened layer by layer, weight then bias, row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(self.param_count(), flat.len()));
        }
        let mut it = flat.iter();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut().chain(b.iter_mut()) {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).all(|a| a.iter().all(|v| v.is_finite()))
    }

    pub fn leaves(&self, tape: &mut Tape) -> DiscVars {
        DiscVars {
            weights: self.weights.iter().map(|w| tape.leaf(w.clone(), true)).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone(), true)).collect(),
        }
    }

    /// `n × 1` logits of the `n × input_dim` batch `x`.
    pub fn forward(&self, tape: &mut Tape, vars: &DiscVars, x: Var) -> Var {
        let mut h = x;
        let last = vars.weights.len() - 1;
        for (l, (w, b)) in vars.weights.iter().zip(&vars.biases).enumerate() {
            h = tape.affine(h, *w, *b);
            if l != last {
                h = tape.leaky_relu(h);
            }
        }
        h
    }

    /// Plain evaluation without recording.
    pub fn logits(&self, x: &Array2<f64>) -> Vec<f64> {
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.dot(w) + b;
            if l != last {
                h.mapv_inplace(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
            }
        }
        h.index_axis(Axis(1), 0).to_vec()
    }

    /// Smallest |pre-activation| of any hidden unit over the batch; kinks of
    /// the activation sit at zero.
    pub fn min_preactivation(&self, x: &Array2<f64>) -> f64 {
        let mut h = x.clone();
        let mut min = f64::INFINITY;
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.dot(w) + b;
            if l != last {
                min = h.iter().fold(min, |m, v| m.min(v.abs()));
                h.mapv_inplace(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
            }
        }
        min
    }
}

/// Row-stacks HWC patches into an `n × (h·w·c)` batch.
pub fn patches_to_batch(patches: &[Image]) -> Result<Array2<f64>> {
    let Some(first) = patches.first() else {
        return Err(Error::InvalidInput("empty patch set".into()));
    };
    let d = first.data.len();
    let mut out = Array2::zeros((patches.len(), d));
    for (i, p) in patches.iter().enumerate() {
        first.ensure_shape(p)?;
        out.row_mut(i).iter_mut().zip(&p.data).for_each(|(o, v)| *o = *v);
    }
    Ok(out)
}

/// Mean squared input-gradient norm `mean_i ‖∇ₓD(x_i)‖²` with its gradient
/// with respect to every discriminator parameter (flat order).
pub fn penalty_and_grad(disc: &Discriminator, x: &Array2<f64>) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let vars = disc.leaves(&mut tape);
    let xv = tape.leaf(x.clone(), true);
    let logits = disc.forward(&mut tape, &vars, xv);
    let n = x.nrows() as f64;
    let gx = tape.grad(&[(logits, Array2::ones((x.nrows(), 1)))], &[xv])[0].expect("logits depend on the input");
    let sq = tape.squared_norm(gx);
    let p = tape.scale(sq, 1.0 / n);
    let value = tape.value(p)[[0, 0]];
    let grads = tape.grad(&[(p, Array2::ones((1, 1)))], &vars.all());
    (value, flatten_grads(&tape, &vars, &grads))
}

fn flatten_grads(tape: &Tape, vars: &DiscVars, grads: &[Option<Var>]) -> Vec<f64> {
    let mut out = Vec::new();
    for (k, v) in vars.all().iter().enumerate() {
        let len = tape.value(*v).len();
        match grads[k] {
            Some(g) => out.extend(tape.value(g).iter()),
            None => out.extend(std::iter::repeat(0.0).take(len)),
        }
    }
    out
}

/// Which patches the gradient penalty is evaluated on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyTarget {
    #[default]
    Fake,
    Real,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvGradients {
    /// The objective the discriminator maximizes.
    pub d_objective: f64,
    pub penalty: f64,
    /// `∇ξ` of `d_objective`, flat parameter order.
    pub d_grad: Vec<f64>,
    /// `E[f(D(fake))]`, minimized by the scene.
    pub g_loss: f64,
    /// `∇` of `g_loss` with respect to each fake patch.
    pub fake_grads: Vec<Image>,
}

/// Evaluates the objective and all gradients at the current parameters.
pub fn adv_gradients(disc: &Discriminator, real: &[Image], fake: &[Image], lambda_gp: f64, penalty_on: PenaltyTarget) -> Result<AdvGradients> {
    let xr = patches_to_batch(real)?;
    let xf = patches_to_batch(fake)?;
    if xr.ncols() != disc.input_dim || xf.ncols() != disc.input_dim {
        return Err(Error::shape(disc.input_dim, format!("real {} / fake {}", xr.ncols(), xf.ncols())));
    }
    let (nr, nf) = (xr.nrows(), xf.nrows());
    let mut tape = Tape::new();
    let vars = disc.leaves(&mut tape);
    let real_v = tape.leaf(xr, penalty_on == PenaltyTarget::Real);
    let fake_v = tape.leaf(xf, true);
    let lr = disc.forward(&mut tape, &vars, real_v);
    let lf = disc.forward(&mut tape, &vars, fake_v);
    let logits_r = tape.value(lr).clone();
    let logits_f = tape.value(lf).clone();
    if logits_r.iter().chain(logits_f.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite discriminator logits".into()));
    }

    // Per-sample input gradients, recorded for the penalty's own gradient.
    let (pv, pn, pl) = match penalty_on {
        PenaltyTarget::Fake => (fake_v, nf, lf),
        PenaltyTarget::Real => (real_v, nr, lr),
    };
    let gx = tape.grad(&[(pl, Array2::ones((pn, 1)))], &[pv])[0].expect("logits depend on the input");
    let sq = tape.squared_norm(gx);
    let penalty_v = tape.scale(sq, 1.0 / pn as f64);
    let penalty = tape.value(penalty_v)[[0, 0]];

    let term_f: f64 = logits_f.iter().map(|&v| f(v)).sum::<f64>() / nf as f64;
    let term_r: f64 = logits_r.iter().map(|&v| f(-v)).sum::<f64>() / nr as f64;
    let d_objective = term_f + term_r - lambda_gp * penalty;

    let seed_f = logits_f.mapv(|v| f_prime(v) / nf as f64);
    let seed_r = logits_r.mapv(|v| -f_prime(-v) / nr as f64);
    let mut seeds = vec![(lf, seed_f.clone()), (lr, seed_r)];
    if lambda_gp != 0.0 {
        seeds.push((penalty_v, Array2::from_elem((1, 1), -lambda_gp)));
    }
    let grads = tape.grad(&seeds, &vars.all());
    let d_grad = flatten_grads(&tape, &vars, &grads);

    // Generator side: ∇ of mean f(D(fake)) with respect to fake pixels.
    let gfake = tape.grad(&[(lf, seed_f)], &[fake_v])[0].expect("logits depend on the input");
    let gfake = tape.value(gfake);
    let fake_grads = fake
        .iter()
        .enumerate()
        .map(|(i, p)| Image {
            width: p.width,
            height: p.height,
            channels: p.channels,
            data: gfake.row(i).to_vec(),
        })
        .collect();
    Ok(AdvGradients {
        d_objective,
        penalty,
        d_grad,
        g_loss: term_f,
        fake_grads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvConfig {
    pub lambda_gp: f64,
    pub penalty_on: PenaltyTarget,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub hidden: Vec<usize>,
    pub n_real: usize,
    pub n_fake: usize,
    pub patch_size: usize,
    /// Fraction of the mask bounding box added on each side before sampling.
    pub dilate: f64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            lambda_gp: 5.0,
            penalty_on: PenaltyTarget::Fake,
            lr: 2e-3,
            beta1: 0.0,
            beta2: 0.99,
            hidden: vec![256, 256],
            n_real: 64,
            n_fake: 64,
            patch_size: 64,
            dilate: 0.1,
        }
    }
}

impl AdvConfig {
    pub fn optimizer(&self, disc: &Discriminator) -> Adam {
        let mut c = AdamConfig::new(self.lr, self.beta1, self.beta2);
        c.eps = 1e-8;
        Adam::new(c, disc.param_count())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvOutcome {
    pub d_objective: f64,
    pub penalty: f64,
    pub g_loss: f64,
    pub fake_grads: Vec<Image>,
    /// Logits or the update were non-finite; nothing was changed.
    pub skipped: bool,
}

/// Generator gradients at the current discriminator, then one ascent step of
/// the discriminator.
pub fn adv_step(disc: &mut Discriminator, opt: &mut Adam, real: &[Image], fake: &[Image], config: &AdvConfig) -> Result<AdvOutcome> {
    let skipped = |fake: &[Image]| AdvOutcome {
        d_objective: f64::NAN,
        penalty: f64::NAN,
        g_loss: f64::NAN,
        fake_grads: fake.iter().map(|p| Image::new(p.width, p.height, p.channels)).collect(),
        skipped: true,
    };
    let g = match adv_gradients(disc, real, fake, config.lambda_gp, config.penalty_on) {
        Ok(g) => g,
        Err(Error::InvalidInput(msg)) if msg.contains("non-finite") => {
            log::warn!("adversarial step skipped: {msg}");
            return Ok(skipped(fake));
        }
        Err(e) => return Err(e),
    };
    if g.d_grad.iter().any(|v| !v.is_finite()) || g.fake_grads.iter().any(|p| !p.is_finite()) {
        log::warn!("adversarial step skipped: non-finite gradients");
        return Ok(skipped(fake));
    }
    let mut params = disc.to_flat();
    let neg: Vec<f64> = g.d_grad.iter().map(|v| -v).collect();
    let saved = opt.clone();
    opt.step(&mut params, &neg);
    if params.iter().any(|v| !v.is_finite()) {
        *opt = saved;
        log::warn!("adversarial step skipped: non-finite parameters after update");
        return Ok(skipped(fake));
    }
    disc.set_flat(&params)?;
    Ok(AdvOutcome {
        d_objective: g.d_objective,
        penalty: g.penalty,
        g_loss: g.g_loss,
        fake_grads: g.fake_grads,
        skipped: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub rects: Vec<PixelRect>,
    pub patches: Vec<Image>,
}

/// `n` square patches from the mask's bounding box dilated by `dilate` per
/// side, clamped inside the image.
pub fn sample_patches(rng: &mut impl Rng, image: &Image, mask: &Mask, n: usize, size: usize, dilate: f64) -> Result<PatchSet> {
    if size == 0 || size > image.width || size > image.height {
        return Err(Error::InvalidInput(format!(
            "{size}px patches do not fit a {}x{} image",
            image.width, image.height
        )));
    }
    if (mask.width, mask.height) != (image.width, image.height) {
        return Err(Error::shape(format!("{}x{} mask", image.width, image.height), format!("{}x{}", mask.width, mask.height)));
    }
    let mut set = PatchSet {
        rects: Vec::with_capacity(n),
        patches: Vec::with_capacity(n),
    };
    if n == 0 {
        return Ok(set);
    }
    let bbox = mask
        .bounding_box()
        .ok_or_else(|| Error::InvalidInput("patch sampling needs a nonempty mask".into()))?
        .dilate(dilate, image.width, image.height);
    for _ in 0..n {
        let r = sample_patch(rng, bbox, size, image.width, image.height)?;
        set.patches.push(image.crop(r)?);
        set.rects.push(r);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_patches(rng: &mut ChaCha8Rng, n: usize, side: usize) -> Vec<Image> {
        (0..n)
            .map(|_| Image::from_vec(side, side, 3, (0..side * side * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn f_is_monotone_and_nonpositive() {
        let mut prev = f64::NEG_INFINITY;
        for i in 0..1000 {
            let x = -50.0 + 100.0 * i as f64 / 999.0;
            let v = f(x);
            assert!(v <= 0.0 && v >= prev, "x = {x}");
            prev = v;
        }
        assert!((f(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(f(800.0) == 0.0 && f(-800.0) == -800.0);
        for x in [-3.0, -0.2, 0.0, 0.7, 5.0] {
            let fd = (f(x + 1e-6) - f(x - 1e-6)) / 2e-6;
            assert!((fd - f_prime(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_discriminator_gives_minus_two_log_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = Discriminator::new(12, &[5], &mut rng).unwrap();
        for w in &mut d.weights {
            w.fill(0.0);
        }
        let real = rand_patches(&mut rng, 4, 2);
        let fake = rand_patches(&mut rng, 3, 2);
        let g = adv_gradients(&d, &real, &fake, 5.0, PenaltyTarget::Fake).unwrap();
        assert!((g.d_objective + 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g.penalty, 0.0);
    }

    #[test]
    fn linear_discriminator_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = Discriminator::new(12, &[], &mut rng).unwrap();
        let w: Vec<f64> = d.weights[0].iter().copied().collect();
        let real = rand_patches(&mut rng, 5, 2);
        let fake = rand_patches(&mut rng, 4, 2);
        let dot = |p: &Image| p.data.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let g = adv_gradients(&d, &real, &fake, 0.0, PenaltyTarget::Fake).unwrap();
        let mut expect = vec![0.0; 13];
        for p in &fake {
            let s = f_prime(dot(p)) / 4.0;
            for k in 0..12 {
                expect[k] += s * p.data[k];
            }
            expect[12] += s;
        }
        for p in &real {
            let s = -f_prime(-dot(p)) / 5.0;
            for k in 0..12 {
                expect[k] += s * p.data[k];
            }
            expect[12] += s;
        }
        for (a, b) in g.d_grad.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
        // With the penalty: ∇ₓD = w, so the penalty is ‖w‖² with gradient 2w.
        let gp = adv_gradients(&d, &real, &fake, 3.0, PenaltyTarget::Fake).unwrap();
        let wn: f64 = w.iter().map(|v| v * v).sum();
        assert!((gp.penalty - wn).abs() < 1e-12);
        for k in 0..12 {
            assert!((gp.d_grad[k] - (expect[k] - 3.0 * 2.0 * w[k])).abs() < 1e-12);
        }
        // Generator gradient: f'(wᵀx)/n · w.
        for (p, gpix) in fake.iter().zip(&g.fake_grads) {
            let s = f_prime(dot(p)) / 4.0;
            for k in 0..12 {
                assert!((gpix.data[k] - s * w[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Discriminator::new(6, &[5, 4], &mut rng).unwrap();
        let x = Array2::from_shape_simple_fn((3, 6), || rng.gen_range(-1.0..1.0));
        assert!(d.min_preactivation(&x) > 1e-4);
        let (_, g) = penalty_and_grad(&d, &x);
        let flat = d.to_flat();
        let h = 1e-6;
        for k in 0..flat.len() {
            let mut dp = d.clone();
            let mut p = flat.clone();
            p[k] += h;
            dp.set_flat(&p).unwrap();
            let plus = penalty_and_grad(&dp, &x).0;
            p[k] -= 2.0 * h;
            dp.set_flat(&p).unwrap();
            let minus = penalty_and_grad(&dp, &x).0;
            let fd = (plus - minus) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-3 * fd.abs().max(g[k].abs()) + 1e-6, "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn non_finite_logits_skip_the_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut d = Discriminator::new(12, &[4], &mut rng).unwrap();
        let cfg = AdvConfig::default();
        let mut opt = cfg.optimizer(&d);
        let real = rand_patches(&mut rng, 2, 2);
        let mut fake = rand_patches(&mut rng, 2, 2);
        fake[0].data[0] = f64::NAN;
        let before = d.clone();
        let out = adv_step(&mut d, &mut opt, &real, &fake, &cfg).unwrap();
        assert!(out.skipped);
        assert_eq!(d, before);
        assert_eq!(opt.steps(), 0);
        assert!(out.fake_grads.iter().all(|g| g.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn training_separates_constant_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut d = Discriminator::new(12, &[8], &mut rng).unwrap();
        let cfg = AdvConfig::default();
        let mut opt = cfg.optimizer(&d);
        let real = vec![Image::filled(2, 2, 3, 0.2); 4];
        let fake = vec![Image::filled(2, 2, 3, 0.8); 4];
        let first = adv_step(&mut d, &mut opt, &real, &fake, &cfg).unwrap().d_objective;
        let mut last = first;
        for _ in 0..200 {
            last = adv_step(&mut d, &mut opt, &real, &fake, &cfg).unwrap().d_objective;
        }
        assert!(last > first, "{first} -> {last}");
        assert!(d.is_finite());
    }

    #[test]
    fn patch_sampling_rules() {
        let img = Image::filled(40, 30, 3, 0.5);
        let mask = Mask::from_fn(40, 30, |x, y| (18..22).contains(&x) && (12..15).contains(&y));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let set = sample_patches(&mut rng, &img, &mask, 50, 16, 0.1).unwrap();
        let bbox = mask.bounding_box().unwrap();
        for r in &set.rects {
            assert!(r.contains_rect(&bbox));
            assert!(r.x1() <= 40 && r.y1() <= 30);
        }
        let again = sample_patches(&mut ChaCha8Rng::seed_from_u64(6), &img, &mask, 50, 16, 0.1).unwrap();
        assert_eq!(set, again);
        assert!(sample_patches(&mut rng, &img, &mask, 0, 16, 0.1).unwrap().patches.is_empty());
        assert!(sample_patches(&mut rng, &img, &mask, 1, 31, 0.1).is_err());
        assert!(sample_patches(&mut rng, &img, &Mask::empty(40, 30), 1, 8, 0.1).is_err());
    }
}
