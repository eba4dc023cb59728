//! Convolutional VAE with optional lateral connections from a parent.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::layers::{
    conv_down, conv_down_back, conv_up, conv_up_back, linear, linear_back, lit, pointwise_add, pointwise_back, relu_in_place,
    relu_mask, Scalar,
};

/// Shape hyperparameters. The number of stride-2 stages is
/// `log2(input_size / 4)`, so the innermost map is always 4×4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_size: usize,
    pub latent_dim: usize,
    pub channels: usize,
    pub hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { input_size: 32, latent_dim: 16, channels: 16, hidden: 64 }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let s = self.input_size;
        if s < 16 || !s.is_power_of_two() {
            return Err(Error::Config(format!("module input size must be a power of two ≥ 16, got {s}")));
        }
        if self.latent_dim == 0 || self.channels == 0 || self.hidden == 0 {
            return Err(Error::Config("module widths must be positive".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        (self.input_size / 4).trailing_zeros() as usize
    }

    /// Stage whose output map carries the mid-level lateral connections.
    pub fn lateral_stage(&self) -> usize {
        self.stages().div_ceil(2)
    }

    fn flat(&self) -> usize {
        self.channels * 16
    }

    fn enc_size(&self, i: usize) -> usize {
        self.input_size >> i
    }

    fn dec_size(&self, j: usize) -> usize {
        4 << j
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Span {
    offset: usize,
    len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dense {
    w: Span,
    b: Span,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Connections {
    lf: Dense,
    gfi: Dense,
    lfi: Dense,
    recon: Dense,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    enc_conv: Vec<Dense>,
    enc_fc: [Dense; 3],
    dec_fc: [Dense; 3],
    dec_conv: Vec<Dense>,
    conn: Option<Connections>,
    manifest: Vec<LayerShape>,
    total: usize,
    fan_in: Vec<(Span, usize)>,
}

struct LayoutBuilder {
    total: usize,
    manifest: Vec<LayerShape>,
    fan_in: Vec<(Span, usize)>,
}

impl LayoutBuilder {
    fn dense(&mut self, name: &str, shape: Vec<usize>, bias: usize, fan_in: usize) -> Dense {
        let len: usize = shape.iter().product();
        let w = Span { offset: self.total, len };
        self.total += len;
        let b = Span { offset: self.total, len: bias };
        self.total += bias;
        self.fan_in.push((w, fan_in));
        self.manifest.push(LayerShape { name: format!("{name}.weight"), shape });
        self.manifest.push(LayerShape { name: format!("{name}.bias"), shape: vec![bias] });
        Dense { w, b }
    }
}

impl Layout {
    fn new(a: &Architecture, connected: bool) -> Self {
        let (c, hd, l, n) = (a.channels, a.hidden, a.latent_dim, a.stages());
        let mut lb = LayoutBuilder { total: 0, manifest: Vec::new(), fan_in: Vec::new() };
        let enc_conv = (0..n)
            .map(|i| {
                let cin = if i == 0 { 1 } else { c };
                lb.dense(&format!("encoder.conv{i}"), vec![c, cin, 4, 4], c, cin * 16)
            })
            .collect();
        let enc_fc = [
            lb.dense("encoder.fc0", vec![hd, a.flat()], hd, a.flat()),
            lb.dense("encoder.fc1", vec![hd, hd], hd, hd),
            lb.dense("encoder.head", vec![2 * l, hd], 2 * l, hd),
        ];
        let dec_fc = [
            lb.dense("decoder.fc0", vec![hd, l], hd, l),
            lb.dense("decoder.fc1", vec![hd, hd], hd, hd),
            lb.dense("decoder.fc2", vec![a.flat(), hd], a.flat(), hd),
        ];
        let dec_conv = (0..n)
            .map(|j| {
                let cout = if j + 1 == n { 1 } else { c };
                lb.dense(&format!("decoder.deconv{j}"), vec![c, cout, 4, 4], cout, c * 16)
            })
            .collect();
        let conn = connected.then(|| Connections {
            lf: lb.dense("lateral.lf", vec![c, c], c, c),
            gfi: lb.dense("lateral.gfi", vec![hd, hd], hd, hd),
            lfi: lb.dense("lateral.lfi", vec![c, c], c, c),
            recon: lb.dense("lateral.recon", vec![1, 1], 1, 1),
        });
        Layout { enc_conv, enc_fc, dec_fc, dec_conv, conn, manifest: lb.manifest, total: lb.total, fan_in: lb.fan_in }
    }
}

/// Parent activations consumed by a child's lateral connections.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace<T> {
    pub encoder_mid: Vec<T>,
    pub decoder_hidden: Vec<T>,
    pub decoder_mid: Vec<T>,
    pub logits: Vec<T>,
}

/// Every intermediate value of one forward pass.
#[derive(Clone, Debug)]
pub struct Pass<T> {
    /// `enc[0]` is the input; `enc[i + 1]` the output of encoder stage `i`.
    enc: Vec<Vec<T>>,
    enc_pre: Vec<Vec<T>>,
    f1: Vec<T>,
    f2: Vec<T>,
    pub mean: Vec<T>,
    pub logvar: Vec<T>,
    z: Vec<T>,
    g1_pre: Vec<T>,
    gfi_pre: Vec<T>,
    g1: Vec<T>,
    g2: Vec<T>,
    /// `dec[0]` is the reshaped decoder bottleneck; `dec[j]` feeds deconv `j`.
    dec: Vec<Vec<T>>,
    dec_pre: Vec<Vec<T>>,
    pub logits: Vec<T>,
}

impl<T: Scalar> Pass<T> {
    pub fn trace(&self, arch: &Architecture) -> Trace<T> {
        let l = arch.lateral_stage();
        Trace {
            encoder_mid: self.enc[l].clone(),
            decoder_hidden: self.g1.clone(),
            decoder_mid: self.dec[l].clone(),
            logits: self.logits.clone(),
        }
    }
}

/// Loss terms averaged over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// Numerically stable binary cross-entropy of a logit against a target in `[0, 1]`.
pub fn bce_with_logits(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Net<T> {
    arch: Architecture,
    layout: Layout,
    pub params: Vec<T>,
}

impl<T: Scalar> Net<T> {
    /// Fan-in scaled uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, connected: bool, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch, connected);
        let mut params = vec![T::zero(); layout.total];
        for &(span, fan_in) in &layout.fan_in {
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut params[span.offset..span.offset + span.len] {
                *p = lit(rng.gen_range(-bound..bound));
            }
        }
        Ok(Self { arch, layout, params })
    }

    pub fn from_params(arch: Architecture, connected: bool, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch, connected);
        if params.len() != layout.total {
            return Err(Error::ShapeMismatch { expected: format!("{} parameters", layout.total), got: params.len().to_string() });
        }
        Ok(Self { arch, layout, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn is_connected(&self) -> bool {
        self.layout.conn.is_some()
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn manifest(&self) -> &[LayerShape] {
        &self.layout.manifest
    }

    pub fn cast<U: Scalar>(&self) -> Net<U> {
        Net {
            arch: self.arch,
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| lit(v.to_f64().unwrap_or(0.0))).collect(),
        }
    }

    fn p(&self, s: Span) -> &[T] {
        &self.params[s.offset..s.offset + s.len]
    }

    fn check_inputs(&self, input: &[T], parent: Option<&Trace<T>>) -> Result<()> {
        let s = self.arch.input_size;
        if input.len() != s * s {
            return Err(Error::ShapeMismatch { expected: format!("{s}x{s} input"), got: format!("{} cells", input.len()) });
        }
        if parent.is_some() != self.is_connected() {
            return Err(Error::ShapeMismatch {
                expected: if self.is_connected() { "parent trace" } else { "no parent trace" }.into(),
                got: if parent.is_some() { "parent trace" } else { "none" }.into(),
            });
        }
        Ok(())
    }

    /// Full forward pass. `noise` is the reparameterization draw; `None`
    /// decodes the posterior mean.
    pub fn forward(&self, input: &[T], parent: Option<&Trace<T>>, noise: Option<&[T]>) -> Result<Pass<T>> {
        self.check_inputs(input, parent)?;
        let a = &self.arch;
        let (c, n, lat) = (a.channels, a.stages(), a.lateral_stage());
        let conn = self.layout.conn.as_ref();

        let mut enc = vec![input.to_vec()];
        let mut enc_pre = Vec::with_capacity(n);
        for i in 0..n {
            let (size, cin) = (a.enc_size(i), if i == 0 { 1 } else { c });
            let d = self.layout.enc_conv[i];
            let mut pre = vec![T::zero(); c * (size / 2) * (size / 2)];
            conv_down(&enc[i], cin, size, size, self.p(d.w), self.p(d.b), c, &mut pre);
            let mut out = pre.clone();
            relu_in_place(&mut out);
            if let (Some(cn), Some(tr)) = (conn, parent) {
                if i + 1 == lat {
                    pointwise_add(&tr.encoder_mid, c, self.p(cn.lf.w), self.p(cn.lf.b), c, &mut out);
                }
            }
            enc_pre.push(pre);
            enc.push(out);
        }

        let [e0, e1, e2] = self.layout.enc_fc;
        let mut f1 = vec![T::zero(); a.hidden];
        linear(&enc[n], self.p(e0.w), self.p(e0.b), &mut f1);
        relu_in_place(&mut f1);
        let mut f2 = vec![T::zero(); a.hidden];
        linear(&f1, self.p(e1.w), self.p(e1.b), &mut f2);
        relu_in_place(&mut f2);
        let mut head = vec![T::zero(); 2 * a.latent_dim];
        linear(&f2, self.p(e2.w), self.p(e2.b), &mut head);
        let logvar = head.split_off(a.latent_dim);
        let mean = head;

        let z: Vec<T> = match noise {
            Some(eps) => mean.iter().zip(&logvar).zip(eps).map(|((m, lv), e)| *m + (*lv * lit(0.5)).exp() * *e).collect(),
            None => mean.clone(),
        };

        let [d0, d1, d2] = self.layout.dec_fc;
        let mut g1_pre = vec![T::zero(); a.hidden];
        linear(&z, self.p(d0.w), self.p(d0.b), &mut g1_pre);
        let mut g1 = g1_pre.clone();
        relu_in_place(&mut g1);
        let mut gfi_pre = Vec::new();
        if let (Some(cn), Some(tr)) = (conn, parent) {
            gfi_pre = vec![T::zero(); a.hidden];
            linear(&tr.decoder_hidden, self.p(cn.gfi.w), self.p(cn.gfi.b), &mut gfi_pre);
            for (g, v) in g1.iter_mut().zip(&gfi_pre) {
                if *v > T::zero() {
                    *g += *v;
                }
            }
        }
        let mut g2 = vec![T::zero(); a.hidden];
        linear(&g1, self.p(d1.w), self.p(d1.b), &mut g2);
        relu_in_place(&mut g2);
        let mut g3 = vec![T::zero(); a.flat()];
        linear(&g2, self.p(d2.w), self.p(d2.b), &mut g3);
        relu_in_place(&mut g3);

        let mut dec = vec![g3];
        let mut dec_pre = Vec::with_capacity(n);
        let mut logits = Vec::new();
        for j in 0..n {
            let size = a.dec_size(j);
            let cout = if j + 1 == n { 1 } else { c };
            let d = self.layout.dec_conv[j];
            let mut pre = vec![T::zero(); cout * 4 * size * size];
            conv_up(&dec[j], c, size, size, self.p(d.w), self.p(d.b), cout, &mut pre);
            let mut out = pre.clone();
            if j + 1 < n {
                relu_in_place(&mut out);
                if let (Some(cn), Some(tr)) = (conn, parent) {
                    if j + 1 == lat {
                        pointwise_add(&tr.decoder_mid, c, self.p(cn.lfi.w), self.p(cn.lfi.b), c, &mut out);
                    }
                }
                dec.push(out);
            } else {
                if let (Some(cn), Some(tr)) = (conn, parent) {
                    pointwise_add(&tr.logits, 1, self.p(cn.recon.w), self.p(cn.recon.b), 1, &mut out);
                }
                logits = out;
            }
            dec_pre.push(pre);
        }

        Ok(Pass { enc, enc_pre, f1, f2, mean, logvar, z, g1_pre, gfi_pre, g1, g2, dec, dec_pre, logits })
    }

    /// Posterior mean and the trace children need.
    pub fn encode(&self, input: &[T], parent: Option<&Trace<T>>) -> Result<(Vec<T>, Trace<T>)> {
        let pass = self.forward(input, parent, None)?;
        let trace = pass.trace(&self.arch);
        Ok((pass.mean, trace))
    }

    /// Batch loss and its gradient (accumulated into `grad`). Each item is
    /// `(input, parent trace, noise)`; the input doubles as the target.
    pub fn loss_and_grad(&self, batch: &[(&[T], Option<&Trace<T>>, &[T])], grad: &mut [T]) -> Result<LossParts> {
        if grad.len() != self.params.len() {
            return Err(Error::ShapeMismatch { expected: self.params.len().to_string(), got: grad.len().to_string() });
        }
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut parts = LossParts::default();
        for (input, parent, noise) in batch {
            let pass = self.forward(input, *parent, Some(noise))?;
            let (rec, kl) = sample_loss(&pass, input);
            parts.reconstruction += rec * scale;
            parts.kl += kl * scale;
            self.backward(&pass, input, *parent, noise, lit(scale), grad);
        }
        parts.total = parts.reconstruction + parts.kl;
        Ok(parts)
    }

    /// Batch loss only.
    pub fn loss(&self, batch: &[(&[T], Option<&Trace<T>>, &[T])]) -> Result<LossParts> {
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut parts = LossParts::default();
        for (input, parent, noise) in batch {
            let pass = self.forward(input, *parent, Some(noise))?;
            let (rec, kl) = sample_loss(&pass, input);
            parts.reconstruction += rec * scale;
            parts.kl += kl * scale;
        }
        parts.total = parts.reconstruction + parts.kl;
        Ok(parts)
    }

    fn backward(&self, pass: &Pass<T>, target: &[T], parent: Option<&Trace<T>>, noise: &[T], scale: T, grad: &mut [T]) {
        let a = &self.arch;
        let (c, n, lat) = (a.channels, a.stages(), a.lateral_stage());
        let lay = &self.layout;
        let conn = lay.conn.as_ref().zip(parent);

        // d(BCE)/d(logit) = sigmoid(logit) - target
        let mut d: Vec<T> = pass
            .logits
            .iter()
            .zip(target)
            .map(|(l, t)| (T::one() / (T::one() + (-*l).exp()) - *t) * scale)
            .collect();
        if let Some((cn, tr)) = conn {
            let (gw, gb) = split_grad(grad, cn.recon);
            pointwise_back(&tr.logits, 1, 1, &d, gw, gb);
        }

        let mut d_bottleneck = Vec::new();
        for j in (0..n).rev() {
            let size = a.dec_size(j);
            let cout = if j + 1 == n { 1 } else { c };
            let dl = lay.dec_conv[j];
            let mut gin = vec![T::zero(); c * size * size];
            {
                let (gw, gb) = split_grad(grad, dl);
                conv_up_back(&pass.dec[j], c, size, size, self.p(dl.w), cout, &d, gw, gb, &mut gin);
            }
            if j > 0 {
                if let Some((cn, tr)) = conn {
                    if j == lat {
                        let (gw, gb) = split_grad(grad, cn.lfi);
                        pointwise_back(&tr.decoder_mid, c, c, &gin, gw, gb);
                    }
                }
                relu_mask(&mut gin, &pass.dec_pre[j - 1]);
                d = gin;
            } else {
                d_bottleneck = gin;
            }
        }

        let [d0, d1, d2] = lay.dec_fc;
        let mut dg3 = d_bottleneck;
        relu_mask(&mut dg3, &pass.dec[0]);
        let mut dg2 = vec![T::zero(); a.hidden];
        {
            let (gw, gb) = split_grad(grad, d2);
            linear_back(&pass.g2, self.p(d2.w), &dg3, gw, gb, Some(&mut dg2));
        }
        relu_mask(&mut dg2, &pass.g2);
        let mut dg1 = vec![T::zero(); a.hidden];
        {
            let (gw, gb) = split_grad(grad, d1);
            linear_back(&pass.g1, self.p(d1.w), &dg2, gw, gb, Some(&mut dg1));
        }
        if let Some((cn, tr)) = conn {
            let mut dl = dg1.clone();
            relu_mask(&mut dl, &pass.gfi_pre);
            let (gw, gb) = split_grad(grad, cn.gfi);
            linear_back(&tr.decoder_hidden, self.p(cn.gfi.w), &dl, gw, gb, None);
        }
        relu_mask(&mut dg1, &pass.g1_pre);
        let mut dz = vec![T::zero(); a.latent_dim];
        {
            let (gw, gb) = split_grad(grad, d0);
            linear_back(&pass.z, self.p(d0.w), &dg1, gw, gb, Some(&mut dz));
        }

        let half: T = lit(0.5);
        let mut dhead = vec![T::zero(); 2 * a.latent_dim];
        for k in 0..a.latent_dim {
            let (m, lv) = (pass.mean[k], pass.logvar[k]);
            let sd = (lv * half).exp();
            dhead[k] = dz[k] + m * scale;
            dhead[a.latent_dim + k] = dz[k] * noise[k] * sd * half + (lv.exp() - T::one()) * half * scale;
        }

        let [e0, e1, e2] = lay.enc_fc;
        let mut df2 = vec![T::zero(); a.hidden];
        {
            let (gw, gb) = split_grad(grad, e2);
            linear_back(&pass.f2, self.p(e2.w), &dhead, gw, gb, Some(&mut df2));
        }
        relu_mask(&mut df2, &pass.f2);
        let mut df1 = vec![T::zero(); a.hidden];
        {
            let (gw, gb) = split_grad(grad, e1);
            linear_back(&pass.f1, self.p(e1.w), &df2, gw, gb, Some(&mut df1));
        }
        relu_mask(&mut df1, &pass.f1);
        let mut dx = vec![T::zero(); a.flat()];
        {
            let (gw, gb) = split_grad(grad, e0);
            linear_back(&pass.enc[n], self.p(e0.w), &df1, gw, gb, Some(&mut dx));
        }

        for i in (0..n).rev() {
            if let Some((cn, tr)) = conn {
                if i + 1 == lat {
                    let (gw, gb) = split_grad(grad, cn.lf);
                    pointwise_back(&tr.encoder_mid, c, c, &dx, gw, gb);
                }
            }
            relu_mask(&mut dx, &pass.enc_pre[i]);
            let (size, cin) = (a.enc_size(i), if i == 0 { 1 } else { c });
            let dl = lay.enc_conv[i];
            let mut gin = if i > 0 { vec![T::zero(); cin * size * size] } else { Vec::new() };
            let (gw, gb) = split_grad(grad, dl);
            conv_down_back(&pass.enc[i], cin, size, size, self.p(dl.w), c, &dx, gw, gb, (i > 0).then_some(&mut gin[..]));
            dx = gin;
        }
    }
}

fn sample_loss<T: Scalar>(pass: &Pass<T>, target: &[T]) -> (f64, f64) {
    let f = |v: &T| v.to_f64().unwrap_or(f64::NAN);
    let rec: f64 = pass.logits.iter().zip(target).map(|(l, t)| bce_with_logits(f(l), f(t))).sum();
    let kl: f64 = pass
        .mean
        .iter()
        .zip(&pass.logvar)
        .map(|(m, lv)| {
            let (m, lv) = (f(m), f(lv));
            -0.5 * (1.0 + lv - m * m - lv.exp())
        })
        .sum();
    (rec, kl)
}

fn split_grad<T>(grad: &mut [T], d: Dense) -> (&mut [T], &mut [T]) {
    debug_assert_eq!(d.w.offset + d.w.len, d.b.offset);
    let (w, rest) = grad[d.w.offset..d.b.offset + d.b.len].split_at_mut(d.w.len);
    (w, rest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> Architecture {
        Architecture { input_size: 16, latent_dim: 3, channels: 2, hidden: 5 }
    }

    #[test]
    fn stage_counts() {
        assert_eq!(Architecture { input_size: 256, ..Default::default() }.stages(), 6);
        assert_eq!(Architecture { input_size: 128, ..Default::default() }.stages(), 5);
        assert_eq!(Architecture::default().stages(), 3);
        assert_eq!(Architecture::default().lateral_stage(), 2);
        assert!(Architecture { input_size: 8, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn manifest_covers_all_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Net::<f32>::new(Architecture::default(), true, &mut rng).unwrap();
        let total: usize = net.manifest().iter().map(|l| l.shape.iter().product::<usize>()).sum();
        assert_eq!(total, net.param_count());
    }

    #[test]
    fn posterior_at_origin_has_zero_kl() {
        let pass = Pass::<f64> {
            enc: vec![],
            enc_pre: vec![],
            f1: vec![],
            f2: vec![],
            mean: vec![0.0; 4],
            logvar: vec![0.0; 4],
            z: vec![],
            g1_pre: vec![],
            gfi_pre: vec![],
            g1: vec![],
            g2: vec![],
            dec: vec![],
            dec_pre: vec![],
            logits: vec![],
        };
        assert_eq!(sample_loss(&pass, &[]).1, 0.0);
    }

    #[test]
    fn bce_minimum_is_target_entropy() {
        for t in [0.1f64, 0.5, 0.9] {
            let logit = (t / (1.0 - t)).ln();
            let entropy = -(t * t.ln() + (1.0 - t) * (1.0 - t).ln());
            assert!((bce_with_logits(logit, t) - entropy).abs() < 1e-12);
            assert!(bce_with_logits(logit + 0.1, t) > entropy);
        }
    }

    #[test]
    fn parent_trace_presence_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let root = Net::<f64>::new(toy(), false, &mut rng).unwrap();
        let child = Net::<f64>::new(toy(), true, &mut rng).unwrap();
        let x = vec![0.5; 256];
        let (_, tr) = root.encode(&x, None).unwrap();
        assert!(root.encode(&x, Some(&tr)).is_err());
        assert!(child.encode(&x, None).is_err());
        assert!(child.encode(&x, Some(&tr)).is_ok());
        assert!(root.encode(&[0.0; 10], None).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let parent = Net::<f64>::new(toy(), false, &mut rng).unwrap();
        let mut child = Net::<f64>::new(toy(), true, &mut rng).unwrap();
        let inputs: Vec<Vec<f64>> = (0..2).map(|_| (0..256).map(|_| rng.gen::<f64>()).collect()).collect();
        let noise: Vec<Vec<f64>> = (0..2).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let traces: Vec<Trace<f64>> = inputs.iter().map(|x| parent.encode(x, None).unwrap().1).collect();
        let batch = |_: ()| -> Vec<(&[f64], Option<&Trace<f64>>, &[f64])> {
            (0..2).map(|i| (&inputs[i][..], Some(&traces[i]), &noise[i][..])).collect()
        };
        let mut grad = vec![0.0; child.param_count()];
        child.loss_and_grad(&batch(()), &mut grad).unwrap();
        let h = 1e-6;
        for idx in (0..child.param_count()).step_by(7) {
            let orig = child.params[idx];
            child.params[idx] = orig + h;
            let up = child.loss(&batch(())).unwrap().total;
            child.params[idx] = orig - h;
            let down = child.loss(&batch(())).unwrap().total;
            child.params[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = numeric.abs().max(grad[idx].abs()).max(1e-6);
            assert!((numeric - grad[idx]).abs() / denom < 1e-4, "param {idx}: {numeric} vs {}", grad[idx]);
        }
    }
}
