//! Lenia continuous cellular automaton on a torus.
//!
//! One update is `A ← clip(A + (1/T)·G(K ∗ A), 0, 1)` where `K` is a
//! normalized concentric-ring kernel and `G` an exponential growth mapping.
//! The convolution is circular and evaluated in the Fourier domain with the
//! kernel transform computed once per parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{Fft2Scratch, RealFft2, C64};
use crate::grid::Grid;

/// Sharpness of the kernel core bump.
pub const KERNEL_CORE_ALPHA: f64 = 4.0;
/// Number of concentric rings (length of `beta`).
pub const KERNEL_RINGS: usize = 3;

/// Closed sampling interval of one update-rule parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

impl Bounds {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.min, self.max)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

pub const RADIUS_BOUNDS: Bounds = Bounds::new(2.0, 20.0);
pub const TIME_BOUNDS: Bounds = Bounds::new(1.0, 20.0);
pub const MU_BOUNDS: Bounds = Bounds::new(0.0, 1.0);
pub const SIGMA_BOUNDS: Bounds = Bounds::new(0.001, 0.3);
pub const BETA_BOUNDS: Bounds = Bounds::new(0.0, 1.0);

/// Update-rule half of the controllable parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRuleParams {
    /// Kernel radius in cells.
    #[serde(rename = "R")]
    pub radius: f64,
    /// Time resolution; each step applies `1/T` of the growth.
    #[serde(rename = "T")]
    pub time_scale: f64,
    pub mu: f64,
    pub sigma: f64,
    pub beta: [f64; KERNEL_RINGS],
}

impl UpdateRuleParams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("R", self.radius, RADIUS_BOUNDS),
            ("T", self.time_scale, TIME_BOUNDS),
            ("mu", self.mu, MU_BOUNDS),
            ("sigma", self.sigma, SIGMA_BOUNDS),
        ];
        for (name, v, b) in checks {
            if !b.contains(v) {
                return Err(Error::Config(format!("{name}={v} outside [{}, {}]", b.min, b.max)));
            }
        }
        for (i, &b) in self.beta.iter().enumerate() {
            if !BETA_BOUNDS.contains(b) {
                return Err(Error::Config(format!("beta[{i}]={b} outside [0, 1]")));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        1.0 / self.time_scale
    }
}

/// Normalized ring kernel sampled on the grid with its center at `(0, 0)`.
#[derive(Clone, Debug)]
pub struct KernelSpec {
    values: Grid,
}

impl KernelSpec {
    pub fn values(&self) -> &Grid {
        &self.values
    }

    pub fn sum(&self) -> f64 {
        self.values.sum()
    }
}

/// Kernel core `K_C(r) = exp(α − α/(4r(1−r)))`, zero outside `(0, 1)`.
pub fn kernel_core(r: f64) -> f64 {
    if r <= 0.0 || r >= 1.0 {
        return 0.0;
    }
    let a = KERNEL_CORE_ALPHA;
    (a - a / (4.0 * r * (1.0 - r))).exp()
}

/// Kernel shell at normalized distance `r`: ring `⌊Br⌋` of the core profile.
pub fn kernel_shell(r: f64, beta: &[f64; KERNEL_RINGS]) -> f64 {
    if !(0.0..1.0).contains(&r) {
        return 0.0;
    }
    let br = KERNEL_RINGS as f64 * r;
    let ring = (br.floor() as usize).min(KERNEL_RINGS - 1);
    beta[ring] * kernel_core(br - ring as f64)
}

pub fn build_kernel(params: &UpdateRuleParams, height: usize, width: usize) -> Result<KernelSpec> {
    params.validate()?;
    let support = 2.0 * params.radius + 1.0;
    if (height as f64) < support || (width as f64) < support {
        return Err(Error::Config(format!(
            "grid {height}x{width} smaller than kernel support {support:.1}"
        )));
    }
    let mut values = Grid::from_fn(height, width, |y, x| {
        let dy = y.min(height - y) as f64;
        let dx = x.min(width - x) as f64;
        let r = (dy * dy + dx * dx).sqrt() / params.radius;
        kernel_shell(r, &params.beta)
    });
    let total = values.sum();
    if !(total > 0.0) {
        return Err(Error::Config(format!(
            "kernel shell is identically zero (R={}, beta={:?})",
            params.radius, params.beta
        )));
    }
    values.values_mut().iter_mut().for_each(|v| *v /= total);
    Ok(KernelSpec { values })
}

/// Growth mapping `G(u; μ, σ) = 2·exp(−(u−μ)²/(2σ²)) − 1`.
#[inline]
pub fn growth(u: f64, mu: f64, sigma: f64) -> f64 {
    let d = u - mu;
    2.0 * (-(d * d) / (2.0 * sigma * sigma)).exp() - 1.0
}

/// Simulator for one parameter vector on one grid shape.
pub struct Lenia {
    params: UpdateRuleParams,
    kernel: KernelSpec,
    fft: RealFft2,
    kernel_hat: Vec<C64>,
}

/// Working buffers reused across steps.
pub struct StepBuffers {
    fft: Fft2Scratch,
    spec: Vec<C64>,
    potential: Vec<f64>,
}

impl Lenia {
    pub fn new(params: &UpdateRuleParams, height: usize, width: usize) -> Result<Self> {
        let kernel = build_kernel(params, height, width)?;
        Ok(Self::with_kernel(params, kernel))
    }

    pub fn with_kernel(params: &UpdateRuleParams, kernel: KernelSpec) -> Self {
        let (h, w) = kernel.values.shape();
        let fft = RealFft2::new(h, w);
        let mut scratch = fft.scratch();
        let mut kernel_hat = vec![C64::new(0.0, 0.0); fft.spectrum_len()];
        fft.forward(kernel.values.values(), &mut kernel_hat, &mut scratch);
        Self { params: params.clone(), kernel, fft, kernel_hat }
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn params(&self) -> &UpdateRuleParams {
        &self.params
    }

    pub fn buffers(&self) -> StepBuffers {
        StepBuffers {
            fft: self.fft.scratch(),
            spec: vec![C64::new(0.0, 0.0); self.fft.spectrum_len()],
            potential: vec![0.0; self.kernel.values.len()],
        }
    }

    /// Circular convolution `K ∗ A`.
    pub fn potential(&self, state: &Grid, buf: &mut StepBuffers) -> Vec<f64> {
        self.convolve_into(state, buf);
        buf.potential.clone()
    }

    fn convolve_into(&self, state: &Grid, buf: &mut StepBuffers) {
        self.fft.forward(state.values(), &mut buf.spec, &mut buf.fft);
        for (s, k) in buf.spec.iter_mut().zip(&self.kernel_hat) {
            *s *= k;
        }
        self.fft.inverse(&mut buf.spec, &mut buf.potential, &mut buf.fft);
    }

    /// Advances `state` by one update in place. Any non-finite value is
    /// reported as a fault at `step_index`.
    pub fn step_in_place(&self, state: &mut Grid, buf: &mut StepBuffers, step_index: usize) -> Result<()> {
        if state.shape() != self.kernel.values.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.kernel.values.shape()),
                got: format!("{:?}", state.shape()),
            });
        }
        self.convolve_into(state, buf);
        let dt = self.params.dt();
        let (mu, sigma) = (self.params.mu, self.params.sigma);
        let mut finite = true;
        for (a, &u) in state.values_mut().iter_mut().zip(&buf.potential) {
            let next = *a + dt * growth(u, mu, sigma);
            finite &= next.is_finite();
            *a = next.clamp(0.0, 1.0);
        }
        if !finite {
            return Err(Error::NumericalFault { step: step_index });
        }
        Ok(())
    }

    pub fn rollout(&self, initial: &Grid, steps: usize, frame_every: Option<usize>) -> Result<Rollout> {
        if steps == 0 {
            return Err(Error::Config("rollout needs at least one step".into()));
        }
        let mut buf = self.buffers();
        let mut state = initial.clone();
        let mut frames = Vec::new();
        for t in 1..=steps {
            self.step_in_place(&mut state, &mut buf, t)?;
            if let Some(every) = frame_every {
                if every > 0 && t % every == 0 && t != steps {
                    frames.push(state.clone());
                }
            }
        }
        Ok(Rollout {
            initial: initial.clone(),
            final_state: state,
            steps,
            frames: frame_every.map(|_| frames),
        })
    }
}

/// Result of `steps` consecutive updates.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub initial: Grid,
    pub final_state: Grid,
    pub steps: usize,
    /// Intermediate grids sampled every `frame_every` steps, when requested.
    pub frames: Option<Vec<Grid>>,
}

/// One update with a freshly planned transform.
pub fn step(state: &Grid, kernel: &KernelSpec, params: &UpdateRuleParams) -> Result<Grid> {
    let sim = Lenia::with_kernel(params, kernel.clone());
    let mut buf = sim.buffers();
    let mut next = state.clone();
    sim.step_in_place(&mut next, &mut buf, 1)?;
    Ok(next)
}

pub fn rollout(initial: &Grid, params: &UpdateRuleParams, steps: usize) -> Result<Rollout> {
    let sim = Lenia::new(params, initial.height(), initial.width())?;
    sim.rollout(initial, steps, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(radius: f64, beta: [f64; 3]) -> UpdateRuleParams {
        UpdateRuleParams { radius, time_scale: 10.0, mu: 0.3, sigma: 0.05, beta }
    }

    /// Scalar reference for the kernel value at a cell.
    fn reference_shell(y: usize, x: usize, h: usize, w: usize, p: &UpdateRuleParams) -> f64 {
        let dy = if y <= h / 2 { y } else { h - y } as f64;
        let dx = if x <= w / 2 { x } else { w - x } as f64;
        let r = dy.hypot(dx) / p.radius;
        if r >= 1.0 {
            return 0.0;
        }
        let br = 3.0 * r;
        let idx = br as usize;
        let q = br - idx as f64;
        if q == 0.0 {
            return 0.0;
        }
        p.beta[idx] * (4.0 - 1.0 / (q * (1.0 - q))).exp()
    }

    #[test]
    fn core_peaks_at_half() {
        assert_eq!(kernel_core(0.5), 1.0);
        assert_eq!(kernel_core(0.0), 0.0);
        assert_eq!(kernel_core(1.0), 0.0);
    }

    #[test]
    fn kernel_sums_to_one() {
        let k = build_kernel(&params(7.5, [1.0, 1.0, 1.0]), 32, 32).unwrap();
        assert!((k.sum() - 1.0).abs() < 1e-12);
        assert!(k.values().values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn single_ring_kernel_zero_outside_first_third() {
        let p = params(9.0, [1.0, 0.0, 0.0]);
        let k = build_kernel(&p, 32, 32).unwrap();
        let mut unnorm_total = 0.0;
        for y in 0..32 {
            for x in 0..32 {
                unnorm_total += reference_shell(y, x, 32, 32, &p);
            }
        }
        for y in 0..32 {
            for x in 0..32 {
                let dy = y.min(32 - y) as f64;
                let dx = x.min(32 - x) as f64;
                let r = dy.hypot(dx) / p.radius;
                let v = k.values().get(y, x);
                if r >= 1.0 / 3.0 {
                    assert_eq!(v, 0.0, "cell ({y},{x}) r={r}");
                }
                let expect = reference_shell(y, x, 32, 32, &p) / unnorm_total;
                assert!((v - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn kernel_larger_than_grid_is_rejected() {
        assert!(matches!(build_kernel(&params(20.0, [1.0; 3]), 32, 32), Err(Error::Config(_))));
    }

    #[test]
    fn growth_landmarks() {
        let (mu, sigma) = (0.27, 0.031);
        assert_eq!(growth(mu, mu, sigma), 1.0);
        let z = sigma * (2.0 * 2f64.ln()).sqrt();
        assert!(growth(mu + z, mu, sigma).abs() < 1e-12);
        assert!(growth(mu - z, mu, sigma).abs() < 1e-12);
        assert!(growth(mu + 10.0 * sigma, mu, sigma) < -1.0 + 1e-10);
    }

    #[test]
    fn zero_grid_is_fixed_point_when_growth_at_zero_negative() {
        let p = params(5.0, [1.0, 0.5, 0.2]);
        assert!(growth(0.0, p.mu, p.sigma) < 0.0);
        let k = build_kernel(&p, 24, 24).unwrap();
        let next = step(&Grid::zeros(24, 24), &k, &p).unwrap();
        assert!(next.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_grid_stays_constant() {
        let p = params(6.0, [0.3, 1.0, 0.7]);
        let k = build_kernel(&p, 32, 32).unwrap();
        for a in [0.1, 0.3, 0.9] {
            let next = step(&Grid::filled(32, 32, a), &k, &p).unwrap();
            let expect = (a + p.dt() * growth(a, p.mu, p.sigma)).clamp(0.0, 1.0);
            for &v in next.values() {
                assert!((v - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn step_matches_direct_convolution() {
        let p = params(4.0, [1.0, 0.6, 0.3]);
        let (h, w) = (16, 20);
        let k = build_kernel(&p, h, w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Grid::from_fn(h, w, |_, _| rng.gen());
        let fast = step(&a, &k, &p).unwrap();
        let direct = Grid::from_fn(h, w, |y, x| {
            let mut u = 0.0;
            for ky in 0..h {
                for kx in 0..w {
                    u += k.values().get(ky, kx) * a.get((y + h - ky) % h, (x + w - kx) % w);
                }
            }
            (a.get(y, x) + p.dt() * growth(u, p.mu, p.sigma)).clamp(0.0, 1.0)
        });
        assert!(fast.max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn one_step_rollout_equals_step() {
        let p = params(3.0, [1.0, 1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Grid::from_fn(16, 16, |_, _| rng.gen());
        let k = build_kernel(&p, 16, 16).unwrap();
        let r = rollout(&a, &p, 1).unwrap();
        assert_eq!(r.final_state, step(&a, &k, &p).unwrap());
        assert!(rollout(&a, &p, 0).is_err());
    }

    #[test]
    fn frames_are_optional_and_do_not_change_result() {
        let p = params(3.0, [1.0, 0.2, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let a = Grid::from_fn(16, 16, |_, _| rng.gen());
        let sim = Lenia::new(&p, 16, 16).unwrap();
        let plain = sim.rollout(&a, 10, None).unwrap();
        let framed = sim.rollout(&a, 10, Some(3)).unwrap();
        assert_eq!(plain.final_state, framed.final_state);
        assert_eq!(framed.frames.unwrap().len(), 3);
        assert!(plain.frames.is_none());
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = params(3.0, [1.0; 3]);
        p.sigma = 0.0;
        assert!(p.validate().is_err());
        p.sigma = 0.1;
        p.beta[2] = 1.5;
        assert!(p.validate().is_err());
    }
}
