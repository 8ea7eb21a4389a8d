//! Rectified flow matching: interpolation path, loss, time grids and the
//! Euler sampler shared by the F0 predictor and the postnet.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};

/// Lower bound on the sway coefficient.
pub const SWAY_MIN: f64 = -1.0;
/// Upper bound on the sway coefficient; beyond it the grid stops being monotone.
pub const SWAY_MAX: f64 = 2.0 / (std::f64::consts::PI - 2.0);
pub const DEFAULT_SWAY: f64 = -1.0;
pub const DEFAULT_NFE: usize = 24;

pub fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    let s = x.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("{what} contains non-finite values")))
    }
}

/// `x_t = (1 - t)·x0 + t·x1` with one `t` per leading-dimension example.
pub fn interp_path(x0: &Tensor, x1: &Tensor, t: &[f64]) -> Result<Tensor> {
    if x0.dims() != x1.dims() {
        return Err(Error::Shape(format!("x0 {:?} vs x1 {:?}", x0.dims(), x1.dims())));
    }
    let b = x0.dim(0)?;
    if t.len() != b {
        return Err(Error::Shape(format!("{} times for {b} examples", t.len())));
    }
    if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid(format!("flow time {bad} outside [0, 1]")));
    }
    let mut shape = vec![1usize; x0.rank()];
    shape[0] = b;
    let tt = Tensor::from_vec(t.to_vec(), shape, x0.device())?.to_dtype(x0.dtype())?;
    let one_minus = (tt.neg()? + 1.0)?;
    Ok((x0.broadcast_mul(&one_minus)? + x1.broadcast_mul(&tt)?)?)
}

/// Mean over all elements of `(v_pred - (x1 - x0))²`.
pub fn rfm_loss(v_pred: &Tensor, x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    if v_pred.dims() != x0.dims() || x0.dims() != x1.dims() {
        return Err(Error::Shape(format!(
            "rfm_loss shapes {:?}, {:?}, {:?}",
            v_pred.dims(),
            x0.dims(),
            x1.dims()
        )));
    }
    for (x, n) in [(v_pred, "v_pred"), (x0, "x0"), (x1, "x1")] {
        ensure_finite(x, n)?;
    }
    let target = (x1 - x0)?;
    Ok((v_pred - target)?.sqr()?.mean_all()?)
}

/// `t_i = u_i + s·(cos(π·u_i/2) − 1 + u_i)` with `u_i = i/N`; endpoints exact.
pub fn sway_schedule(nfe: usize, s: f64) -> Result<Vec<f64>> {
    if nfe == 0 {
        return Err(invalid("nfe must be at least 1"));
    }
    if !(SWAY_MIN..=SWAY_MAX).contains(&s) {
        return Err(invalid(format!("sway coefficient {s} outside [{SWAY_MIN}, {SWAY_MAX}]")));
    }
    let mut grid: Vec<f64> = (0..=nfe)
        .map(|i| {
            let u = i as f64 / nfe as f64;
            u + s * ((std::f64::consts::FRAC_PI_2 * u).cos() - 1.0 + u)
        })
        .collect();
    grid[0] = 0.0;
    grid[nfe] = 1.0;
    Ok(grid)
}

pub fn uniform_schedule(nfe: usize) -> Result<Vec<f64>> {
    sway_schedule(nfe, 0.0)
}

/// Explicit Euler from `grid[0]` to the last grid time:
/// `x ← x + (t_{i+1} − t_i)·v(x, t_i)`.
pub fn euler_integrate<F>(x0: Tensor, grid: &[f64], mut field: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if grid.len() < 2 {
        return Err(invalid("time grid needs at least two points"));
    }
    let mut x = x0;
    for w in grid.windows(2) {
        let v = field(&x, w[0])?;
        if v.dims() != x.dims() {
            return Err(Error::Shape(format!("field returned {:?} for state {:?}", v.dims(), x.dims())));
        }
        x = (&x + (v * (w[1] - w[0]))?)?.detach();
    }
    Ok(x)
}

/// Euler integration of a field from seeded noise on the sway grid.
pub fn ode_generate<F>(shape: &[usize], nfe: usize, sway: f64, seed: u64, dtype: DType, mut field: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if nfe == 0 {
        return Err(invalid("nfe must be at least 1"));
    }
    let grid = sway_schedule(nfe, sway)?;
    let x0 = gaussian(shape, seed, dtype)?;
    euler_integrate(x0, &grid, |x, t| field(x, t))
}

/// Independent standard-normal draws from a seeded stream.
pub fn gaussian(shape: &[usize], seed: u64, dtype: DType) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}
