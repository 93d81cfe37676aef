//! Adaptive Dormand-Prince 5(4) integration with output at prescribed
//! abscissae (steps are shortened to land on them exactly).

use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Magnitude treated as overflow.
    pub blow_up: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-12,
            max_steps: 1_000_000,
            blow_up: 1e250,
        }
    }
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights (equal to the last row of `A`: first same as last).
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Integrates `y' = f(x, y)` from `(x0, y0)` and returns `y` at each of
/// `targets`, which must be monotone and lie on one side of `x0`.
pub fn integrate<F>(mut f: F, x0: f64, y0: &[f64], targets: &[f64], opts: &OdeOptions) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let n = y0.len();
    let mut out = Vec::with_capacity(targets.len());
    if targets.is_empty() {
        return Ok(out);
    }
    let dir = if targets.iter().any(|&t| t < x0) { -1.0 } else { 1.0 };
    for w in targets.windows(2) {
        if dir * (w[1] - w[0]) < 0.0 {
            return Err(Error::InvalidArgument("ODE output points must be monotone".into()));
        }
    }
    if targets.iter().any(|&t| dir * (t - x0) < 0.0) {
        return Err(Error::InvalidArgument("ODE output points straddle the initial point".into()));
    }
    let span = (targets[targets.len() - 1] - x0).abs();
    let mut x = x0;
    let mut y = y0.to_vec();
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut y5 = vec![0.0; n];
    f(x, &y, &mut k[0])?;
    let mut h = (span * 1e-3).max(1e-6);
    let mut steps = 0;
    for &target in targets {
        while dir * (target - x) > 1e-14 * (1.0 + x.abs()) {
            steps += 1;
            if steps > opts.max_steps {
                return Err(Error::InvalidArgument(format!(
                    "ODE integration exceeded {} steps near x = {x}",
                    opts.max_steps
                )));
            }
            let remaining = (target - x).abs();
            let last = h >= remaining;
            let step = if last { remaining } else { h };
            let hs = dir * step;
            for s in 1..7 {
                for i in 0..n {
                    let mut acc = y[i];
                    for (r, kr) in k.iter().enumerate().take(s) {
                        acc += hs * A[s][r] * kr[i];
                    }
                    tmp[i] = acc;
                }
                f(x + C[s] * hs, &tmp, &mut k[s])?;
            }
            let mut err = 0.0;
            for i in 0..n {
                let mut hi = y[i];
                let mut lo = y[i];
                for s in 0..7 {
                    hi += hs * B5[s] * k[s][i];
                    lo += hs * B4[s] * k[s][i];
                }
                y5[i] = hi;
                let scale = opts.atol + opts.rtol * y[i].abs().max(hi.abs());
                err += ((hi - lo) / scale).powi(2);
            }
            let err = (err / n.max(1) as f64).sqrt();
            if !last && step < 1e-12 * (1.0 + x.abs()) {
                return Err(Error::Overflow { x });
            }
            if !err.is_finite() || y5.iter().any(|v| !v.is_finite()) {
                h = 0.25 * step;
                continue;
            }
            if err <= 1.0 {
                x = if last { target } else { x + hs };
                std::mem::swap(&mut y, &mut y5);
                if y.iter().any(|v| v.abs() > opts.blow_up) {
                    return Err(Error::Overflow { x });
                }
                let (first, rest) = k.split_at_mut(1);
                first[0].copy_from_slice(&rest[5]);
                let grow = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                if !last || grow < 1.0 {
                    h = step * grow;
                }
            } else {
                h = step * (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

/// Solution at every point of the sorted array `xs`, integrating outwards
/// from `x0` (which must lie within the span of `xs`, or at an end).
pub fn integrate_both_ways<F>(mut f: F, x0: f64, y0: &[f64], xs: &[f64], opts: &OdeOptions) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let split = xs.partition_point(|&x| x < x0);
    let left: Vec<f64> = xs[..split].iter().rev().copied().collect();
    let right = &xs[split..];
    let mut lo = integrate(&mut f, x0, y0, &left, opts)?;
    let hi = integrate(&mut f, x0, y0, right, opts)?;
    lo.reverse();
    lo.extend(hi);
    Ok(lo)
}
