//! Adaptive Gauss–Kronrod (7, 15) quadrature for vector-valued integrands.
//!
//! All components share the same function evaluations and the same interval
//! refinement. The interval with the largest tolerance-normalized error is
//! bisected until every component meets `max(abs_tol, rel_tol·|I_k|)`.

// Node and weight tables are kept at their published length.
#![allow(clippy::excessive_precision)]

use thiserror::Error;

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144838258730,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];

const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];

// Gauss weights for XGK[1], XGK[3], XGK[5] and the centre.
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadConfig {
    fn default() -> Self {
        QuadConfig {
            abs_tol: 1e-10,
            rel_tol: 1e-10,
            max_intervals: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuadError {
    #[error("quadrature did not reach tolerance with {intervals} subintervals (error estimate {error:e})")]
    NotConverged { intervals: usize, error: f64 },
    #[error("integrand returned a non-finite value at {0}")]
    NonFinite(f64),
    #[error("invalid integration limits [{0}, {1}]")]
    InvalidLimits(f64, f64),
}

#[derive(Debug, Clone, Copy)]
struct Segment<const N: usize> {
    a: f64,
    b: f64,
    value: [f64; N],
    error: [f64; N],
}

fn gk15<const N: usize>(f: &impl Fn(f64) -> [f64; N], a: f64, b: f64) -> Result<Segment<N>, QuadError> {
    let centre = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut kronrod = [0.0; N];
    let mut gauss = [0.0; N];
    let eval = |x: f64| -> Result<[f64; N], QuadError> {
        let v = f(x);
        if v.iter().all(|c| c.is_finite()) {
            Ok(v)
        } else {
            Err(QuadError::NonFinite(x))
        }
    };
    let fc = eval(centre)?;
    for k in 0..N {
        kronrod[k] = WGK[7] * fc[k];
        gauss[k] = WG[3] * fc[k];
    }
    for j in 0..7 {
        let dx = half * XGK[j];
        let f1 = eval(centre - dx)?;
        let f2 = eval(centre + dx)?;
        for k in 0..N {
            let s = f1[k] + f2[k];
            kronrod[k] += WGK[j] * s;
            if j % 2 == 1 {
                gauss[k] += WG[j / 2] * s;
            }
        }
    }
    let mut value = [0.0; N];
    let mut error = [0.0; N];
    for k in 0..N {
        value[k] = kronrod[k] * half;
        error[k] = ((kronrod[k] - gauss[k]) * half).abs();
    }
    Ok(Segment { a, b, value, error })
}

/// Integrates `f` over `[points[0], points[last]]`, starting from the
/// subintervals delimited by `points` (sorted, at least two entries).
pub fn integrate<const N: usize>(
    f: impl Fn(f64) -> [f64; N],
    points: &[f64],
    config: &QuadConfig,
) -> Result<[f64; N], QuadError> {
    let (lo, hi) = match points {
        [first, .., last] => (*first, *last),
        _ => return Err(QuadError::InvalidLimits(f64::NAN, f64::NAN)),
    };
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(QuadError::InvalidLimits(lo, hi));
    }
    let mut segments = Vec::with_capacity(config.max_intervals);
    for w in points.windows(2) {
        if w[1] > w[0] {
            segments.push(gk15(&f, w[0], w[1])?);
        }
    }
    loop {
        let mut total = [0.0; N];
        let mut err = [0.0; N];
        for s in &segments {
            for k in 0..N {
                total[k] += s.value[k];
                err[k] += s.error[k];
            }
        }
        let tol: Vec<f64> = total
            .iter()
            .map(|t| config.abs_tol.max(config.rel_tol * t.abs()))
            .collect();
        if (0..N).all(|k| err[k] <= tol[k]) {
            return Ok(total);
        }
        let worst = (0..N).map(|k| err[k] / tol[k]).fold(0.0, f64::max);
        if segments.len() >= config.max_intervals {
            return Err(QuadError::NotConverged {
                intervals: segments.len(),
                error: worst,
            });
        }
        let (idx, _) = segments
            .iter()
            .enumerate()
            .map(|(i, s)| (i, (0..N).map(|k| s.error[k] / tol[k]).fold(0.0, f64::max)))
            .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        let s = segments.swap_remove(idx);
        let mid = 0.5 * (s.a + s.b);
        if !(mid > s.a && mid < s.b) {
            return Err(QuadError::NotConverged {
                intervals: segments.len() + 1,
                error: worst,
            });
        }
        segments.push(gk15(&f, s.a, mid)?);
        segments.push(gk15(&f, mid, s.b)?);
    }
}
