//! Scalar numeric kernels shared across the crate: double-precision error
//! function, standard-normal CDF/PDF, a deterministic PRNG, and the FNV
//! hash used for config digests.
//!
//! erf/erfc go through the regularized incomplete gamma function
//! (series for small arguments, Lentz continued fraction for large ones),
//! which is accurate to ~1e-14 relative — the likelihood oracles in the
//! test suite depend on that headroom.

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;
pub const INV_SQRT_2PI: f64 = 0.3989422804014327;

const LN_SQRT_PI: f64 = 0.5723649429247001; // ln Gamma(1/2)
const GAMMA_EPS: f64 = 1e-16;
const GAMMA_ITMAX: usize = 400;

/// Regularized lower incomplete gamma P(a, x) by series expansion.
/// Valid for x < a + 1.
fn gamma_p_series(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let mut ap = a;
    let mut sum = 1.0 / a;
    let mut del = sum;
    for _ in 0..GAMMA_ITMAX {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * GAMMA_EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - LN_SQRT_PI).exp()
}

/// Regularized upper incomplete gamma Q(a, x) by modified Lentz continued
/// fraction. Valid for x >= a + 1.
fn gamma_q_cf(a: f64, x: f64) -> f64 {
    const FPMIN: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / FPMIN;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..=GAMMA_ITMAX {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = b + an / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < GAMMA_EPS {
            break;
        }
    }
    (-x + a * x.ln() - LN_SQRT_PI).exp() * h
}

/// Error function, |err| ~ 1e-14.
pub fn erf(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let ax2 = x * x;
    let mag = if ax2 < 1.5 {
        gamma_p_series(0.5, ax2)
    } else {
        1.0 - gamma_q_cf(0.5, ax2)
    };
    if x > 0.0 {
        mag
    } else {
        -mag
    }
}

/// Complementary error function; accurate in the far tail (no cancellation
/// for x >> 1, underflows gracefully to 0).
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    let x2 = x * x;
    if x2 < 1.5 {
        1.0 - gamma_p_series(0.5, x2)
    } else {
        gamma_q_cf(0.5, x2)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * erfc(-t / SQRT_2)
}

/// Standard normal PDF.
pub fn normal_pdf(t: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * t * t).exp()
}

/// Probability that a N(0, sigma^2) variable, rounded to the nearest
/// integer, equals `delta` — i.e. the integral of the density over
/// (delta - 1/2, delta + 1/2]. No flooring; callers clamp as needed.
///
/// Computed on |delta| with both erfc arguments non-negative once
/// |delta| >= 1/2, so there is no catastrophic cancellation in the tails.
pub fn gaussian_bin_mass(delta: f64, sigma: f64) -> f64 {
    let d = delta.abs();
    let u0 = (d - 0.5) / (sigma * SQRT_2);
    let u1 = (d + 0.5) / (sigma * SQRT_2);
    (0.5 * (erfc(u0) - erfc(u1))).max(0.0)
}

/// FNV-1a 64-bit hash; used for checkpoint config digests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// xoshiro256++ — deterministic across platforms, serializable state.
/// The only randomness source in the crate (init, noise, patch sampling).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s }
    }

    pub fn from_state(s: [u64; 4]) -> Self {
        Rng { s }
    }

    pub fn state(&self) -> [u64; 4] {
        self.s
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). n must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below requires n > 0");
        (self.next_u64() % n as u64) as usize
    }
}
