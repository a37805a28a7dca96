//! Univariate and bivariate normal distribution functions.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
#[inline]
pub fn pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Normal density with the given mean and standard deviation.
#[inline]
pub fn density(x: f64, mean: f64, sd: f64) -> f64 {
    pdf((x - mean) / sd) / sd
}

/// Standard normal cumulative distribution function.
#[inline]
pub fn cdf(x: f64) -> f64 {
    // Beyond these points the result rounds to 1 or underflows to 0.
    if x > 8.3 {
        return 1.0;
    }
    if x < -38.5 {
        return 0.0;
    }
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

// Gauss-Legendre half rules (negative abscissae) used by the bivariate routine.
const GL_W: [&[f64]; 3] = [
    &[0.1713244923791705, 0.3607615730481384, 0.4679139345726904],
    &[
        0.04717533638651177,
        0.1069393259953183,
        0.1600783285433464,
        0.2031674267230659,
        0.2334925365383547,
        0.2491470458134029,
    ],
    &[
        0.01761400713915212,
        0.04060142980038694,
        0.06267204833410906,
        0.08327674157670475,
        0.1019301198172404,
        0.1181945319615184,
        0.1316886384491766,
        0.1420961093183821,
        0.1491729864726037,
        0.1527533871307259,
    ],
];
const GL_X: [&[f64]; 3] = [
    &[-0.9324695142031522, -0.6612093864662647, -0.2386191860831970],
    &[
        -0.9815606342467191,
        -0.9041172563704750,
        -0.7699026741943050,
        -0.5873179542866171,
        -0.3678314989981802,
        -0.1252334085114692,
    ],
    &[
        -0.9931285991850949,
        -0.9639719272779138,
        -0.9122344282513259,
        -0.8391169718222188,
        -0.7463319064601508,
        -0.6360536807265150,
        -0.5108670019508271,
        -0.3737060887154196,
        -0.2277858511416451,
        -0.07652652113349733,
    ],
];

/// Upper orthant probability `P(X > h, Y > k)` for standard bivariate normal
/// `(X, Y)` with correlation `r`.
///
/// Genz's BVND: Drezner-Wesolowsky integration of the Plackett identity with
/// a Taylor-corrected expansion for |r| >= 0.925. Absolute error is around
/// 1e-15.
pub fn upper_orthant(h: f64, k: f64, r: f64) -> f64 {
    let twopi = 2.0 * PI;
    let ng = if r.abs() < 0.3 {
        0
    } else if r.abs() < 0.75 {
        1
    } else {
        2
    };
    let (w, x) = (GL_W[ng], GL_X[ng]);
    let mut k = k;
    let mut hk = h * k;
    let mut bvn = 0.0;

    if r.abs() < 0.925 {
        let hs = (h * h + k * k) / 2.0;
        let asr = r.asin();
        for (wi, xi) in w.iter().zip(x) {
            let sn = (asr * (xi + 1.0) / 2.0).sin();
            bvn += wi * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            let sn = (asr * (-xi + 1.0) / 2.0).sin();
            bvn += wi * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
        }
        return bvn * asr / (2.0 * twopi) + cdf(-h) * cdf(-k);
    }

    if r < 0.0 {
        k = -k;
        hk = -hk;
    }
    if r.abs() < 1.0 {
        let a_s = (1.0 - r) * (1.0 + r);
        let mut a = a_s.sqrt();
        let bs = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        bvn = a
            * (-(bs / a_s + hk) / 2.0).exp()
            * (1.0 - c * (bs - a_s) * (1.0 - d * bs / 5.0) / 3.0 + c * d * a_s * a_s / 5.0);
        if hk > -160.0 {
            let b = bs.sqrt();
            bvn -= (-hk / 2.0).exp() * twopi.sqrt() * cdf(-b / a) * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
        }
        a /= 2.0;
        for (wi, xi) in w.iter().zip(x) {
            for xs in [(a * (xi + 1.0)).powi(2), a_s * (1.0 - xi).powi(2) / 4.0] {
                let rs = (1.0 - xs).sqrt();
                let asr = -(bs / xs + hk) / 2.0;
                if asr > -100.0 {
                    bvn += a
                        * wi
                        * asr.exp()
                        * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs - (1.0 + c * xs * (1.0 + d * xs)));
                }
            }
        }
        bvn = -bvn / twopi;
    }
    if r > 0.0 {
        bvn += cdf(-h.max(k));
    } else {
        bvn = -bvn + (cdf(-h) - cdf(-k)).max(0.0);
    }
    bvn.clamp(0.0, 1.0)
}

/// `P(X > 0, Y > 0) + P(X < 0, Y < 0)` for a bivariate normal with means
/// `(mx, my)`, standard deviations `(sx, sy)` and correlation `r`:
/// the probability that both variables share a sign.
pub fn same_sign(mx: f64, my: f64, sx: f64, sy: f64, r: f64) -> f64 {
    let h = -mx / sx;
    let k = -my / sy;
    // P(X>0,Y>0) = P(Zx > h, Zy > k); P(X<0,Y<0) = P(-Zx > -h, -Zy > -k).
    upper_orthant(h, k, r) + upper_orthant(-h, -k, r)
}
