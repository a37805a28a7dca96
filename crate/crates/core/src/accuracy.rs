//! Collective accuracy `C = P(Ŷ = Y)` and attention diversity.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Attention, FactorModel};
use crate::normal;
use crate::quadrature::{integrate, QuadratureConfig};
use crate::rewards::DEFAULT_APPROX_THRESHOLD;

/// Share of attention mass the heavy set of the sparse evaluator must hold.
pub const SPARSE_MASS: f64 = 0.99;

/// The sparse evaluator enumerates at most this many heavy factors minus one.
pub const SPARSE_MAX_HEAVY: usize = 10;

/// Second moments of `(ψ, z − 1/2)` where `z = (1 + V)/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyMoments {
    pub s_psi_psi: f64,
    pub s_vv: f64,
    pub s_psi_v: f64,
}

impl AccuracyMoments {
    pub fn new(model: &FactorModel, attention: &Attention) -> Result<Self> {
        check_dims(model, attention)?;
        let (mut bb, mut rr, mut br) = (0.0, 0.0, 0.0);
        for (&b, &r) in model.beta().iter().zip(attention.as_slice()) {
            bb += b * b;
            rr += r * r;
            br += b * r;
        }
        Ok(Self {
            s_psi_psi: bb,
            s_vv: 0.25 * rr,
            s_psi_v: 0.5 * br,
        })
    }

    /// Correlation of `ψ` and `V`.
    pub fn correlation(&self) -> f64 {
        self.s_psi_v / (self.s_psi_psi * self.s_vv).sqrt()
    }
}

fn check_dims(model: &FactorModel, attention: &Attention) -> Result<()> {
    if model.n() != attention.n() {
        return Err(Error::DimensionMismatch {
            expected: model.n(),
            actual: attention.n(),
        });
    }
    Ok(())
}

const ENUM_CHUNK: u64 = 1 << 12;

/// `2^{-n} Σ_worlds [Ŷ = Y]` by enumeration.
pub fn collective_accuracy_exact(model: &FactorModel, attention: &Attention, limit: usize) -> Result<f64> {
    check_dims(model, attention)?;
    let n = model.n();
    if n > limit {
        return Err(Error::SizeLimit { n, limit });
    }
    Ok(enumerated_accuracy(model.beta(), attention.as_slice()))
}

fn enumerated_accuracy(beta: &[f64], rho: &[f64]) -> f64 {
    let n = beta.len();
    let total: u64 = 1 << n;
    let starts: Vec<u64> = (0..total).step_by(ENUM_CHUNK as usize).collect();
    let hits: u64 = starts
        .into_par_iter()
        .map(|start| {
            let mut hits = 0u64;
            for mask in start..(start + ENUM_CHUNK).min(total) {
                let (mut psi, mut v) = (0.0, 0.0);
                for i in 0..n {
                    if mask >> i & 1 == 0 {
                        psi += beta[i];
                        v += rho[i];
                    } else {
                        psi -= beta[i];
                        v -= rho[i];
                    }
                }
                hits += u64::from((psi >= 0.0) == (v >= 0.0));
            }
            hits
        })
        .sum();
    hits as f64 / total as f64
}

/// Orthant closed form `C = 1/2 + arcsin(r)/π`, evaluated as `1 − θ/π`
/// with `θ` the angle between `β` and `ρ`. The sine of the angle comes from
/// the residual of projecting `ρ` on `β`, which stays accurate as `ρ → β`.
pub fn collective_accuracy_approx(model: &FactorModel, attention: &Attention) -> Result<f64> {
    check_dims(model, attention)?;
    let (beta, rho) = (model.beta(), attention.as_slice());
    let (mut bb, mut br, mut rr) = (0.0, 0.0, 0.0);
    for (&b, &r) in beta.iter().zip(rho) {
        bb += b * b;
        br += b * r;
        rr += r * r;
    }
    if rr <= 0.0 {
        return Err(Error::DegenerateAttention { index: 0 });
    }
    let lambda = br / bb;
    let (mut dd, mut db) = (0.0, 0.0);
    for (&b, &r) in beta.iter().zip(rho) {
        let d = r - lambda * b;
        dd += d * d;
        db += d * b;
    }
    let resid = (dd - db * db / bb).max(0.0);
    let theta = (bb * resid).sqrt().atan2(br);
    Ok(1.0 - theta / PI)
}

/// Cross-check of the closed form: `C = 2 ∫_0^∞ P(V > 0 | ψ) N(ψ; 0, S_ψψ) dψ`
/// by quadrature.
pub fn collective_accuracy_integral(
    model: &FactorModel,
    attention: &Attention,
    quad: &QuadratureConfig,
) -> Result<f64> {
    let m = AccuracyMoments::new(model, attention)?;
    if m.s_vv <= 0.0 {
        return Err(Error::DegenerateAttention { index: 0 });
    }
    let sd_psi = m.s_psi_psi.sqrt();
    let gain = m.s_psi_v / m.s_psi_psi;
    let cond_var = m.s_vv - m.s_psi_v * m.s_psi_v / m.s_psi_psi;
    if cond_var <= 0.0 {
        return Ok(1.0);
    }
    let cond_sd = cond_var.sqrt();
    let f = |psi: f64| normal::cdf(psi * gain / cond_sd) * normal::density(psi, 0.0, sd_psi);
    let hi = 12.0 * sd_psi;
    let pts = [0.0, sd_psi, 3.0 * sd_psi, hi];
    Ok(2.0 * integrate(f, &pts, quad).value)
}

/// Heavy set of the sparse evaluator: the fewest top-`ρ` factors holding at
/// least `SPARSE_MASS` of the attention.
pub fn heavy_factors(attention: &Attention) -> Vec<usize> {
    let rho = attention.as_slice();
    let mut order: Vec<usize> = (0..rho.len()).collect();
    order.sort_by(|&a, &b| rho[b].total_cmp(&rho[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut heavy = Vec::new();
    for i in order {
        if mass >= SPARSE_MASS {
            break;
        }
        mass += rho[i];
        heavy.push(i);
    }
    heavy
}

/// Hybrid evaluator for attention concentrated on a few factors: exact
/// enumeration over the heavy set, Gaussian treatment of the rest.
pub fn collective_accuracy_sparse(model: &FactorModel, attention: &Attention) -> Result<f64> {
    check_dims(model, attention)?;
    let heavy = heavy_factors(attention);
    if heavy.len() >= SPARSE_MAX_HEAVY {
        return Err(Error::SparseFallbackRefused { heavy: heavy.len() });
    }
    let (beta, rho) = (model.beta(), attention.as_slice());
    let mut is_heavy = vec![false; model.n()];
    heavy.iter().for_each(|&i| is_heavy[i] = true);
    let (mut vv, mut pp, mut vp) = (0.0, 0.0, 0.0);
    for i in (0..model.n()).filter(|&i| !is_heavy[i]) {
        vv += rho[i] * rho[i];
        pp += beta[i] * beta[i];
        vp += rho[i] * beta[i];
    }
    let (sv, sp) = (vv.sqrt(), pp.sqrt());
    let h = heavy.len();
    let mut total = 0.0;
    for mask in 0u64..1 << h {
        let (mut v, mut psi) = (0.0, 0.0);
        for (bit, &i) in heavy.iter().enumerate() {
            let s = if mask >> bit & 1 == 0 { 1.0 } else { -1.0 };
            v += s * rho[i];
            psi += s * beta[i];
        }
        total += same_sign_with_ties(v, psi, sv, sp, vp);
    }
    Ok(total / (1u64 << h) as f64)
}

/// `P(sign(V) = sign(ψ))` for `V ~ N(mv, sv²)`, `ψ ~ N(mp, sp²)` with
/// covariance `cov`, where zero counts as positive.
fn same_sign_with_ties(mv: f64, mp: f64, sv: f64, sp: f64, cov: f64) -> f64 {
    let pos = |m: f64| if m >= 0.0 { 1.0 } else { 0.0 };
    match (sv > 0.0, sp > 0.0) {
        (false, false) => f64::from(u8::from(pos(mv) == pos(mp))),
        (false, true) => {
            let p = normal::cdf(mp / sp);
            if mv >= 0.0 {
                p
            } else {
                1.0 - p
            }
        }
        (true, false) => {
            let p = normal::cdf(mv / sv);
            if mp >= 0.0 {
                p
            } else {
                1.0 - p
            }
        }
        (true, true) => {
            let r = (cov / (sv * sp)).clamp(-1.0, 1.0);
            normal::same_sign(mv, mp, sv, sp, r)
        }
    }
}

/// Accuracy along the cheapest valid path: enumeration for small `n`, the
/// sparse hybrid when attention is concentrated, the orthant closed form
/// otherwise.
pub fn collective_accuracy(model: &FactorModel, attention: &Attention) -> Result<f64> {
    check_dims(model, attention)?;
    if model.n() < DEFAULT_APPROX_THRESHOLD {
        return collective_accuracy_exact(model, attention, DEFAULT_APPROX_THRESHOLD);
    }
    match collective_accuracy_sparse(model, attention) {
        Err(Error::SparseFallbackRefused { .. }) => collective_accuracy_approx(model, attention),
        other => other,
    }
}

/// Normalized Shannon entropy `−Σ ρ_i ln ρ_i / ln n`; 1 when `n = 1`.
pub fn diversity(attention: &Attention) -> f64 {
    let n = attention.n();
    if n <= 1 {
        return 1.0;
    }
    let h: f64 = attention
        .as_slice()
        .iter()
        .filter(|r| **r > 0.0)
        .map(|r| -r * r.ln())
        .sum();
    (h / (n as f64).ln()).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DEFAULT_EXACT_LIMIT;
    use proptest::prelude::*;

    fn fixture() -> FactorModel {
        FactorModel::new(vec![0.6, 0.25, 0.15]).unwrap()
    }

    #[test]
    fn fixture_accuracy() {
        let m = fixture();
        assert_eq!(collective_accuracy_exact(&m, &Attention::uniform(3), 20).unwrap(), 0.75);
        assert_eq!(
            collective_accuracy_exact(&m, &Attention::vertex(3, 0), 20).unwrap(),
            1.0
        );
        assert_eq!(
            collective_accuracy_exact(&m, &Attention::matching(&m), 20).unwrap(),
            1.0
        );
    }

    #[test]
    fn approx_at_optimum_is_one() {
        let m = FactorModel::sample(1000, 1).unwrap();
        let ideal = Attention::matching(&m);
        let mom = AccuracyMoments::new(&m, &ideal).unwrap();
        assert!((mom.correlation() - 1.0).abs() < 1e-12);
        assert!(collective_accuracy_approx(&m, &ideal).unwrap() >= 1.0 - 1e-9);
    }

    #[test]
    fn uniform_attention_approaches_five_sixths() {
        let m = FactorModel::sample(10_000, 3).unwrap();
        let c = collective_accuracy_approx(&m, &Attention::uniform(10_000)).unwrap();
        assert!((c - 5.0 / 6.0).abs() < 0.01, "{c}");
    }

    #[test]
    fn approx_tracks_exact_at_sixteen() {
        let m = FactorModel::sample(16, 5).unwrap();
        let w: Vec<f64> = (0..16).map(|i| 1.0 + (i % 4) as f64).collect();
        let rho = Attention::normalized(&w).unwrap();
        let exact = collective_accuracy_exact(&m, &rho, DEFAULT_EXACT_LIMIT).unwrap();
        let approx = collective_accuracy_approx(&m, &rho).unwrap();
        assert!((exact - approx).abs() < 0.03, "{exact} vs {approx}");
    }

    #[test]
    fn closed_form_matches_integral() {
        let quad = QuadratureConfig::default();
        for seed in 0..20 {
            let m = FactorModel::sample(1000, seed).unwrap();
            let mut rng = crate::rng::stream_rng(seed, crate::rng::streams::ATTENTION);
            let w: Vec<f64> = (0..1000).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
            let rho = Attention::normalized(&w).unwrap();
            let closed = collective_accuracy_approx(&m, &rho).unwrap();
            let integral = collective_accuracy_integral(&m, &rho, &quad).unwrap();
            assert!((closed - integral).abs() < 1e-6, "seed {seed}: {closed} vs {integral}");
        }
    }

    #[test]
    fn sparse_vertex_reduces_to_binary_formula() {
        let m = FactorModel::sample(500, 2).unwrap();
        let c = collective_accuracy_sparse(&m, &Attention::vertex(500, 0)).unwrap();
        let rest: f64 = m.beta()[1..].iter().map(|b| b * b).sum();
        assert!((c - normal::cdf(m.beta()[0] / rest.sqrt())).abs() < 1e-14);
    }

    #[test]
    fn sparse_matches_exact_at_twelve() {
        let m = FactorModel::sample(12, 4).unwrap();
        let vertex = Attention::vertex(12, 0);
        let sparse = collective_accuracy_sparse(&m, &vertex).unwrap();
        let exact = collective_accuracy_exact(&m, &vertex, DEFAULT_EXACT_LIMIT).unwrap();
        assert!((sparse - exact).abs() < 0.02, "{sparse} vs {exact}");

        let mut w = vec![0.0005; 12];
        w[0] = 0.6;
        w[1] = 0.3;
        w[2] = 0.095;
        let rho = Attention::normalized(&w).unwrap();
        let sparse = collective_accuracy_sparse(&m, &rho).unwrap();
        let exact = collective_accuracy_exact(&m, &rho, DEFAULT_EXACT_LIMIT).unwrap();
        assert!((sparse - exact).abs() < 0.02, "{sparse} vs {exact}");
    }

    #[test]
    fn sparse_refuses_spread_attention() {
        let m = FactorModel::sample(100, 2).unwrap();
        assert!(matches!(
            collective_accuracy_sparse(&m, &Attention::uniform(100)),
            Err(Error::SparseFallbackRefused { .. })
        ));
    }

    #[test]
    fn diversity_examples() {
        assert!((diversity(&Attention::uniform(100)) - 1.0).abs() < 1e-12);
        assert_eq!(diversity(&Attention::vertex(5, 2)), 0.0);
        let half = Attention::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!((diversity(&half) - 0.5).abs() < 1e-15);
        assert_eq!(diversity(&Attention::uniform(1)), 1.0);
    }

    #[test]
    fn accuracy_rises_toward_optimum() {
        for seed in 0..10 {
            let m = FactorModel::sample(200, seed).unwrap();
            let start = Attention::initial(200, crate::model::InitKind::Concentrated).unwrap();
            let mut last = 0.0;
            for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let w: Vec<f64> = start
                    .as_slice()
                    .iter()
                    .zip(m.beta())
                    .map(|(r, b)| (1.0 - lambda) * r + lambda * b)
                    .collect();
                let c = collective_accuracy_approx(&m, &Attention::normalized(&w).unwrap()).unwrap();
                assert!(c >= last, "seed {seed}, λ {lambda}");
                last = c;
            }
        }
    }

    proptest! {
        #[test]
        fn exact_accuracy_is_permutation_invariant(
            b in prop::collection::vec(0.01f64..1.0, 1..=9),
            r in prop::collection::vec(0.0f64..1.0, 9),
            rot in 0usize..9,
        ) {
            let n = b.len();
            let Ok(rho) = Attention::normalized(&r[..n]) else { return Ok(()) };
            let m = FactorModel::from_weights(&b).unwrap();
            let base = collective_accuracy_exact(&m, &rho, 20).unwrap();
            let mut beta = m.beta().to_vec();
            let mut r2 = rho.as_slice().to_vec();
            beta.rotate_left(rot % n);
            r2.rotate_left(rot % n);
            beta.swap(0, n - 1);
            r2.swap(0, n - 1);
            prop_assert_eq!(base, enumerated_accuracy(&beta, &r2));
        }

        #[test]
        fn diversity_is_bounded(r in prop::collection::vec(0.0f64..1.0, 1..50)) {
            let Ok(rho) = Attention::normalized(&r) else { return Ok(()) };
            let d = diversity(&rho);
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn accuracy_is_a_probability(
            b in prop::collection::vec(0.01f64..1.0, 1..=12),
            r in prop::collection::vec(0.0f64..1.0, 12),
        ) {
            let n = b.len();
            let Ok(rho) = Attention::normalized(&r[..n]) else { return Ok(()) };
            let m = FactorModel::from_weights(&b).unwrap();
            let c = collective_accuracy_exact(&m, &rho, 20).unwrap();
            prop_assert!((0.0..=1.0).contains(&c));
            prop_assert_eq!(collective_accuracy_exact(&m, &Attention::matching(&m), 20).unwrap(), 1.0);
        }
    }
}
