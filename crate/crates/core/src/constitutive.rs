//! Plane-stress elastoplastic material point.
//!
//! Isotropic linear elasticity, a Hill48 yield surface restricted to the
//! biaxial stress subspace, combined linear + Voce isotropic hardening and
//! associative flow. Plastic parts of strain-driven increments are
//! integrated by adaptive substepping closed with a return-map projection;
//! a single backward Euler return map is available as an option.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loadpath::{LoadPath, MeasurementSchedule, StrainHistory};

/// Identifies one of the nine constitutive constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameter {
    YoungsModulus,
    PoissonRatio,
    HillF,
    HillG,
    HillH,
    YieldStress,
    LinearHardening,
    VoceModulus,
    VoceExponent,
}

impl Parameter {
    pub const ALL: [Parameter; 9] = [
        Parameter::YoungsModulus,
        Parameter::PoissonRatio,
        Parameter::HillF,
        Parameter::HillG,
        Parameter::HillH,
        Parameter::YieldStress,
        Parameter::LinearHardening,
        Parameter::VoceModulus,
        Parameter::VoceExponent,
    ];

    /// Key used in configuration files; carries the unit where there is one.
    pub fn key(self) -> &'static str {
        match self {
            Parameter::YoungsModulus => "youngs_modulus_mpa",
            Parameter::PoissonRatio => "poisson_ratio",
            Parameter::HillF => "hill_f",
            Parameter::HillG => "hill_g",
            Parameter::HillH => "hill_h",
            Parameter::YieldStress => "sigma_y_mpa",
            Parameter::LinearHardening => "linear_hardening_mpa",
            Parameter::VoceModulus => "voce_modulus_mpa",
            Parameter::VoceExponent => "voce_exponent",
        }
    }

    pub fn from_key(key: &str) -> Option<Parameter> {
        Parameter::ALL.into_iter().find(|p| p.key() == key)
    }

    /// Short symbol used in report headers.
    pub fn symbol(self) -> &'static str {
        match self {
            Parameter::YoungsModulus => "E",
            Parameter::PoissonRatio => "nu",
            Parameter::HillF => "F",
            Parameter::HillG => "G",
            Parameter::HillH => "H",
            Parameter::YieldStress => "sigma_y",
            Parameter::LinearHardening => "h_bar",
            Parameter::VoceModulus => "A",
            Parameter::VoceExponent => "n",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialParameters {
    /// MPa
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
    pub hill_f: f64,
    pub hill_g: f64,
    pub hill_h: f64,
    /// MPa
    pub yield_stress: f64,
    /// MPa
    pub linear_hardening: f64,
    /// MPa
    pub voce_modulus: f64,
    pub voce_exponent: f64,
}

impl MaterialParameters {
    /// Aluminium-like defaults shared by both exemplars, with an isotropic
    /// yield surface.
    pub fn reference() -> Self {
        MaterialParameters {
            youngs_modulus: 70_000.0,
            poisson_ratio: 0.3,
            hill_f: 0.5,
            hill_g: 0.5,
            hill_h: 0.5,
            yield_stress: 200.0,
            linear_hardening: 200.0,
            voce_modulus: 200.0,
            voce_exponent: 20.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = Parameter::ALL.iter().all(|&p| self.get(p).is_finite());
        if !finite {
            return Err(Error::InvalidParameters("non-finite value"));
        }
        if self.youngs_modulus <= 0.0 {
            return Err(Error::InvalidParameters("E must be positive"));
        }
        if !(self.poisson_ratio > 0.0 && self.poisson_ratio < 0.5) {
            return Err(Error::InvalidParameters("nu must lie in (0, 0.5)"));
        }
        if self.hill_f <= 0.0 || self.hill_g <= 0.0 || self.hill_h <= 0.0 {
            return Err(Error::InvalidParameters("Hill coefficients must be positive"));
        }
        if self.yield_stress <= 0.0 {
            return Err(Error::InvalidParameters("sigma_y must be positive"));
        }
        if self.linear_hardening < 0.0 || self.voce_modulus < 0.0 || self.voce_exponent < 0.0 {
            return Err(Error::InvalidParameters("hardening constants must be non-negative"));
        }
        Ok(())
    }

    pub fn get(&self, p: Parameter) -> f64 {
        match p {
            Parameter::YoungsModulus => self.youngs_modulus,
            Parameter::PoissonRatio => self.poisson_ratio,
            Parameter::HillF => self.hill_f,
            Parameter::HillG => self.hill_g,
            Parameter::HillH => self.hill_h,
            Parameter::YieldStress => self.yield_stress,
            Parameter::LinearHardening => self.linear_hardening,
            Parameter::VoceModulus => self.voce_modulus,
            Parameter::VoceExponent => self.voce_exponent,
        }
    }

    pub fn set(&mut self, p: Parameter, value: f64) {
        let slot = match p {
            Parameter::YoungsModulus => &mut self.youngs_modulus,
            Parameter::PoissonRatio => &mut self.poisson_ratio,
            Parameter::HillF => &mut self.hill_f,
            Parameter::HillG => &mut self.hill_g,
            Parameter::HillH => &mut self.hill_h,
            Parameter::YieldStress => &mut self.yield_stress,
            Parameter::LinearHardening => &mut self.linear_hardening,
            Parameter::VoceModulus => &mut self.voce_modulus,
            Parameter::VoceExponent => &mut self.voce_exponent,
        };
        *slot = value;
    }

    /// Copy of `self` with the listed parameters overwritten by `values`.
    pub fn with_values(&self, which: &[Parameter], values: &[f64]) -> Self {
        let mut out = *self;
        for (&p, &v) in which.iter().zip(values) {
            out.set(p, v);
        }
        out
    }
}

/// Solution variables of the material point plus the imposed in-plane totals.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MaterialState {
    pub sigma11: f64,
    pub sigma22: f64,
    pub eps33: f64,
    pub kappa: f64,
    pub eps11_p: f64,
    pub eps22_p: f64,
    pub eps33_p: f64,
    /// Imposed total strain along x1.
    pub eps11: f64,
    /// Imposed total strain along x2.
    pub eps22: f64,
}

impl MaterialState {
    pub fn virgin() -> Self {
        Self::default()
    }

    pub fn totals(&self) -> StrainTotals {
        StrainTotals {
            eps11: self.eps11,
            eps22: self.eps22,
        }
    }
}

/// Accumulated in-plane total strains at a deformation state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StrainTotals {
    pub eps11: f64,
    pub eps22: f64,
}

/// Plastic corrector applied when the elastic trial leaves the yield surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PlasticCorrector {
    /// One closest-point return map over the whole increment. First order in
    /// the increment size.
    BackwardEuler,
    /// Exact elastic fraction up to the yield crossing, adaptive Runge-Kutta
    /// integration of the elastoplastic rate equations, then a closing
    /// return-map projection onto the yield surface.
    #[default]
    Substepped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReturnMapOptions {
    /// Relative tolerance on the yield function, scaled by the flow stress.
    pub tolerance: f64,
    pub max_iter: usize,
    pub corrector: PlasticCorrector,
    /// Local error tolerance of the substepped corrector, relative to the
    /// flow stress (stresses) or the elastic strain scale (strains).
    pub substep_tolerance: f64,
}

impl Default for ReturnMapOptions {
    fn default() -> Self {
        ReturnMapOptions {
            tolerance: 1e-10,
            max_iter: 50,
            corrector: PlasticCorrector::Substepped,
            substep_tolerance: 1e-11,
        }
    }
}

impl ReturnMapOptions {
    pub fn backward_euler() -> Self {
        ReturnMapOptions {
            corrector: PlasticCorrector::BackwardEuler,
            ..Self::default()
        }
    }
}

/// Hill effective stress on the biaxial subspace.
pub fn effective_stress(sigma11: f64, sigma22: f64, params: &MaterialParameters) -> f64 {
    libm::sqrt(effective_stress_sq(sigma11, sigma22, params))
}

#[inline]
fn effective_stress_sq(s11: f64, s22: f64, p: &MaterialParameters) -> f64 {
    let d = s11 - s22;
    (p.hill_f * s22 * s22 + p.hill_g * s11 * s11) + p.hill_h * d * d
}

/// Flow stress of the combined linear/Voce hardening law.
pub fn flow_stress(kappa: f64, params: &MaterialParameters) -> Result<f64> {
    if kappa.is_nan() || kappa < 0.0 {
        return Err(Error::Domain("hardening variable must be non-negative"));
    }
    Ok(flow_stress_unchecked(kappa, params))
}

#[inline]
fn flow_stress_unchecked(kappa: f64, p: &MaterialParameters) -> f64 {
    p.yield_stress
        + p.linear_hardening * kappa
        + p.voce_modulus * (1.0 - libm::exp(-p.voce_exponent * kappa))
}

#[inline]
fn hardening_modulus(kappa: f64, p: &MaterialParameters) -> f64 {
    p.linear_hardening + p.voce_modulus * p.voce_exponent * libm::exp(-p.voce_exponent * kappa)
}

/// How the directional yield multipliers are reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum YieldMultiplierConvention {
    /// `R11 = 1/(G+H)`, `R22 = 1/(F+H)`; reproduces the tabulated exemplar cases.
    #[default]
    Reciprocal,
    /// `R11 = (G+H)^(-1/2)`, the uniaxial yield-stress ratio implied by the
    /// effective stress.
    ReciprocalSqrt,
}

/// Directional yield multipliers `(R11, R22)`.
pub fn yield_multipliers(
    params: &MaterialParameters,
    convention: YieldMultiplierConvention,
) -> Result<(f64, f64)> {
    let d11 = params.hill_g + params.hill_h;
    let d22 = params.hill_f + params.hill_h;
    if !(d11 > 0.0 && d22 > 0.0) {
        return Err(Error::Domain("G+H and F+H must be positive"));
    }
    Ok(match convention {
        YieldMultiplierConvention::Reciprocal => (1.0 / d11, 1.0 / d22),
        YieldMultiplierConvention::ReciprocalSqrt => {
            (1.0 / libm::sqrt(d11), 1.0 / libm::sqrt(d22))
        }
    })
}

/// One strain-driven increment: elastic predictor, then return map if the
/// trial state leaves the yield surface.
pub fn integrate_step(
    state: &MaterialState,
    d_eps11: f64,
    d_eps22: f64,
    params: &MaterialParameters,
    opts: &ReturnMapOptions,
) -> Result<MaterialState> {
    let e = params.youngs_modulus;
    let nu = params.poisson_ratio;
    let c = e / (1.0 - nu * nu);

    let tr11 = state.sigma11 + c * (d_eps11 + nu * d_eps22);
    let tr22 = state.sigma22 + c * (d_eps22 + nu * d_eps11);

    let mut next = *state;
    next.eps11 = state.eps11 + d_eps11;
    next.eps22 = state.eps22 + d_eps22;

    let flow0 = flow_stress_unchecked(state.kappa, params);
    let g_trial = effective_stress(tr11, tr22, params) - flow0;
    if g_trial <= opts.tolerance * flow0 {
        next.sigma11 = tr11;
        next.sigma22 = tr22;
        next.eps33 = -nu / e * (tr11 + tr22) + state.eps33_p;
        return Ok(next);
    }

    let plastic = match opts.corrector {
        PlasticCorrector::BackwardEuler => project(tr11, tr22, state.kappa, params, opts)?,
        PlasticCorrector::Substepped => substepped(state, (tr11, tr22), flow0, params, opts)?,
    };

    next.sigma11 = plastic.sigma11;
    next.sigma22 = plastic.sigma22;
    next.kappa = plastic.kappa;
    next.eps11_p = state.eps11_p + plastic.d_eps11_p;
    next.eps22_p = state.eps22_p + plastic.d_eps22_p;
    next.eps33_p = -(next.eps11_p + next.eps22_p);
    let (s11, s22) = (plastic.sigma11, plastic.sigma22);
    next.eps33 = -nu / e * (s11 + s22) + next.eps33_p;
    Ok(next)
}

/// Outcome of a plastic corrector: end stresses, hardening variable and the
/// in-plane plastic strain accrued over the increment.
struct PlasticUpdate {
    sigma11: f64,
    sigma22: f64,
    kappa: f64,
    d_eps11_p: f64,
    d_eps22_p: f64,
}

/// Closest-point projection of a trial stress onto the yield surface.
fn project(
    tr11: f64,
    tr22: f64,
    kappa0: f64,
    p: &MaterialParameters,
    opts: &ReturnMapOptions,
) -> Result<PlasticUpdate> {
    let (s11, s22, dk) = return_map(tr11, tr22, kappa0, p, opts)?;
    let phi = effective_stress(s11, s22, p);
    let (n11, n22) = flow_direction(s11, s22, phi, p);
    Ok(PlasticUpdate {
        sigma11: s11,
        sigma22: s22,
        kappa: kappa0 + dk,
        d_eps11_p: dk * n11,
        d_eps22_p: dk * n22,
    })
}

/// `a^T P b` for the Hill matrix `P`.
#[inline]
fn hill_bilinear(a: (f64, f64), b: (f64, f64), p: &MaterialParameters) -> f64 {
    ((p.hill_g + p.hill_h) * a.0 * b.0 + (p.hill_f + p.hill_h) * a.1 * b.1)
        - p.hill_h * (a.0 * b.1 + a.1 * b.0)
}

// Dormand-Prince 5(4) tableau.
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Fifth-order weights minus embedded fourth-order weights.
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const MAX_SUBSTEPS: usize = 100_000;

/// State of the plastic rate equations: stresses, hardening variable and
/// accrued in-plane plastic strain.
type RateState = [f64; 5];

/// Rates with respect to the fraction of the remaining strain increment.
/// `dse` is the elastic stress increment of that remainder.
fn plastic_rates(y: &RateState, dse: (f64, f64), p: &MaterialParameters) -> RateState {
    let e = p.youngs_modulus;
    let nu = p.poisson_ratio;
    let c = e / (1.0 - nu * nu);
    let phi = effective_stress(y[0], y[1], p);
    let (n11, n22) = flow_direction(y[0], y[1], phi, p);
    let cn11 = c * (n11 + nu * n22);
    let cn22 = c * (n22 + nu * n11);
    let kappa = y[2].max(0.0);
    let num = n11 * dse.0 + n22 * dse.1;
    let den = (n11 * cn11 + n22 * cn22) + hardening_modulus(kappa, p);
    let rate = (num / den).max(0.0);
    [
        dse.0 - rate * cn11,
        dse.1 - rate * cn22,
        rate,
        rate * n11,
        rate * n22,
    ]
}

fn substepped(
    state: &MaterialState,
    trial: (f64, f64),
    flow0: f64,
    p: &MaterialParameters,
    opts: &ReturnMapOptions,
) -> Result<PlasticUpdate> {
    let s0 = (state.sigma11, state.sigma22);
    let ds = (trial.0 - s0.0, trial.1 - s0.1);

    // Fraction of the increment spent inside the elastic domain: the larger
    // root of phi^2(s0 + a ds) = flow0^2, written without cancellation.
    let qa = effective_stress_sq(ds.0, ds.1, p);
    let qb = hill_bilinear(s0, ds, p);
    let qc = effective_stress_sq(s0.0, s0.1, p) - flow0 * flow0;
    let disc = (qb * qb - qa * qc).max(0.0);
    let root = libm::sqrt(disc);
    let alpha = if qb > 0.0 {
        -qc / (qb + root)
    } else {
        (root - qb) / qa
    };
    let alpha = if alpha.is_finite() { alpha.clamp(0.0, 1.0) } else { 0.0 };

    let rest = 1.0 - alpha;
    let dse = (rest * ds.0, rest * ds.1);
    let mut y: RateState = [
        s0.0 + alpha * ds.0,
        s0.1 + alpha * ds.1,
        state.kappa,
        0.0,
        0.0,
    ];

    let stress_scale = flow0;
    let strain_scale = flow0 / p.youngs_modulus;
    let tol = opts.substep_tolerance;
    let mut t = 0.0_f64;
    let mut h = 1.0_f64;
    let mut k = [[0.0_f64; 5]; 7];
    k[0] = plastic_rates(&y, dse, p);
    let mut steps = 0;
    while t < 1.0 {
        steps += 1;
        if steps > MAX_SUBSTEPS {
            return Err(Error::ReturnMap {
                iterations: steps,
                residual: h,
            });
        }
        h = h.min(1.0 - t);
        let mut stage = [0.0_f64; 5];
        for i in 1..7 {
            for (c, slot) in stage.iter_mut().enumerate() {
                let mut acc = 0.0;
                for j in 0..i {
                    acc += DP_A[i][j] * k[j][c];
                }
                *slot = y[c] + h * acc;
            }
            k[i] = plastic_rates(&stage, dse, p);
        }
        // Stage 6 was evaluated at the fifth-order solution.
        let y_new = stage;
        let mut err = 0.0_f64;
        for c in 0..5 {
            let mut acc = 0.0;
            for j in 0..7 {
                acc += DP_E[j] * k[j][c];
            }
            let scale = if c < 2 { stress_scale } else { strain_scale };
            err = err.max(libm::fabs(h * acc) / scale);
        }
        if err <= tol {
            t += h;
            y = y_new;
            k[0] = k[6];
        }
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * libm::pow(tol / err, 0.2)).clamp(0.2, 5.0)
        };
        h *= factor;
    }

    y[2] = y[2].max(state.kappa);

    // Close the small drift left by the integration.
    let flow = flow_stress_unchecked(y[2], p);
    if effective_stress(y[0], y[1], p) - flow > opts.tolerance * flow {
        let fix = project(y[0], y[1], y[2], p, opts)?;
        return Ok(PlasticUpdate {
            d_eps11_p: y[3] + fix.d_eps11_p,
            d_eps22_p: y[4] + fix.d_eps22_p,
            ..fix
        });
    }
    Ok(PlasticUpdate {
        sigma11: y[0],
        sigma22: y[1],
        kappa: y[2],
        d_eps11_p: y[3],
        d_eps22_p: y[4],
    })
}

#[inline]
fn flow_direction(s11: f64, s22: f64, phi: f64, p: &MaterialParameters) -> (f64, f64) {
    let ps11 = (p.hill_g + p.hill_h) * s11 - p.hill_h * s22;
    let ps22 = (p.hill_f + p.hill_h) * s22 - p.hill_h * s11;
    (ps11 / phi, ps22 / phi)
}

/// Residual of the return map, in stress units: `E * (C^-1 (s - s_tr) + dk n)`
/// for the two flow equations and `phi - flow` for consistency.
struct Residual {
    r1: f64,
    r2: f64,
    rg: f64,
    phi: f64,
    n11: f64,
    n22: f64,
}

fn residual(
    s11: f64,
    s22: f64,
    dk: f64,
    tr: (f64, f64),
    kappa0: f64,
    p: &MaterialParameters,
) -> Residual {
    let nu = p.poisson_ratio;
    let phi = effective_stress(s11, s22, p);
    let (n11, n22) = flow_direction(s11, s22, phi, p);
    let d11 = s11 - tr.0;
    let d22 = s22 - tr.1;
    let e = p.youngs_modulus;
    Residual {
        r1: (d11 - nu * d22) + e * dk * n11,
        r2: (d22 - nu * d11) + e * dk * n22,
        rg: phi - flow_stress_unchecked(kappa0 + dk, p),
        phi,
        n11,
        n22,
    }
}

impl Residual {
    fn merit(&self) -> f64 {
        (self.r1 * self.r1 + self.r2 * self.r2) + self.rg * self.rg
    }
}

/// Newton iteration on `(sigma11, sigma22, dkappa)` with step halving.
///
/// The 3x3 system is reduced through the Schur complement of the symmetric
/// 2x2 stress block, with every two-term sum written symmetrically, so that
/// swapping the axes of an isotropic material swaps the result bit-for-bit.
fn return_map(
    tr11: f64,
    tr22: f64,
    kappa0: f64,
    p: &MaterialParameters,
    opts: &ReturnMapOptions,
) -> Result<(f64, f64, f64)> {
    let e = p.youngs_modulus;
    let nu = p.poisson_ratio;
    let tr = (tr11, tr22);
    let (mut s11, mut s22, mut dk) = (tr11, tr22, 0.0_f64);
    let mut res = residual(s11, s22, dk, tr, kappa0, p);

    for _ in 0..opts.max_iter {
        let flow = flow_stress_unchecked(kappa0 + dk, p);
        let tol = opts.tolerance * flow;
        if libm::fabs(res.rg) <= tol && libm::sqrt(res.r1 * res.r1 + res.r2 * res.r2) <= tol {
            return Ok((s11, s22, dk));
        }

        // Stress block (scaled by E): C^-1 E + E dk (P - n n^T) / phi.
        let w = e * dk / res.phi;
        let a11 = 1.0 + w * ((p.hill_g + p.hill_h) - res.n11 * res.n11);
        let a22 = 1.0 + w * ((p.hill_f + p.hill_h) - res.n22 * res.n22);
        let a12 = -nu + w * (-p.hill_h - res.n11 * res.n22);
        let det = a11 * a22 - a12 * a12;
        if !(det.is_finite() && det != 0.0) {
            break;
        }
        let solve = |b1: f64, b2: f64| ((a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det);

        // Columns: d(r)/d(dk) = (E n, -h); d(rg)/d(s) = n.
        let h = hardening_modulus(kappa0 + dk, p);
        let (an1, an2) = solve(e * res.n11, e * res.n22);
        let (ar1, ar2) = solve(res.r1, res.r2);
        let schur = (res.n11 * an1 + res.n22 * an2) + h;
        let ddk = (res.rg - (res.n11 * ar1 + res.n22 * ar2)) / schur;
        let ds11 = -ar1 - an1 * ddk;
        let ds22 = -ar2 - an2 * ddk;

        let m0 = res.merit();
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let c11 = s11 + step * ds11;
            let c22 = s22 + step * ds22;
            let cdk = (dk + step * ddk).max(0.0);
            let cand = residual(c11, c22, cdk, tr, kappa0, p);
            if cand.merit() < m0 || step == 1.0 && cand.merit() <= m0 {
                s11 = c11;
                s22 = c22;
                dk = cdk;
                res = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    let flow = flow_stress_unchecked(kappa0 + dk, p);
    let tol = opts.tolerance * flow;
    if libm::fabs(res.rg) <= tol && libm::sqrt(res.r1 * res.r1 + res.r2 * res.r2) <= tol {
        return Ok((s11, s22, dk));
    }
    Err(Error::ReturnMap {
        iterations: opts.max_iter,
        residual: libm::sqrt(res.merit()),
    })
}

/// In-plane stresses at a measurement point.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StressPoint {
    pub sigma11: f64,
    pub sigma22: f64,
}

impl From<&MaterialState> for StressPoint {
    fn from(s: &MaterialState) -> Self {
        StressPoint {
            sigma11: s.sigma11,
            sigma22: s.sigma22,
        }
    }
}

/// Integrates a strain history from `start`, recording the state after each
/// 1-based increment listed in `record_at`. Returns the final state.
pub fn simulate_history(
    params: &MaterialParameters,
    start: &MaterialState,
    history: &StrainHistory,
    record_at: &[usize],
    opts: &ReturnMapOptions,
    out: &mut Vec<StressPoint>,
) -> Result<MaterialState> {
    let mut state = *start;
    let mut prev = start.totals();
    let mut next_record = record_at.iter().peekable();
    for (i, (&e11, &e22)) in history.eps11.iter().zip(&history.eps22).enumerate() {
        state = integrate_step(&state, e11 - prev.eps11, e22 - prev.eps22, params, opts)
            .map_err(|e| e.at_increment(i + 1))?;
        // Totals are imposed, not accumulated.
        state.eps11 = e11;
        state.eps22 = e22;
        prev = state.totals();
        while next_record.peek().is_some_and(|&&k| k == i + 1) {
            out.push(StressPoint::from(&state));
            next_record.next();
        }
    }
    Ok(state)
}

/// Runs a whole load path from the virgin state, returning stresses at every
/// scheduled point of every step, ordered by (step, point).
pub fn simulate_path(
    params: &MaterialParameters,
    path: &LoadPath,
    schedule: &MeasurementSchedule,
    opts: &ReturnMapOptions,
) -> Result<Vec<StressPoint>> {
    params.validate()?;
    let indices = schedule.indices();
    let mut out = Vec::with_capacity(path.len() * indices.len());
    let mut state = MaterialState::virgin();
    for step in path.steps() {
        let history = crate::loadpath::strain_history(
            state.totals(),
            &step,
            schedule.increments_per_step,
        );
        state = simulate_history(params, &state, &history, &indices, opts, &mut out)?;
    }
    Ok(out)
}

/// Full pseudotime response along a path: one point per increment.
pub fn simulate_path_dense(
    params: &MaterialParameters,
    path: &LoadPath,
    increments_per_step: usize,
    opts: &ReturnMapOptions,
) -> Result<Vec<StressPoint>> {
    params.validate()?;
    let all: Vec<usize> = (1..=increments_per_step).collect();
    let mut out = Vec::with_capacity(path.len() * increments_per_step);
    let mut state = MaterialState::virgin();
    for step in path.steps() {
        let history = crate::loadpath::strain_history(state.totals(), &step, increments_per_step);
        state = simulate_history(params, &state, &history, &all, opts, &mut out)?;
    }
    Ok(out)
}
