//! LSA problem instances with exactly known ground truth.
//!
//! Synthetic instances draw observations from a finite mixture over an
//! explicit atom set, so every population quantity (mean matrices, noise
//! covariance, boundedness constants) is computed exactly from the atoms and
//! their probabilities rather than estimated. The scalar Gaussian instance is
//! the one deliberate exception: it keeps unbounded noise and is flagged as
//! such instead of being rejected.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::linalg;
use crate::rngutil;
use crate::{LsaError, Result};

/// Salt for deriving the construction RNG from the instance seed.
const CONSTRUCT_SALT: u64 = 0xA700;

/// One support point of a finite observation mixture.
#[derive(Debug, Clone)]
pub struct Atom {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Noise at the solution for this atom: `(A - Abar) theta* - (b - bbar)`.
    pub noise: DVector<f64>,
}

#[derive(Debug, Clone)]
pub(crate) enum ObservationLaw {
    /// Finite mixture; `cumulative` holds the inclusive prefix sums of the
    /// atom probabilities for inverse-CDF sampling.
    Mixture {
        atoms: Vec<Atom>,
        probs: Vec<f64>,
        cumulative: Vec<f64>,
    },
    /// `A = 1`, `b = -xi` with `xi` standard normal. Unbounded noise.
    ScalarGaussian,
}

/// An observation sampler with known ground truth.
#[derive(Debug, Clone)]
pub struct LsaInstance {
    dim: usize,
    law: ObservationLaw,
    abar: DMatrix<f64>,
    bbar: DVector<f64>,
    theta_star: DVector<f64>,
    sigma_eps: DMatrix<f64>,
    /// Uniform operator-norm bound on both `A` and `A - Abar`.
    bound_a: f64,
    /// Uniform norm bound on the noise at the solution (infinite for the
    /// scalar Gaussian instance).
    noise_sup: f64,
    unbounded_noise: bool,
    seed: u64,
}

/// A single drawn observation, borrowing mixture atoms where possible.
pub enum Draw<'a> {
    Atom(&'a Atom),
    Scalar { xi: f64 },
}

impl Draw<'_> {
    /// Materialise the observation pair `(A, b)`.
    pub fn observation(&self, dim: usize) -> (DMatrix<f64>, DVector<f64>) {
        match self {
            Draw::Atom(atom) => (atom.a.clone(), atom.b.clone()),
            Draw::Scalar { xi } => {
                debug_assert_eq!(dim, 1);
                (
                    DMatrix::from_element(1, 1, 1.0),
                    DVector::from_element(1, -*xi),
                )
            }
        }
    }

    /// `out = A theta - b` without allocating.
    pub fn apply(&self, theta: &DVector<f64>, out: &mut DVector<f64>) {
        match self {
            Draw::Atom(atom) => {
                out.gemv(1.0, &atom.a, theta, 0.0);
                *out -= &atom.b;
            }
            Draw::Scalar { xi } => out[0] = theta[0] + xi,
        }
    }

    /// Noise at the solution for this draw.
    pub fn noise(&self) -> DVector<f64> {
        match self {
            Draw::Atom(atom) => atom.noise.clone(),
            Draw::Scalar { xi } => DVector::from_element(1, *xi),
        }
    }
}

/// Seeded observation stream over an instance.
pub struct Sampler<'a> {
    instance: &'a LsaInstance,
    rng: ChaCha12Rng,
}

impl<'a> Sampler<'a> {
    pub fn draw(&mut self) -> Draw<'a> {
        match &self.instance.law {
            ObservationLaw::Mixture {
                atoms, cumulative, ..
            } => {
                let u: f64 = self.rng.gen();
                let idx = cumulative.partition_point(|&c| c < u).min(atoms.len() - 1);
                Draw::Atom(&atoms[idx])
            }
            ObservationLaw::ScalarGaussian => {
                let xi: f64 = self.rng.sample(StandardNormal);
                Draw::Scalar { xi }
            }
        }
    }

    /// Convenience: draw and materialise.
    pub fn next_observation(&mut self) -> (DMatrix<f64>, DVector<f64>) {
        let dim = self.instance.dim;
        self.draw().observation(dim)
    }
}

impl LsaInstance {
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn abar(&self) -> &DMatrix<f64> {
        &self.abar
    }
    pub fn bbar(&self) -> &DVector<f64> {
        &self.bbar
    }
    pub fn theta_star(&self) -> &DVector<f64> {
        &self.theta_star
    }
    pub fn sigma_eps(&self) -> &DMatrix<f64> {
        &self.sigma_eps
    }
    pub fn bound_a(&self) -> f64 {
        self.bound_a
    }
    pub fn noise_sup(&self) -> f64 {
        self.noise_sup
    }
    pub fn unbounded_noise(&self) -> bool {
        self.unbounded_noise
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Mixture atoms, when the instance is atom-based.
    pub fn atoms(&self) -> Option<&[Atom]> {
        match &self.law {
            ObservationLaw::Mixture { atoms, .. } => Some(atoms),
            ObservationLaw::ScalarGaussian => None,
        }
    }

    /// Atom probabilities, when the instance is atom-based.
    pub fn atom_probs(&self) -> Option<&[f64]> {
        match &self.law {
            ObservationLaw::Mixture { probs, .. } => Some(probs),
            ObservationLaw::ScalarGaussian => None,
        }
    }

    /// Observation stream with the instance's stored seed.
    pub fn sampler(&self) -> Sampler<'_> {
        self.sampler_with_seed(self.seed)
    }

    /// Observation stream with an explicit seed (stream index 0).
    pub fn sampler_with_seed(&self, seed: u64) -> Sampler<'_> {
        Sampler {
            instance: self,
            rng: rngutil::stream(seed, 0),
        }
    }

    pub(crate) fn sampler_from_rng(&self, rng: ChaCha12Rng) -> Sampler<'_> {
        Sampler {
            instance: self,
            rng,
        }
    }
}

/// Solve `Abar theta = bbar` for the target.
pub fn solve_target(abar: &DMatrix<f64>, bbar: &DVector<f64>) -> Result<DVector<f64>> {
    if abar.nrows() != bbar.len() {
        return Err(LsaError::DimensionMismatch {
            expected: abar.nrows(),
            got: bbar.len(),
        });
    }
    linalg::solve_checked(abar, bbar)
}

/// Noise measured at the solution: `(A - Abar) theta* - (b - bbar)`.
pub fn noise_at_solution(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    instance: &LsaInstance,
) -> Result<DVector<f64>> {
    let d = instance.dim;
    if a.nrows() != d || a.ncols() != d {
        return Err(LsaError::DimensionMismatch {
            expected: d,
            got: a.nrows().max(a.ncols()),
        });
    }
    if b.len() != d {
        return Err(LsaError::DimensionMismatch {
            expected: d,
            got: b.len(),
        });
    }
    Ok((a - &instance.abar) * &instance.theta_star - (b - &instance.bbar))
}

/// The scalar Gaussian instance: `Abar = 1`, `bbar = 0`, `theta* = 0`,
/// `A_k = 1`, `b_k = -xi_k` with standard normal `xi_k`.
///
/// The noise is unbounded, so the instance is excluded from boundedness-based
/// assumption checks via the `unbounded_noise` flag.
pub fn make_gaussian_identity_1d(seed: u64) -> LsaInstance {
    LsaInstance {
        dim: 1,
        law: ObservationLaw::ScalarGaussian,
        abar: DMatrix::from_element(1, 1, 1.0),
        bbar: DVector::zeros(1),
        theta_star: DVector::zeros(1),
        sigma_eps: DMatrix::from_element(1, 1, 1.0),
        bound_a: 1.0,
        noise_sup: f64::INFINITY,
        unbounded_noise: true,
        seed,
    }
}

/// Random instance with `-Abar` Hurwitz and bounded finite-mixture noise.
///
/// `Abar` is built as `Uᵀ (Λ + N) U` with `Λ` diagonal holding eigenvalues
/// drawn uniformly from `spectrum`, `N` a small strictly upper-triangular
/// perturbation and `U` random orthogonal, so the spectrum is known exactly.
/// Observation perturbations come in `±` pairs, which makes the mixture mean
/// exactly `(Abar, bbar)`.
pub fn make_random_hurwitz(
    dim: usize,
    seed: u64,
    spectrum: (f64, f64),
    noise_scale: f64,
) -> Result<LsaInstance> {
    make_random_hurwitz_with_atoms(dim, seed, spectrum, noise_scale, 2 * dim.max(2))
}

/// As [`make_random_hurwitz`], with an explicit (even) atom count.
pub fn make_random_hurwitz_with_atoms(
    dim: usize,
    seed: u64,
    spectrum: (f64, f64),
    noise_scale: f64,
    n_atoms: usize,
) -> Result<LsaInstance> {
    let (lo, hi) = spectrum;
    if dim == 0 {
        return Err(LsaError::InvalidParameter("dimension must be >= 1".into()));
    }
    if !(0.0 < lo && lo <= hi) {
        return Err(LsaError::InvalidParameter(format!(
            "spectrum range must satisfy 0 < lo <= hi, got ({lo}, {hi})"
        )));
    }
    if noise_scale < 0.0 {
        return Err(LsaError::InvalidParameter(
            "noise_scale must be nonnegative".into(),
        ));
    }
    let n_atoms = n_atoms.max(2) + n_atoms % 2;
    let mut rng = rngutil::stream(seed, CONSTRUCT_SALT);

    // Eigenvalues in [lo, hi], small non-normal part, random orthogonal basis.
    let eigs = DVector::from_fn(dim, |_, _| rng.gen_range(lo..=hi));
    let mut tri = DMatrix::from_diagonal(&eigs);
    let off_scale = 0.2 * 0.5 * (lo + hi);
    for i in 0..dim {
        for j in (i + 1)..dim {
            tri[(i, j)] = rng.gen_range(-off_scale..=off_scale);
        }
    }
    let gauss = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let u = gauss.qr().q();
    let abar = u.transpose() * tri * &u;

    let theta_star = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..=1.0));
    let bbar = &abar * &theta_star;

    const MAX_RETRIES: usize = 16;
    for attempt in 0..=MAX_RETRIES {
        let mut deltas: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(n_atoms);
        for _ in 0..n_atoms / 2 {
            let da = DMatrix::from_fn(dim, dim, |_, _| {
                rng.gen_range(-noise_scale..=noise_scale)
            });
            let db = DVector::from_fn(dim, |_, _| rng.gen_range(-noise_scale..=noise_scale));
            deltas.push((-&da, -&db));
            deltas.push((da, db));
        }
        let instance = finish_mixture(
            dim,
            seed,
            abar.clone(),
            bbar.clone(),
            theta_star.clone(),
            deltas
                .into_iter()
                .map(|(da, db)| (&abar + da, &bbar + db))
                .collect(),
            vec![1.0 / n_atoms as f64; n_atoms],
        )?;
        let lam_min = linalg::sym_lambda_min(&instance.sigma_eps);
        let lam_max = linalg::max_abs(&instance.sigma_eps).max(1e-300);
        if noise_scale == 0.0 || lam_min > 1e-12 * lam_max {
            return Ok(instance);
        }
        if attempt == MAX_RETRIES {
            return Err(LsaError::DegenerateNoise(MAX_RETRIES));
        }
    }
    unreachable!()
}

/// Finite MDP specification for TD(0) policy evaluation with linear features.
#[derive(Debug, Clone)]
pub struct MdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transition[s][a][s']`, each `(s, a)` row summing to one.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a]`.
    pub reward: Vec<Vec<f64>>,
    /// `policy[s][a]`, each state row summing to one.
    pub policy: Vec<Vec<f64>>,
    pub discount: f64,
    /// One feature vector per state; the stacked matrix must have full
    /// column rank.
    pub features: Vec<Vec<f64>>,
}

impl MdpSpec {
    pub fn feature_dim(&self) -> usize {
        self.features.first().map(|f| f.len()).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, a) = (self.n_states, self.n_actions);
        if s == 0 || a == 0 {
            return Err(LsaError::InvalidParameter(
                "MDP needs at least one state and one action".into(),
            ));
        }
        if !(0.0 < self.discount && self.discount < 1.0) {
            return Err(LsaError::InvalidParameter(format!(
                "discount must lie in (0, 1), got {}",
                self.discount
            )));
        }
        let shape_err = |what: &str| LsaError::InvalidParameter(format!("{what} shape mismatch"));
        if self.transition.len() != s || self.reward.len() != s || self.policy.len() != s {
            return Err(shape_err("per-state table"));
        }
        if self.features.len() != s {
            return Err(shape_err("features"));
        }
        let d = self.feature_dim();
        for state in 0..s {
            if self.transition[state].len() != a
                || self.reward[state].len() != a
                || self.policy[state].len() != a
                || self.features[state].len() != d
            {
                return Err(shape_err("per-action table"));
            }
            let pol_sum: f64 = self.policy[state].iter().sum();
            if (pol_sum - 1.0).abs() > 1e-12 {
                return Err(LsaError::InvalidParameter(format!(
                    "policy row {state} sums to {pol_sum}, expected 1"
                )));
            }
            for action in 0..a {
                if self.transition[state][action].len() != s {
                    return Err(shape_err("transition"));
                }
                let row_sum: f64 = self.transition[state][action].iter().sum();
                if (row_sum - 1.0).abs() > 1e-12 {
                    return Err(LsaError::InvalidParameter(format!(
                        "transition row ({state}, {action}) sums to {row_sum}, expected 1"
                    )));
                }
            }
        }
        let feat = DMatrix::from_fn(s, d, |i, j| self.features[i][j]);
        let r = linalg::rank(&feat, 1e-12);
        if r < d {
            return Err(LsaError::RankDeficientFeatures { rank: r, dim: d });
        }
        Ok(())
    }

    /// Value function of the policy by solving `(I - discount P^nu) V = r^nu`.
    pub fn policy_values(&self) -> Result<DVector<f64>> {
        self.validate()?;
        let s = self.n_states;
        let mut p_nu = DMatrix::zeros(s, s);
        let mut r_nu = DVector::zeros(s);
        for state in 0..s {
            for action in 0..self.n_actions {
                let w = self.policy[state][action];
                r_nu[state] += w * self.reward[state][action];
                for next in 0..s {
                    p_nu[(state, next)] += w * self.transition[state][action][next];
                }
            }
        }
        let system = DMatrix::identity(s, s) - self.discount * p_nu;
        linalg::solve_checked(&system, &r_nu)
    }
}

/// Default cap on the enumerated `(s, a, s')` support of a TD instance.
pub const DEFAULT_ENUMERATION_CAP: usize = 65_536;

/// TD(0) generative-model instance: observations are built from i.i.d.
/// transitions `(s, a, s')` with `s ~ state_dist`, `a ~ policy`,
/// `s' ~ transition`, giving `A = phi(s)(phi(s) - discount phi(s'))ᵀ` and
/// `b = r(s, a) phi(s)`. Population quantities are exact by enumerating the
/// finite support.
pub fn make_td_generative(mdp: &MdpSpec, seed: u64) -> Result<LsaInstance> {
    make_td_generative_with(mdp, seed, None, DEFAULT_ENUMERATION_CAP)
}

/// As [`make_td_generative`] with an explicit state-sampling distribution
/// (defaults to uniform) and enumeration cap.
pub fn make_td_generative_with(
    mdp: &MdpSpec,
    seed: u64,
    state_dist: Option<&[f64]>,
    enumeration_cap: usize,
) -> Result<LsaInstance> {
    mdp.validate()?;
    let s_count = mdp.n_states;
    let d = mdp.feature_dim();
    let uniform = vec![1.0 / s_count as f64; s_count];
    let mu = match state_dist {
        Some(given) => {
            if given.len() != s_count {
                return Err(LsaError::DimensionMismatch {
                    expected: s_count,
                    got: given.len(),
                });
            }
            let total: f64 = given.iter().sum();
            if (total - 1.0).abs() > 1e-12 || given.iter().any(|&p| p < 0.0) {
                return Err(LsaError::InvalidParameter(
                    "state distribution must be a probability vector".into(),
                ));
            }
            given.to_vec()
        }
        None => uniform,
    };

    let phis: Vec<DVector<f64>> = mdp
        .features
        .iter()
        .map(|f| DVector::from_row_slice(f))
        .collect();

    let mut supports: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::new();
    let mut probs: Vec<f64> = Vec::new();
    for s in 0..s_count {
        for a in 0..mdp.n_actions {
            for s_next in 0..s_count {
                let p = mu[s] * mdp.policy[s][a] * mdp.transition[s][a][s_next];
                if p <= 0.0 {
                    continue;
                }
                if supports.len() >= enumeration_cap {
                    return Err(LsaError::EnumerationOverflow(
                        supports.len() + 1,
                        enumeration_cap,
                    ));
                }
                let row = (&phis[s] - mdp.discount * &phis[s_next]).transpose();
                let a_mat = &phis[s] * row;
                let b_vec = mdp.reward[s][a] * &phis[s];
                supports.push((a_mat, b_vec));
                probs.push(p);
            }
        }
    }

    let mut abar = DMatrix::zeros(d, d);
    let mut bbar = DVector::zeros(d);
    for ((a_mat, b_vec), &p) in supports.iter().zip(&probs) {
        abar += p * a_mat;
        bbar += p * b_vec;
    }
    if !linalg::is_positive_stable(&abar) {
        return Err(LsaError::NotHurwitz(
            "TD mean matrix has an eigenvalue with nonpositive real part".into(),
        ));
    }
    let theta_star = solve_target(&abar, &bbar)?;
    finish_mixture(d, seed, abar, bbar, theta_star, supports, probs)
}

/// Assemble a mixture instance, computing the exact noise covariance and
/// boundedness constants from the atoms.
fn finish_mixture(
    dim: usize,
    seed: u64,
    abar: DMatrix<f64>,
    bbar: DVector<f64>,
    theta_star: DVector<f64>,
    observations: Vec<(DMatrix<f64>, DVector<f64>)>,
    probs: Vec<f64>,
) -> Result<LsaInstance> {
    let mut atoms = Vec::with_capacity(observations.len());
    let mut sigma_eps = DMatrix::zeros(dim, dim);
    let mut bound_a = 0.0_f64;
    let mut noise_sup = 0.0_f64;
    for ((a, b), &p) in observations.into_iter().zip(&probs) {
        let noise = (&a - &abar) * &theta_star - (&b - &bbar);
        sigma_eps += p * (&noise * noise.transpose());
        bound_a = bound_a
            .max(linalg::spectral_norm(&a))
            .max(linalg::spectral_norm(&(&a - &abar)));
        noise_sup = noise_sup.max(noise.norm());
        atoms.push(Atom { a, b, noise });
    }
    sigma_eps = 0.5 * (&sigma_eps + sigma_eps.transpose());
    let mut cumulative = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for &p in &probs {
        acc += p;
        cumulative.push(acc);
    }
    if let Some(last) = cumulative.last_mut() {
        *last = 1.0;
    }
    Ok(LsaInstance {
        dim,
        law: ObservationLaw::Mixture {
            atoms,
            probs,
            cumulative,
        },
        abar,
        bbar,
        theta_star,
        sigma_eps,
        bound_a,
        noise_sup,
        unbounded_noise: false,
        seed,
    })
}
