//! Marginal likelihood of spatial encounter histories.
//!
//! Conditional on an activity centre `s`, detections are independent
//! Bernoulli trials with half-normal probability
//! `p(x, s) = p0 * exp(-|x - s|^2 / (2 sigma^2))`. The centre is integrated
//! out over the state-space points, weighted by the density surface, and the
//! unobserved individuals are integrated out against a Poisson population:
//!
//! ```text
//! -log L_g = sum_u D_u (1 - pi0_u) - sum_i log sum_u D_u [y_i | s_u] + log n_g!
//! ```
//!
//! where `D_u = d(s_u) * cell_area`, `lambda_g = sum_u D_u`, and
//! `pi0_u = [0 | s_u]` is the probability of an all-zero history at `s_u`.
//! This equals the infinite sum over population sizes of the binomial
//! likelihood times the Poisson pmf; [`truncated_session_nll`] evaluates that
//! sum directly for cross-checking.

use std::collections::HashMap;

use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::encounters::EncounterData;
use crate::error::{Result, ScrError};
use crate::geometry::{StateSpace, TrapArray};
use crate::model::{clamp_eta, log_p0_pair, DesignBundle, ETA_CLAMP};

/// State-space points handled per work item; fixed so results do not depend on thread count.
const POINT_CHUNK: usize = 32;

/// Half-normal detection probability.
pub fn detection_prob(p0: f64, sigma: f64, dist: f64) -> f64 {
    p0 * (-dist * dist / (2.0 * sigma * sigma)).exp()
}

/// `sum_jk log Bernoulli(y_jk; p_jk)` for a dense `J × K` history.
/// Returns `-inf` when a detection has probability zero.
pub fn conditional_log_pmf(y: &[Vec<u8>], p: &[Vec<f64>]) -> f64 {
    y.iter()
        .zip(p)
        .flat_map(|(yj, pj)| yj.iter().zip(pj))
        .map(|(&yk, &pk)| if yk == 1 { pk.ln() } else { (-pk).ln_1p() })
        .sum()
}

/// Max-shifted `log sum exp`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log sum_u w_u exp(c_u)` for mixture log-weights `log_w` that sum to one
/// on the probability scale.
pub fn marginal_log_pmf(log_conditionals: &[f64], log_weights: &[f64]) -> f64 {
    let terms: Vec<f64> = log_conditionals.iter().zip(log_weights).map(|(c, w)| c + w).collect();
    log_sum_exp(&terms)
}

/// Uniform mixture over `G` points, the intercept-only density case.
pub fn uniform_marginal_log_pmf(log_conditionals: &[f64]) -> f64 {
    log_sum_exp(log_conditionals) - (log_conditionals.len() as f64).ln()
}

/// Poisson-integrated negative log-likelihood of one session:
/// `-[n log(lambda (1 - pi0)) - lambda (1 - pi0) - log n! + sum_i (log m_i - log(1 - pi0))]`.
pub fn poisson_integrated_nll(lambda: f64, pi0: f64, log_marginals: &[f64]) -> f64 {
    let n = log_marginals.len() as f64;
    let detected = lambda * (1.0 - pi0);
    if log_marginals.is_empty() {
        return detected;
    }
    if pi0 >= 1.0 {
        return f64::INFINITY;
    }
    let log_det = (1.0 - pi0).ln();
    let s: f64 = log_marginals.iter().map(|m| m - log_det).sum();
    -(n * detected.ln() - detected - ln_gamma(n + 1.0) + s)
}

/// The same quantity by summing the binomial likelihood against the Poisson
/// pmf over `N = n..=n_max`.
pub fn truncated_session_nll(lambda: f64, pi0: f64, log_marginals: &[f64], n_max: usize) -> f64 {
    let n = log_marginals.len();
    let sum_log_m: f64 = log_marginals.iter().sum();
    let terms: Vec<f64> = (n..=n_max)
        .map(|big_n| {
            let nf = big_n as f64;
            let log_binom = ln_gamma(nf + 1.0) - ln_gamma(n as f64 + 1.0) - ln_gamma((big_n - n) as f64 + 1.0);
            let log_pois = nf * lambda.ln() - lambda - ln_gamma(nf + 1.0);
            let zeros = if big_n == n { 0.0 } else { (big_n - n) as f64 * pi0.ln() };
            log_binom + sum_log_m + zeros + log_pois
        })
        .collect();
    -log_sum_exp(&terms)
}

/// Default truncation point for [`truncated_session_nll`].
pub fn default_truncation(lambda: f64, n: usize) -> usize {
    (lambda + 10.0 * lambda.sqrt()).ceil() as usize + n + 50
}

/// Neumaier-compensated sum, accumulated in iteration order.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Occasions whose p0 design rows coincide at every trap share detection
/// probabilities and are evaluated once.
#[derive(Debug, Clone)]
struct OccasionGroups {
    group_of: Vec<usize>,
    representative: Vec<usize>,
    multiplicity: Vec<f64>,
}

/// Per-session quantities that depend on the parameters.
struct SessionParams {
    sigma: f64,
    /// d log sigma / d eta (0 when clamped).
    sigma_active: f64,
    /// p0, ln p0 and 1 - p0 per `(j, k)`, index `j * K + k`.
    p0: Vec<f64>,
    log_p0: Vec<f64>,
    q0: Vec<f64>,
    p0_active: Vec<f64>,
    log_d: Vec<f64>,
    d_active: Vec<f64>,
}

/// Evaluation of one session at a parameter value.
#[derive(Debug, Clone)]
pub struct SessionEval {
    pub nll: f64,
    /// Expected population size `lambda_g`.
    pub lambda: f64,
    /// Probability that an individual goes undetected, averaged over the density.
    pub pi0: f64,
    /// `log [y_i | theta]` per observed individual (density-weighted mixture).
    pub log_marginals: Vec<f64>,
}

/// Everything fixed during a fit: design, data, distances and occasion grouping.
#[derive(Debug, Clone)]
pub struct LikelihoodContext {
    design: DesignBundle,
    data: EncounterData,
    /// Squared trap-to-point distances, index `j * G + u`.
    dist_sq: Vec<f64>,
    cell_area: f64,
    total_area: f64,
    trap_spacing: Option<f64>,
    groups: Vec<OccasionGroups>,
    ln_factorial: Vec<f64>,
}

impl LikelihoodContext {
    pub fn new(design: DesignBundle, data: EncounterData, traps: &TrapArray, space: &StateSpace) -> Result<Self> {
        let dims = design.dims;
        if dims.n_points != space.len() || dims.n_traps != traps.len() {
            return Err(ScrError::InvalidInput(format!(
                "design built for {} points and {} traps, but state space has {} and trap array {}",
                dims.n_points,
                dims.n_traps,
                space.len(),
                traps.len()
            )));
        }
        if data.n_sessions() != dims.n_sessions {
            return Err(ScrError::InvalidInput(format!(
                "design has {} sessions, data has {}",
                dims.n_sessions,
                data.n_sessions()
            )));
        }
        for s in &data.sessions {
            if s.n_traps != dims.n_traps || s.n_occasions != dims.n_occasions {
                return Err(ScrError::InvalidInput(format!(
                    "session {} is {} traps x {} occasions, design expects {} x {}",
                    s.session_id, s.n_traps, s.n_occasions, dims.n_traps, dims.n_occasions
                )));
            }
        }
        let g_n = space.len();
        let mut dist_sq = Vec::with_capacity(traps.len() * g_n);
        for t in traps.traps() {
            dist_sq.extend(space.points().iter().map(|p| t.point.dist_sq(p)));
        }
        let groups = (0..dims.n_sessions).map(|g| occasion_groups(&design, g)).collect();
        let ln_factorial = data
            .sessions
            .iter()
            .map(|s| ln_gamma(s.n_detected() as f64 + 1.0))
            .collect();
        Ok(Self {
            design,
            data,
            dist_sq,
            cell_area: space.cell_area(),
            total_area: space.total_area(),
            trap_spacing: traps.mean_spacing(),
            groups,
            ln_factorial,
        })
    }

    pub fn design(&self) -> &DesignBundle {
        &self.design
    }

    pub fn data(&self) -> &EncounterData {
        &self.data
    }

    pub fn n_params(&self) -> usize {
        self.design.n_params()
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_area
    }

    pub fn total_area(&self) -> f64 {
        self.total_area
    }

    /// Mean nearest-neighbour trap spacing; `None` for a single trap.
    pub fn trap_spacing(&self) -> Option<f64> {
        self.trap_spacing
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(ScrError::InvalidInput(format!(
                "parameter vector has {} entries, model has {}",
                theta.len(),
                self.n_params()
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(ScrError::InvalidInput(
                "parameter vector contains non-finite values".into(),
            ));
        }
        Ok(())
    }

    fn session_params(&self, g: usize, theta: &[f64]) -> SessionParams {
        let (na, ng, _) = self.design.sizes();
        let dims = self.design.dims;
        let (jn, kn, gn) = (dims.n_traps, dims.n_occasions, dims.n_points);
        let (alpha, rest) = theta.split_at(na);
        let (gamma, beta) = rest.split_at(ng);

        let eta_sigma = row_dot(&self.design.sigma.matrix, g, gamma);
        let sigma = clamp_eta(eta_sigma).exp();
        let sigma_active = if eta_sigma.abs() < ETA_CLAMP { 1.0 } else { 0.0 };

        let base = g * jn * kn;
        let mut p0 = Vec::with_capacity(jn * kn);
        let mut log_p0 = Vec::with_capacity(jn * kn);
        let mut q0 = Vec::with_capacity(jn * kn);
        let mut p0_active = Vec::with_capacity(jn * kn);
        for r in base..base + jn * kn {
            let eta = row_dot(&self.design.p0.matrix, r, alpha);
            let (lp, lq) = log_p0_pair(eta);
            p0.push(lp.exp());
            log_p0.push(lp);
            q0.push(lq.exp());
            p0_active.push(if eta.abs() < ETA_CLAMP { 1.0 } else { 0.0 });
        }

        let mut log_d = Vec::with_capacity(gn);
        let mut d_active = Vec::with_capacity(gn);
        for u in 0..gn {
            let eta = row_dot(&self.design.density.matrix, g * gn + u, beta);
            log_d.push(clamp_eta(eta));
            d_active.push(if eta.abs() < ETA_CLAMP { 1.0 } else { 0.0 });
        }
        SessionParams {
            sigma,
            sigma_active,
            p0,
            log_p0,
            q0,
            p0_active,
            log_d,
            d_active,
        }
    }

    /// Fills, for point `u`, `x_j = d_ju^2 / (2 sigma^2)` and `ln q` per `(j, group)`;
    /// returns `ln [0 | s_u]`.
    fn point_terms(
        &self,
        sp: &SessionParams,
        groups: &OccasionGroups,
        u: usize,
        x: &mut [f64],
        log_q: &mut [f64],
    ) -> f64 {
        let dims = self.design.dims;
        let (jn, kn, gn) = (dims.n_traps, dims.n_occasions, dims.n_points);
        let ng = groups.representative.len();
        let two_s2 = 2.0 * sp.sigma * sp.sigma;
        let mut s0 = 0.0;
        for j in 0..jn {
            let xj = self.dist_sq[j * gn + u] / two_s2;
            x[j] = xj;
            let one_minus_h = -(-xj).exp_m1();
            for (gi, &k) in groups.representative.iter().enumerate() {
                let r = j * kn + k;
                // 1 - p0 h = (1 - p0) + p0 (1 - h)
                let lq = (sp.q0[r] + sp.p0[r] * one_minus_h).ln();
                log_q[j * ng + gi] = lq;
                s0 += groups.multiplicity[gi] * lq;
            }
        }
        s0
    }

    /// Negative log-likelihood of one session and its by-products.
    pub fn session_eval(&self, g: usize, theta: &[f64]) -> Result<SessionEval> {
        self.check_theta(theta)?;
        let (nll, _, lambda, pi0, log_marginals) = self.session_core(g, theta, false)?;
        Ok(SessionEval {
            nll,
            lambda,
            pi0,
            log_marginals,
        })
    }

    pub fn session_nll(&self, g: usize, theta: &[f64]) -> Result<f64> {
        Ok(self.session_eval(g, theta)?.nll)
    }

    /// `log [y_i | s_u, theta]` for individual `i` of session `g` at point `u`.
    pub fn conditional_log_pmf(&self, g: usize, i: usize, u: usize, theta: &[f64]) -> Result<f64> {
        self.check_theta(theta)?;
        let sp = self.session_params(g, theta);
        let groups = &self.groups[g];
        let jn = self.design.dims.n_traps;
        let ng = groups.representative.len();
        let mut x = vec![0.0; jn];
        let mut log_q = vec![0.0; jn * ng];
        let s0 = self.point_terms(&sp, groups, u, &mut x, &mut log_q);
        let kn = self.design.dims.n_occasions;
        let caps = self.data.sessions[g].captures(i);
        Ok(s0
            + caps
                .iter()
                .map(|&(j, k)| sp.log_p0[j * kn + k] - x[j] - log_q[j * ng + groups.group_of[k]])
                .sum::<f64>())
    }

    pub fn total_nll(&self, theta: &[f64]) -> Result<f64> {
        self.check_theta(theta)?;
        let parts = (0..self.data.n_sessions())
            .map(|g| self.session_core(g, theta, false).map(|r| r.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(compensated_sum(parts))
    }

    /// Negative log-likelihood and its analytic gradient.
    pub fn total_nll_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_theta(theta)?;
        let mut grad = vec![0.0; theta.len()];
        let mut parts = Vec::with_capacity(self.data.n_sessions());
        for g in 0..self.data.n_sessions() {
            let (nll, gr, ..) = self.session_core(g, theta, true)?;
            parts.push(nll);
            for (a, b) in grad.iter_mut().zip(gr.expect("gradient requested")) {
                *a += b;
            }
        }
        Ok((compensated_sum(parts), grad))
    }

    #[allow(clippy::type_complexity)]
    fn session_core(
        &self,
        g: usize,
        theta: &[f64],
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>, f64, f64, Vec<f64>)> {
        let dims = self.design.dims;
        let (jn, kn, gn) = (dims.n_traps, dims.n_occasions, dims.n_points);
        let sp = self.session_params(g, theta);
        let groups = &self.groups[g];
        let ng = groups.representative.len();
        let session = &self.data.sessions[g];
        let n = session.n_detected();
        let log_area = self.cell_area.ln();

        // Pass 1: ln [0 | s_u] and ln [y_i | s_u], stored point-major.
        let mut s0 = vec![0.0; gn];
        // Individuals per point; kept at least 1 so every point chunk has a partner chunk.
        let stride = n.max(1);
        let mut cond = vec![0.0; gn * stride];
        s0.par_chunks_mut(POINT_CHUNK)
            .zip(cond.par_chunks_mut(POINT_CHUNK * stride))
            .enumerate()
            .for_each(|(c, (s0_chunk, cond_chunk))| {
                let mut x = vec![0.0; jn];
                let mut log_q = vec![0.0; jn * ng];
                for (off, s0_u) in s0_chunk.iter_mut().enumerate() {
                    let u = c * POINT_CHUNK + off;
                    let base = self.point_terms(&sp, groups, u, &mut x, &mut log_q);
                    *s0_u = base;
                    if n == 0 {
                        continue;
                    }
                    let row = &mut cond_chunk[off * n..(off + 1) * n];
                    for (i, slot) in row.iter_mut().enumerate() {
                        *slot = base
                            + session
                                .captures(i)
                                .iter()
                                .map(|&(j, k)| sp.log_p0[j * kn + k] - x[j] - log_q[j * ng + groups.group_of[k]])
                                .sum::<f64>();
                    }
                }
            });

        let log_big_d: Vec<f64> = sp.log_d.iter().map(|ld| ld + log_area).collect();
        let big_d: Vec<f64> = log_big_d.iter().map(|v| v.exp()).collect();
        let lambda = compensated_sum(big_d.iter().copied());
        let expected_detected = compensated_sum(big_d.iter().zip(&s0).map(|(d, s)| d * -s.exp_m1()));

        // Per-individual log sum_u D_u [y_i | s_u].
        let log_mix: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let terms: Vec<f64> = (0..gn).map(|u| log_big_d[u] + cond[u * n + i]).collect();
                log_sum_exp(&terms)
            })
            .collect();
        if let Some(i) = log_mix.iter().position(|v| !v.is_finite()) {
            return Err(ScrError::NonFinite {
                session: session.session_id,
                individual: Some(i),
                detail: format!("log marginal likelihood is {}", log_mix[i]),
            });
        }
        let nll = expected_detected - compensated_sum(log_mix.iter().copied()) + self.ln_factorial[g];
        if !nll.is_finite() {
            return Err(ScrError::NonFinite {
                session: session.session_id,
                individual: None,
                detail: format!("expected detections {expected_detected}"),
            });
        }
        let log_lambda = lambda.ln();
        let log_marginals: Vec<f64> = log_mix.iter().map(|m| m - log_lambda).collect();
        let pi0 = 1.0 - expected_detected / lambda;

        if !want_grad {
            return Ok((nll, None, lambda, pi0, log_marginals));
        }

        // Pass 2: gradient of the log-likelihood, accumulated per chunk and reduced in order.
        struct Partial {
            /// d l / d eta_p0 per (j, k)
            p0: Vec<f64>,
            /// d l / d log sigma
            log_sigma: f64,
            /// d l / d log D_u for the chunk's points
            log_d: Vec<f64>,
        }
        let partials: Vec<Partial> = (0..gn.div_ceil(POINT_CHUNK))
            .into_par_iter()
            .map(|c| {
                let start = c * POINT_CHUNK;
                let end = (start + POINT_CHUNK).min(gn);
                let mut part = Partial {
                    p0: vec![0.0; jn * kn],
                    log_sigma: 0.0,
                    log_d: Vec::with_capacity(end - start),
                };
                let mut x = vec![0.0; jn];
                let mut log_q = vec![0.0; jn * ng];
                // zero-history derivative per (j, group), summed over occasions later
                let mut zero_p0 = vec![0.0; jn * ng];
                for u in start..end {
                    self.point_terms(&sp, groups, u, &mut x, &mut log_q);
                    let z = s0[u].exp();
                    let mut resp = 0.0;
                    let mut w_caps = 0.0;
                    for i in 0..n {
                        let post = (log_big_d[u] + cond[u * n + i] - log_mix[i]).exp();
                        resp += post;
                        if post == 0.0 {
                            continue;
                        }
                        for &(j, k) in session.captures(i) {
                            let r = j * kn + k;
                            let q = log_q[j * ng + groups.group_of[k]].exp();
                            part.p0[r] += post * (1.0 - sp.p0[r]) / q;
                            w_caps += post * 2.0 * x[j] / q;
                        }
                    }
                    let weight = big_d[u] * z + resp;
                    part.log_d.push(resp - big_d[u] * -s0[u].exp_m1());
                    let mut sig = 0.0;
                    for j in 0..jn {
                        for (gi, &k) in groups.representative.iter().enumerate() {
                            let r = j * kn + k;
                            let q = log_q[j * ng + gi].exp();
                            let p = sp.p0[r] * (-x[j]).exp();
                            zero_p0[j * ng + gi] -= weight * p * (1.0 - sp.p0[r]) / q;
                            sig -= groups.multiplicity[gi] * 2.0 * x[j] * p / q;
                        }
                    }
                    part.log_sigma += weight * sig + w_caps;
                }
                for j in 0..jn {
                    for k in 0..kn {
                        part.p0[j * kn + k] += zero_p0[j * ng + groups.group_of[k]];
                    }
                }
                part
            })
            .collect();

        let mut d_eta_p0 = vec![0.0; jn * kn];
        let mut d_log_sigma = 0.0;
        let mut d_log_d = Vec::with_capacity(gn);
        for part in &partials {
            for (a, b) in d_eta_p0.iter_mut().zip(&part.p0) {
                *a += b;
            }
            d_log_sigma += part.log_sigma;
            d_log_d.extend_from_slice(&part.log_d);
        }

        let (na, ngm, nb) = self.design.sizes();
        let mut grad = vec![0.0; na + ngm + nb];
        let base = g * jn * kn;
        let xp0 = &self.design.p0.matrix;
        for c in 0..na {
            grad[c] = -(0..jn * kn)
                .map(|r| xp0[(base + r, c)] * d_eta_p0[r] * sp.p0_active[r])
                .sum::<f64>();
        }
        for c in 0..ngm {
            grad[na + c] = -self.design.sigma.matrix[(g, c)] * d_log_sigma * sp.sigma_active;
        }
        let xd = &self.design.density.matrix;
        for c in 0..nb {
            grad[na + ngm + c] = -(0..gn)
                .map(|u| xd[(g * gn + u, c)] * d_log_d[u] * sp.d_active[u])
                .sum::<f64>();
        }
        Ok((nll, Some(grad), lambda, pi0, log_marginals))
    }
}

fn row_dot(m: &nalgebra::DMatrix<f64>, row: usize, coef: &[f64]) -> f64 {
    coef.iter().enumerate().map(|(c, b)| m[(row, c)] * b).sum()
}

fn occasion_groups(design: &DesignBundle, g: usize) -> OccasionGroups {
    let dims = design.dims;
    let (jn, kn) = (dims.n_traps, dims.n_occasions);
    let m = &design.p0.matrix;
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut group_of = Vec::with_capacity(kn);
    let mut representative = Vec::new();
    let mut multiplicity: Vec<f64> = Vec::new();
    for k in 0..kn {
        let key: Vec<u64> = (0..jn)
            .flat_map(|j| {
                let r = (g * jn + j) * kn + k;
                (0..m.ncols()).map(move |c| m[(r, c)].to_bits())
            })
            .collect();
        let next = representative.len();
        let gi = *index.entry(key).or_insert(next);
        if gi == next {
            representative.push(k);
            multiplicity.push(0.0);
        }
        multiplicity[gi] += 1.0;
        group_of.push(gi);
    }
    OccasionGroups {
        group_of,
        representative,
        multiplicity,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariates::{CovariateRegistry, CovariateSurface, Dims, Scope};
    use crate::encounters::SessionBlock;
    use crate::geometry::PlanePoint;
    use crate::model::{build_design, link_p0, DesignOptions, ModelFormula};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn detection_prob_values() {
        assert_eq!(detection_prob(0.3, 50.0, 0.0), 0.3);
        assert_relative_eq!(
            detection_prob(0.3, 50.0, 50.0),
            0.3 * (-0.5f64).exp(),
            max_relative = 1e-15
        );
        assert_relative_eq!(detection_prob(1.0, 2.0, 6.0), (-4.5f64).exp(), max_relative = 1e-15);
        assert_relative_eq!((-4.5f64).exp(), 0.011109, max_relative = 1e-4);
    }

    #[test]
    fn conditional_pmf_hand_values() {
        assert_relative_eq!(conditional_log_pmf(&[vec![1]], &[vec![0.5]]), 0.5f64.ln());
        let v = conditional_log_pmf(&[vec![0], vec![0]], &[vec![0.1], vec![0.2]]);
        assert_relative_eq!(v, (0.9f64 * 0.8).ln(), max_relative = 1e-14);
        assert_eq!(conditional_log_pmf(&[vec![1]], &[vec![0.0]]), f64::NEG_INFINITY);
    }

    #[test]
    fn log_sum_exp_edge_cases() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert_relative_eq!(log_sum_exp(&[-1000.0, -1000.0]), -1000.0 + 2f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(uniform_marginal_log_pmf(&[-3.0]), -3.0);
        assert_relative_eq!(uniform_marginal_log_pmf(&[-2.0, -2.0]), -2.0, epsilon = 1e-15);
    }

    #[test]
    fn empty_session_contribution() {
        assert_eq!(poisson_integrated_nll(12.5, 0.8, &[]), 12.5 * (1.0 - 0.8));
    }

    #[test]
    fn closed_form_matches_truncated_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let lambda = rng.random_range(0.5..80.0);
            let pi0 = rng.random_range(0.05..0.98);
            let n = rng.random_range(0..6);
            let lm: Vec<f64> = (0..n).map(|_| rng.random_range(-12.0..-0.5)).collect();
            let closed = poisson_integrated_nll(lambda, pi0, &lm);
            let trunc = truncated_session_nll(lambda, pi0, &lm, default_truncation(lambda, n));
            assert!(
                (closed - trunc).abs() <= 1e-8 * closed.abs().max(1.0),
                "{closed} vs {trunc}"
            );
        }
    }

    /// Small fixture with a covariate on every predictor.
    pub(crate) struct Toy {
        pub traps: TrapArray,
        pub space: StateSpace,
        pub data: EncounterData,
        pub registry: CovariateRegistry,
    }

    pub(crate) fn toy(
        seed: u64,
        n_points: usize,
        n_traps: usize,
        n_occ: usize,
        n_sessions: usize,
        max_ind: usize,
    ) -> Toy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let traps = TrapArray::from_points(
            &(0..n_traps)
                .map(|j| PlanePoint::new(j as f64 * 10.0, (j % 2) as f64 * 7.0))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let space = StateSpace::new(
            (0..n_points)
                .map(|u| PlanePoint::new(-5.0 + u as f64 * 6.5, 3.0 + ((u * 7) % 5) as f64 * 4.0))
                .collect(),
            4.0,
        )
        .unwrap();
        let sessions = (0..n_sessions)
            .map(|g| {
                let n = rng.random_range(0..=max_ind);
                let caps: Vec<Vec<(usize, usize)>> = (0..n)
                    .map(|_| {
                        let m = rng.random_range(1..=3);
                        (0..m)
                            .map(|_| (rng.random_range(0..n_traps), rng.random_range(0..n_occ)))
                            .collect()
                    })
                    .collect();
                SessionBlock::new(g + 1, (0..n).map(|i| format!("i{i}")).collect(), n_traps, n_occ, caps).unwrap()
            })
            .collect();
        let mut registry = CovariateRegistry::new();
        registry.insert(
            CovariateSurface::new(
                "hab",
                Scope::StateSpace,
                (0..n_points).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
        );
        registry.insert(
            CovariateSurface::new(
                "busy",
                Scope::Occasion,
                (0..n_occ).map(|_| rng.random_range(0.0..1.0)).collect(),
            )
            .unwrap(),
        );
        registry.insert(
            CovariateSurface::new(
                "edge",
                Scope::Trap,
                (0..n_traps).map(|_| rng.random_range(0.0..2.0)).collect(),
            )
            .unwrap(),
        );
        Toy {
            traps,
            space,
            data: EncounterData { sessions },
            registry,
        }
    }

    pub(crate) fn context(t: &Toy, formula: &str) -> LikelihoodContext {
        let dims = Dims {
            n_points: t.space.len(),
            n_traps: t.traps.len(),
            n_occasions: t.data.n_occasions(),
            n_sessions: t.data.n_sessions(),
        };
        let f = ModelFormula::parse(formula).unwrap();
        let design = build_design(&f, &t.registry, dims, DesignOptions { standardize: false }).unwrap();
        LikelihoodContext::new(design, t.data.clone(), &t.traps, &t.space).unwrap()
    }

    /// Probability-space evaluation: dense Bernoulli products, weighted
    /// averages and the closed-form Poisson integration.
    fn brute_session_nll(ctx: &LikelihoodContext, t: &Toy, g: usize, theta: &[f64]) -> (f64, f64, Vec<f64>) {
        let design = ctx.design();
        let dims = design.dims;
        let (na, ngm, _) = design.sizes();
        let alpha = &theta[..na];
        let gamma = &theta[na..na + ngm];
        let beta = &theta[na + ngm..];
        let sigma = design.sigma.eta(gamma)[g].exp();
        let p0_eta = design.p0.eta(alpha);
        let d_eta = design.density.eta(beta);
        let weights: Vec<f64> = (0..dims.n_points)
            .map(|u| d_eta[g * dims.n_points + u].exp() * t.space.cell_area())
            .collect();
        let lambda: f64 = weights.iter().sum();
        let p_at = |u: usize| -> Vec<Vec<f64>> {
            (0..dims.n_traps)
                .map(|j| {
                    (0..dims.n_occasions)
                        .map(|k| {
                            let p0 = link_p0(p0_eta[(g * dims.n_traps + j) * dims.n_occasions + k]);
                            detection_prob(p0, sigma, t.traps.points()[j].dist(&t.space.points()[u]))
                        })
                        .collect()
                })
                .collect()
        };
        let prob = |y: &[Vec<u8>]| -> f64 {
            (0..dims.n_points)
                .map(|u| {
                    let p = p_at(u);
                    let mut prod = 1.0;
                    for j in 0..dims.n_traps {
                        for k in 0..dims.n_occasions {
                            prod *= if y[j][k] == 1 { p[j][k] } else { 1.0 - p[j][k] };
                        }
                    }
                    weights[u] / lambda * prod
                })
                .sum()
        };
        let zero = vec![vec![0u8; dims.n_occasions]; dims.n_traps];
        let pi0 = prob(&zero);
        let marg: Vec<f64> = t.data.sessions[g].to_dense().iter().map(|y| prob(y)).collect();
        let log_m: Vec<f64> = marg.iter().map(|m| m.ln()).collect();
        (poisson_integrated_nll(lambda, pi0, &log_m), pi0, marg)
    }

    fn random_theta(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-0.8..0.8)).collect()
    }

    #[test]
    fn log_space_matches_probability_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..30 {
            let (g_n, j_n, k_n) = (
                rng.random_range(1..=5),
                rng.random_range(1..=3),
                rng.random_range(1..=2),
            );
            let t = toy(seed, g_n, j_n, k_n, 2, 4);
            let mut formulas = vec!["D~1; p0~1; sigma~1"];
            // covariate columns need enough distinct rows to be identifiable
            if g_n >= 3 && j_n >= 2 && k_n >= 2 {
                formulas.push("D~hab; p0~busy+edge; sigma~session");
            }
            for formula in formulas {
                let ctx = context(&t, formula);
                let mut theta = random_theta(&mut rng, ctx.n_params());
                theta[0] -= 0.5;
                let na = ctx.design().sizes().0;
                theta[na] += 2.5; // sigma around e^2.5 ~ 12
                for g in 0..t.data.n_sessions() {
                    let eval = ctx.session_eval(g, &theta).unwrap();
                    let (want, pi0, marg) = brute_session_nll(&ctx, &t, g, &theta);
                    assert!(
                        (eval.nll - want).abs() <= 1e-10 * want.abs().max(1e-300),
                        "{} vs {want}",
                        eval.nll
                    );
                    assert!((eval.pi0 - pi0).abs() <= 1e-10 * pi0);
                    for (lm, m) in eval.log_marginals.iter().zip(&marg) {
                        assert!((lm.exp() - m).abs() <= 1e-10 * m);
                    }
                }
            }
        }
    }

    #[test]
    fn single_point_marginal_is_conditional() {
        let t = toy(3, 1, 3, 2, 1, 4);
        let ctx = context(&t, "D~1; p0~1; sigma~1");
        let theta = [-0.5, 2.0, -1.0];
        let eval = ctx.session_eval(0, &theta).unwrap();
        for i in 0..t.data.sessions[0].n_detected() {
            assert_relative_eq!(
                eval.log_marginals[i],
                ctx.conditional_log_pmf(0, i, 0, &theta).unwrap(),
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn conditional_matches_dense_evaluation() {
        let t = toy(8, 4, 3, 2, 1, 4);
        let ctx = context(&t, "D~1; p0~edge; sigma~1");
        let theta = [-0.3, 0.4, 2.2, 0.0];
        let sigma = 2.2f64.exp();
        let y = t.data.sessions[0].to_dense();
        let edge = &t.registry.get("edge", &[Scope::Trap]).unwrap().values;
        for (i, yi) in y.iter().enumerate() {
            for u in 0..4 {
                let p: Vec<Vec<f64>> = (0..3)
                    .map(|j| {
                        let p0 = link_p0(-0.3 + 0.4 * edge[j]);
                        vec![detection_prob(p0, sigma, t.traps.points()[j].dist(&t.space.points()[u])); 2]
                    })
                    .collect();
                let want = conditional_log_pmf(yi, &p);
                let got = ctx.conditional_log_pmf(0, i, u, &theta).unwrap();
                assert!((got - want).abs() <= 1e-12 * want.abs(), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn empty_session_is_expected_detections() {
        let mut t = toy(6, 40, 3, 2, 1, 0);
        t.data.sessions[0] = SessionBlock::empty(1, 3, 2);
        let ctx = context(&t, "D~1; p0~1; sigma~1");
        let theta = [-0.7, 2.4, -2.0];
        let (want, pi0, _) = brute_session_nll(&ctx, &t, 0, &theta);
        let eval = ctx.session_eval(0, &theta).unwrap();
        assert!((eval.nll - want).abs() <= 1e-10 * want);
        assert_relative_eq!(eval.nll, eval.lambda * (1.0 - pi0), max_relative = 1e-10);
        // d/d log D of sum_u D_u (1 - pi0_u) is the same quantity
        let (_, grad) = ctx.total_nll_grad(&theta).unwrap();
        assert_relative_eq!(grad[2], want, max_relative = 1e-10);
    }

    #[test]
    fn identical_sessions_double() {
        let t = toy(5, 5, 3, 2, 1, 4);
        let mut doubled = Toy {
            traps: t.traps.clone(),
            space: t.space.clone(),
            data: EncounterData {
                sessions: vec![t.data.sessions[0].clone(), t.data.sessions[0].clone()],
            },
            registry: t.registry.clone(),
        };
        doubled.data.sessions[1].session_id = 2;
        let theta = [-0.4, 2.0, -1.5];
        let one = context(&t, "D~1; p0~1; sigma~1").total_nll(&theta).unwrap();
        let two = context(&doubled, "D~1; p0~1; sigma~1").total_nll(&theta).unwrap();
        assert_relative_eq!(two, 2.0 * one, max_relative = 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for seed in 0..8 {
            let t = toy(100 + seed, 9, 4, 3, 3, 6);
            for formula in [
                "D~1; p0~1; sigma~1",
                "D~hab+session; p0~busy+edge+session; sigma~session",
            ] {
                let ctx = context(&t, formula);
                let mut theta = random_theta(&mut rng, ctx.n_params());
                let na = ctx.design().sizes().0;
                theta[na] += 2.3;
                let (_, grad) = ctx.total_nll_grad(&theta).unwrap();
                for c in 0..theta.len() {
                    let h = 1e-6;
                    let mut up = theta.clone();
                    up[c] += h;
                    let mut dn = theta.clone();
                    dn[c] -= h;
                    let fd = (ctx.total_nll(&up).unwrap() - ctx.total_nll(&dn).unwrap()) / (2.0 * h);
                    assert!(
                        (grad[c] - fd).abs() <= 1e-4 * fd.abs().max(1e-2),
                        "param {c} of {formula}: {} vs {fd}",
                        grad[c]
                    );
                }
            }
        }
    }

    #[test]
    fn relabeling_and_trap_permutation_invariance() {
        let t = toy(21, 6, 4, 2, 2, 5);
        let theta = [-0.2, 2.1, -1.0];
        let base = context(&t, "D~1; p0~1; sigma~1").total_nll(&theta).unwrap();

        let mut relabeled = Toy {
            traps: t.traps.clone(),
            space: t.space.clone(),
            data: t.data.clone(),
            registry: t.registry.clone(),
        };
        for s in &mut relabeled.data.sessions {
            let ids: Vec<String> = s.individual_ids.iter().rev().cloned().collect();
            let caps: Vec<Vec<(usize, usize)>> = s.all_captures().iter().rev().cloned().collect();
            *s = SessionBlock::new(s.session_id, ids, s.n_traps, s.n_occasions, caps).unwrap();
        }
        let a = context(&relabeled, "D~1; p0~1; sigma~1").total_nll(&theta).unwrap();
        assert_relative_eq!(a, base, max_relative = 1e-12);

        let perm = [2usize, 0, 3, 1];
        let pts = t.traps.points();
        let permuted_traps = TrapArray::from_points(&perm.iter().map(|&j| pts[j]).collect::<Vec<_>>()).unwrap();
        let inverse: Vec<usize> = (0..4).map(|j| perm.iter().position(|&p| p == j).unwrap()).collect();
        let mut permuted = Toy {
            traps: permuted_traps,
            space: t.space.clone(),
            data: t.data.clone(),
            registry: t.registry.clone(),
        };
        for s in &mut permuted.data.sessions {
            let caps: Vec<Vec<(usize, usize)>> = s
                .all_captures()
                .iter()
                .map(|c| c.iter().map(|&(j, k)| (inverse[j], k)).collect())
                .collect();
            *s = SessionBlock::new(s.session_id, s.individual_ids.clone(), s.n_traps, s.n_occasions, caps).unwrap();
        }
        let b = context(&permuted, "D~1; p0~1; sigma~1").total_nll(&theta).unwrap();
        assert_relative_eq!(b, base, max_relative = 1e-12);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let t = toy(4, 150, 4, 5, 2, 30);
        let ctx = context(&t, "D~hab; p0~busy; sigma~1");
        let theta = [-1.0, 0.3, 2.5, -2.0, 0.4];
        let a = ctx.total_nll_grad(&theta).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| ctx.total_nll_grad(&theta)).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn occasion_grouping() {
        let t = toy(2, 3, 3, 4, 2, 3);
        let ctx = context(&t, "D~1; p0~1; sigma~1");
        assert_eq!(ctx.groups[0].representative, vec![0]);
        assert_eq!(ctx.groups[0].multiplicity, vec![4.0]);
        let ctx = context(&t, "D~1; p0~busy; sigma~1");
        assert_eq!(ctx.groups[1].representative.len(), 4);
    }

    #[test]
    fn rejects_bad_theta() {
        let t = toy(2, 3, 3, 2, 1, 3);
        let ctx = context(&t, "D~1; p0~1; sigma~1");
        assert!(ctx.total_nll(&[0.0, 1.0]).is_err());
        assert!(ctx.total_nll(&[0.0, f64::NAN, 1.0]).is_err());
    }
}
