"""Compiled Metropolis-within-Gibbs sweeps for the BYM model.

State is ``(beta0, u, v, tau_u, tau_v)`` with ``u`` kept on the plane
``c'u = 0``. A move of ``u_i`` by ``eps`` is paired with a shift along the
null direction ``n`` (``Q n = 0``) that restores the constraint, and the
resulting change of the linear predictor away from unit ``i`` is absorbed by
``beta0`` (constant part) and ``v`` (the rest, ``g = n - mean(n)``). The
proposal is a translation, so it is symmetric; the prior of ``u`` changes only
locally because ``Q n = 0``, and the ``v`` prior change needs ``v'g`` only.
Smooth large-scale structure of ``u`` mixes slowly under single-site moves,
so each sweep also proposes shifts along the lowest non-null eigenvectors
``phi_k`` of ``Q``, projected onto the constraint plane along ``n`` (``psi_k``);
the prior change is ``lambda_k``-based because ``Q n = 0``.
Directions that leave ``eta`` unchanged (``u + eps psi_k, v - eps psi_k``
and ``beta0 + eps, v - eps``) are drawn exactly from their Gaussian
conditionals. A further pass moves ``u_i`` and ``v_i`` in opposite directions, which leaves
every ``eta`` unchanged and only touches the priors; it breaks the strong
posterior coupling between the two effects.

Each sweep ends with Gibbs draws of both precisions followed by joint
rescaling moves ``(tau, x) -> (tau e^eps, x e^(-eps/2))``. These keep
``tau x'Qx`` fixed, and their Jacobian cancels the ``tau^(rank/2)`` factor, so
only the gamma prior and the likelihood enter the acceptance ratio. Without
them the chains get stuck in either the small-effect or the large-effect part
of the precision funnel.

Shifts are accumulated lazily in ``K`` during a sweep:
``u_true = u - K n``, ``v_true = v + K g``, ``beta_true = beta + K mean(n)``.
With that bookkeeping ``eta_i = beta + u_i + v_i`` holds for the stored values.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _quad_form(indptr, indices, qdata, x):
    total = 0.0
    for i in range(x.shape[0]):
        acc = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            acc += qdata[p] * x[indices[p]]
        total += x[i] * acc
    return total


@njit(cache=True)
def draw_precision(std_gamma, prior_rate, quad):
    """Gamma(shape, prior_rate + quad / 2) draw from a Gamma(shape, 1) variate."""
    return std_gamma / (prior_rate + 0.5 * quad)


@njit(cache=True)
def _rescale_loglik(obs, expct, beta, x, other, factor):
    d = 0.0
    for j in range(x.shape[0]):
        old = beta + x[j] + other[j]
        new = beta + factor * x[j] + other[j]
        d += obs[j] * (new - old) - expct[j] * (math.exp(new) - math.exp(old))
    return d


@njit(cache=True)
def run_sweeps(
    n_sweeps, indptr, indices, qdata, qdiag, obs, expct,
    nvec, cvec, gvec, nbar, cn, gg, shape_u, rate_u, shape_v, rate_v,
    phi, psi, lam, info,
    state, u, v, step_u, step_v, step_w, step_m, step_g,
    normals, unifs, gammas, acc_u, acc_v, acc_w, acc_m, acc_b,
    record_every, out_scalar, out_u, out_v, out_pos,
):
    n = u.shape[0]
    beta = state[0]
    tau_u = state[1]
    tau_v = state[2]
    pos = out_pos[0]
    for s in range(n_sweeps):
        K = 0.0
        vg = 0.0
        for j in range(n):
            vg += v[j] * gvec[j]

        for i in range(n):
            eps = step_u[i] * normals[s, i]
            qu = 0.0
            for p in range(indptr[i], indptr[i + 1]):
                qu += qdata[p] * u[indices[p]]
            d_prior_u = -0.5 * tau_u * (2.0 * eps * qu + eps * eps * qdiag[i])
            kappa = eps * cvec[i] / cn
            S = vg + K * gg
            d_prior_v = -0.5 * tau_v * (2.0 * kappa * S + kappa * kappa * gg)
            eta = beta + u[i] + v[i]
            d_lik = obs[i] * eps - expct[i] * math.exp(eta) * math.expm1(eps)
            if math.log(unifs[s, i]) < d_lik + d_prior_u + d_prior_v:
                u[i] += eps
                K += kappa
                acc_u[i] += 1

        for j in range(n):
            eps = step_v[j] * normals[s, n + j]
            v_true = v[j] + K * gvec[j]
            d_prior = -0.5 * tau_v * (2.0 * eps * v_true + eps * eps)
            eta = beta + u[j] + v[j]
            d_lik = obs[j] * eps - expct[j] * math.exp(eta) * math.expm1(eps)
            if math.log(unifs[s, n + j]) < d_lik + d_prior:
                v[j] += eps
                acc_v[j] += 1

        # split moves: u_i + eps, v_i - eps (with compensation) leave eta unchanged
        vg = 0.0
        for j in range(n):
            vg += v[j] * gvec[j]
        for i in range(n):
            eps = step_w[i] * normals[s, 2 * n + 3 + i]
            qu = 0.0
            for p in range(indptr[i], indptr[i + 1]):
                qu += qdata[p] * u[indices[p]]
            d_prior_u = -0.5 * tau_u * (2.0 * eps * qu + eps * eps * qdiag[i])
            kappa = eps * cvec[i] / cn
            S = vg + K * gg
            v_true = v[i] + K * gvec[i]
            dvv = (2.0 * kappa * S - 2.0 * eps * v_true + kappa * kappa * gg
                   - 2.0 * kappa * eps * gvec[i] + eps * eps)
            if math.log(unifs[s, 2 * n + 3 + i]) < d_prior_u - 0.5 * tau_v * dvv:
                u[i] += eps
                v[i] -= eps
                vg -= eps * gvec[i]
                K += kappa
                acc_w[i] += 1

        # materialise the lazy shift
        for j in range(n):
            u[j] -= K * nvec[j]
            v[j] += K * gvec[j]
        beta += K * nbar

        # smooth moves along the lowest non-null eigenvectors
        base = 3 * n + 3
        for k in range(lam.shape[0]):
            eps = step_m[k] * normals[s, base + k] / math.sqrt(tau_u * lam[k] + info[k])
            pu = 0.0
            for j in range(n):
                pu += phi[k, j] * u[j]
            d = -0.5 * tau_u * lam[k] * (2.0 * eps * pu + eps * eps)
            for j in range(n):
                step = eps * psi[k, j]
                eta = beta + u[j] + v[j]
                d += obs[j] * step - expct[j] * math.exp(eta) * math.expm1(step)
            if math.log(unifs[s, base + k]) < d:
                for j in range(n):
                    u[j] += eps * psi[k, j]
                acc_m[k] += 1

        # exact Gibbs draws along directions that leave eta unchanged:
        # (u + eps psi_k, v - eps psi_k) and (beta0 + eps, v - eps)
        for k in range(lam.shape[0]):
            pu = 0.0
            pv = 0.0
            pp = 0.0
            for j in range(n):
                pu += phi[k, j] * u[j]
                pv += psi[k, j] * v[j]
                pp += psi[k, j] * psi[k, j]
            prec = tau_u * lam[k] + tau_v * pp
            eps = (tau_v * pv - tau_u * lam[k] * pu) / prec + normals[s, base + lam.shape[0] + k] / math.sqrt(prec)
            for j in range(n):
                u[j] += eps * psi[k, j]
                v[j] -= eps * psi[k, j]
        vsum = 0.0
        for j in range(n):
            vsum += v[j]
        eps = vsum / n + normals[s, base + 2 * lam.shape[0]] / math.sqrt(tau_v * n)
        beta += eps
        for j in range(n):
            v[j] -= eps

        eps = step_g[0] * normals[s, 2 * n]
        d_lik = 0.0
        em1 = math.expm1(eps)
        for j in range(n):
            d_lik += obs[j] * eps - expct[j] * math.exp(beta + u[j] + v[j]) * em1
        if math.log(unifs[s, 2 * n]) < d_lik:
            beta += eps
            acc_b[0] += 1

        # hard re-centering onto c'u = 0 (removes floating-point drift only)
        r = 0.0
        for j in range(n):
            r += cvec[j] * u[j]
        r /= cn
        for j in range(n):
            u[j] -= r * nvec[j]
            v[j] += r * gvec[j]
        beta += r * nbar

        tau_u = draw_precision(gammas[s, 0], rate_u, _quad_form(indptr, indices, qdata, u))
        vv = 0.0
        for j in range(n):
            vv += v[j] * v[j]
        tau_v = draw_precision(gammas[s, 1], rate_v, vv)

        eps = step_g[1] * normals[s, 2 * n + 1]
        factor = math.exp(-0.5 * eps)
        d = shape_u * eps - rate_u * tau_u * math.expm1(eps)
        d += _rescale_loglik(obs, expct, beta, u, v, factor)
        if math.log(unifs[s, 2 * n + 1]) < d:
            tau_u *= math.exp(eps)
            for j in range(n):
                u[j] *= factor
            acc_b[1] += 1

        eps = step_g[2] * normals[s, 2 * n + 2]
        factor = math.exp(-0.5 * eps)
        d = shape_v * eps - rate_v * tau_v * math.expm1(eps)
        d += _rescale_loglik(obs, expct, beta, v, u, factor)
        if math.log(unifs[s, 2 * n + 2]) < d:
            tau_v *= math.exp(eps)
            for j in range(n):
                v[j] *= factor
            acc_b[2] += 1

        if record_every > 0 and (s + 1) % record_every == 0:
            out_scalar[pos, 0] = beta
            out_scalar[pos, 1] = tau_u
            out_scalar[pos, 2] = tau_v
            for j in range(n):
                out_u[pos, j] = u[j]
                out_v[pos, j] = v[j]
            pos += 1

    state[0] = beta
    state[1] = tau_u
    state[2] = tau_v
    out_pos[0] = pos


def constraint_residual(u, cvec):
    return float(np.dot(cvec, u))
