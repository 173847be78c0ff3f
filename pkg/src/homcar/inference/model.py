"""BYM model specification, MCMC fitting and posterior summaries."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from ..car import Kind, StructureMatrix, constraint_vector
from ..graph import GraphError, is_connected
from ..sampling import derive_seed, make_rng
from ..spectral import eigendecompose
from . import _kernel
from .diagnostics import monitored_units, split_rhat

log = logging.getLogger(__name__)

RHAT_THRESHOLD = 1.05


@dataclass(frozen=True)
class BymModelSpec:
    """Poisson log-linear model ``eta = beta0 + u + v`` with a flat intercept.

    ``u`` has precision ``tau_u * structure`` restricted to
    ``constraint' u = 0``; ``v`` is iid normal with precision ``tau_v``.
    Gamma priors are ``(shape, rate)``.
    """

    structure: StructureMatrix
    prior_tau_u: tuple[float, float] = (1.0, 5e-5)
    prior_tau_v: tuple[float, float] = (1.0, 5e-5)

    def __post_init__(self):
        if self.structure.kind not in (Kind.ICAR, Kind.HOMCAR):
            raise ValueError("the spatial effect must be ICAR or HomCAR")
        for a, b in (self.prior_tau_u, self.prior_tau_v):
            if not (a > 0 and b > 0):
                raise ValueError("gamma prior parameters must be positive")

    @property
    def spatial_kind(self) -> Kind:
        return self.structure.kind

    @property
    def constraint(self) -> np.ndarray:
        return constraint_vector(self.structure)

    @property
    def rank(self) -> int:
        return self.structure.dim - eigendecompose(self.structure).null_count


@dataclass(frozen=True)
class McmcConfig:
    chains: int = 4
    burn_in: int = 5000
    samples_per_chain: int = 5000
    thinning: int = 5
    seed: int = 1
    adaptation_target: float = 0.44
    adapt_interval: int = 50
    block: int = 1000

    def __post_init__(self):
        if self.chains < 2:
            raise ValueError("at least two chains are needed for convergence checks")
        if min(self.burn_in, self.samples_per_chain, self.thinning, self.adapt_interval, self.block) < 1:
            raise ValueError("MCMC settings must be positive")
        if not 0 < self.adaptation_target < 1:
            raise ValueError("adaptation_target must lie in (0, 1)")
        if self.samples_per_chain // self.thinning < 4:
            raise ValueError("too few retained draws per chain")

    @property
    def kept(self) -> int:
        return self.samples_per_chain // self.thinning


def _summ(x: np.ndarray) -> dict[str, np.ndarray]:
    """Mean, sd and central 95% interval over the leading (draw) axis."""
    q = np.quantile(x, [0.025, 0.975], axis=0)
    return {"mean": x.mean(axis=0), "sd": x.std(axis=0, ddof=1), "q025": q[0], "q975": q[1]}


@dataclass
class BymFit:
    """Retained posterior draws plus derived summaries.

    Draw arrays have a leading ``(chains, kept)`` shape.
    """

    unit_ids: tuple[str, ...]
    observed: np.ndarray
    expected: np.ndarray
    kind: Kind
    beta0: np.ndarray
    tau_u: np.ndarray
    tau_v: np.ndarray
    u: np.ndarray
    v: np.ndarray
    acceptance: dict[str, float] = field(default_factory=dict)
    rhat: dict[str, float] = field(default_factory=dict)
    max_constraint_residual: float = 0.0

    @property
    def chains(self) -> int:
        return self.beta0.shape[0]

    @property
    def eta(self) -> np.ndarray:
        return self.beta0[..., None] + self.u + self.v

    def flat(self, name: str) -> np.ndarray:
        x = self.eta if name == "eta" else getattr(self, name)
        return x.reshape((-1,) + x.shape[2:])

    @property
    def converged(self) -> bool:
        return all(r <= RHAT_THRESHOLD for r in self.rhat.values())

    @property
    def loglik(self) -> np.ndarray:
        """Pointwise Poisson log-likelihood, shape ``(draws, units)``."""
        return poisson_loglik(self.observed, self.expected, self.flat("eta"))

    def loglik_at_mean(self) -> np.ndarray:
        return poisson_loglik(self.observed, self.expected, self.flat("eta").mean(axis=0))

    def summary(self, name: str) -> dict[str, np.ndarray]:
        return _summ(self.flat(name))

    def eta_table(self) -> str:
        s = self.summary("eta")
        rows = ["unit_id,eta_mean,eta_sd,eta_q025,eta_q975"]
        for k, uid in enumerate(self.unit_ids):
            rows.append(",".join([uid] + [repr(float(s[c][k])) for c in ("mean", "sd", "q025", "q975")]))
        return "\n".join(rows) + "\n"

    def hyper_table(self) -> str:
        rows = ["parameter,mean,sd,q025,q975,rhat"]
        for name in ("beta0", "tau_u", "tau_v"):
            s = self.summary(name)
            vals = [repr(float(s[c])) for c in ("mean", "sd", "q025", "q975")]
            rows.append(",".join([name] + vals + [repr(self.rhat.get(name, float("nan")))]))
        return "\n".join(rows) + "\n"

    def draws_table(self) -> str:
        """Draw-major audit table: one row per retained draw."""
        eta = self.flat("eta")
        chain = np.repeat(np.arange(self.chains), self.beta0.shape[1])
        head = ["chain", "beta0", "tau_u", "tau_v"] + [f"eta[{u}]" for u in self.unit_ids]
        rows = [",".join(head)]
        b, tu, tv = self.flat("beta0"), self.flat("tau_u"), self.flat("tau_v")
        for d in range(eta.shape[0]):
            vals = [repr(float(b[d])), repr(float(tu[d])), repr(float(tv[d]))]
            rows.append(",".join([str(int(chain[d]))] + vals + [repr(float(x)) for x in eta[d]]))
        return "\n".join(rows) + "\n"


def poisson_loglik(observed, expected, eta) -> np.ndarray:
    O = np.asarray(observed, dtype=float)
    E = np.asarray(expected, dtype=float)
    eta = np.asarray(eta, dtype=float)
    return O * (np.log(E) + eta) - E * np.exp(eta) - gammaln(O + 1)


def posterior_mean_map(fit: BymFit, allow_unconverged: bool = False) -> np.ndarray:
    """Posterior mean of the log-risk of every unit, in graph order."""
    if not fit.converged and not allow_unconverged:
        raise RuntimeError(f"fit did not converge (rhat: {fit.rhat}); pass allow_unconverged=True")
    return fit.flat("eta").mean(axis=0)


SMOOTH_MODES = 20


def _kernel_inputs(model: BymModelSpec, observed):
    Q = model.structure
    M = Q.matrix.tocsr()
    M.sort_indices()
    dec = eigendecompose(Q)
    if dec.null_count != 1:
        raise GraphError("BYM fitting requires a connected graph")
    if Q.kind is Kind.HOMCAR:
        n = 1.0 / Q.sigma
    else:
        n = np.ones(Q.dim)
    c = model.constraint
    nbar = float(n.mean())
    g = n - nbar
    m = min(SMOOTH_MODES, dec.eigenvalues[dec.nonnull].size)
    phi = np.ascontiguousarray(dec.eigenvectors[:, dec.nonnull][:, :m].T)
    lam = dec.eigenvalues[dec.nonnull][:m].copy()
    psi = phi - np.outer(phi @ c / (c @ n), n)
    # rough Fisher information of the likelihood along each direction
    info = (psi**2) @ (np.asarray(observed, dtype=float) + 0.5)
    return {
        "indptr": M.indptr.astype(np.int64),
        "indices": M.indices.astype(np.int64),
        "qdata": M.data.astype(float),
        "qdiag": M.diagonal().astype(float),
        "nvec": n, "cvec": c, "gvec": g, "nbar": nbar,
        "cn": float(c @ n), "gg": float(g @ g),
        "phi": phi, "psi": np.ascontiguousarray(psi), "lam": lam, "info": info,
    }


def _initial_state(rng, O, E, k, n_units):
    beta = np.log((O.sum() + 0.5) / E.sum()) + rng.normal(0, 0.1)
    u = rng.normal(0, 0.05, n_units)
    u -= k["nvec"] * (k["cvec"] @ u) / k["cn"]
    v = rng.normal(0, 0.05, n_units)
    tau = np.exp(rng.uniform(np.log(5.0), np.log(50.0), 2))
    return np.array([beta, tau[0], tau[1]]), u, v


def _run_chain(O, E, model: BymModelSpec, cfg: McmcConfig, seed: int, k: dict):
    rng = make_rng(seed)
    n = len(O)
    state, u, v = _initial_state(rng, O, E, k, n)
    eta = state[0] + u + v
    mu = E * np.exp(eta)
    step_u = 2.4 / np.sqrt(state[1] * k["qdiag"] + mu)
    step_v = 2.4 / np.sqrt(state[2] + mu)
    step_w = 2.4 / np.sqrt(state[1] * k["qdiag"] + state[2])
    # steps for beta0 and the two log-precision rescaling moves
    step_g = np.array([2.4 / np.sqrt(mu.sum()), 0.5, 0.5])
    step_m = np.full(len(k["lam"]), 2.4)
    steps = (step_u, step_v, step_w, step_m, step_g)
    shape_u = model.prior_tau_u[0] + 0.5 * model.rank
    shape_v = model.prior_tau_v[0] + 0.5 * n
    rate_u, rate_v = model.prior_tau_u[1], model.prior_tau_v[1]
    kept = cfg.kept
    out_scalar = np.zeros((kept, 3))
    out_u = np.zeros((kept, n))
    out_v = np.zeros((kept, n))
    out_pos = np.zeros(1, dtype=np.int64)
    accs = tuple(np.zeros(len(x), dtype=np.int64) for x in steps)
    dummy = np.zeros((0, 0))
    width = 3 * n + 4 + 2 * len(k["lam"])

    def sweep(count, record_every, target=(dummy, dummy, dummy)):
        normals = rng.standard_normal((count, width))
        unifs = rng.random((count, width))
        gammas = np.column_stack([rng.standard_gamma(shape_u, count), rng.standard_gamma(shape_v, count)])
        _kernel.run_sweeps(
            count, k["indptr"], k["indices"], k["qdata"], k["qdiag"], O, E,
            k["nvec"], k["cvec"], k["gvec"], k["nbar"], k["cn"], k["gg"],
            model.prior_tau_u[0], rate_u, model.prior_tau_v[0], rate_v,
            k["phi"], k["psi"], k["lam"], k["info"],
            state, u, v, *steps, normals, unifs, gammas, *accs,
            record_every, *target, out_pos,
        )

    done = 0
    while done < cfg.burn_in:
        count = min(cfg.adapt_interval, cfg.burn_in - done)
        for a in accs:
            a[:] = 0
        sweep(count, 0)
        # acceptance-rate feedback on log step sizes; frozen after burn-in
        for step, a in zip(steps, accs):
            step *= np.exp(a / count - cfg.adaptation_target)
        done += count

    for a in accs:
        a[:] = 0
    done = 0
    total = kept * cfg.thinning
    while done < total:
        count = min(cfg.block * cfg.thinning, total - done)
        sweep(count, cfg.thinning, (out_scalar, out_u, out_v))
        done += count
    acc_u, acc_v, acc_w, acc_m, acc_g = accs
    rates = {
        "u": float(acc_u.mean() / total),
        "v": float(acc_v.mean() / total),
        "split": float(acc_w.mean() / total),
        "modes": float(acc_m.mean() / total) if len(acc_m) else float("nan"),
        "beta0": float(acc_g[0] / total),
        "rescale_u": float(acc_g[1] / total),
        "rescale_v": float(acc_g[2] / total),
    }
    return out_scalar, out_u, out_v, rates


def fit_bym(observed, expected, model: BymModelSpec, cfg: McmcConfig | None = None) -> BymFit:
    """Fit the BYM (or HomCAR-BYM) model by Metropolis-within-Gibbs.

    Each chain gets its own seed derived from ``cfg.seed`` and runs
    sequentially; results depend only on ``(cfg, data, model)``.
    """
    cfg = cfg or McmcConfig()
    O = np.asarray(observed, dtype=float)
    E = np.asarray(expected, dtype=float)
    n = model.structure.dim
    if O.shape != (n,) or E.shape != (n,):
        raise ValueError(f"observed and expected must have length {n}")
    if not np.all(E > 0):
        raise ValueError("expected counts must be positive")
    if np.any(O < 0) or np.any(O != np.round(O)):
        raise ValueError("observed counts must be non-negative integers")
    if not is_connected(model.structure.graph):
        raise GraphError("BYM fitting requires a connected graph")
    k = _kernel_inputs(model, O)

    results = [_run_chain(O, E, model, cfg, derive_seed(cfg.seed, ch), k) for ch in range(cfg.chains)]
    scal = np.stack([r[0] for r in results])
    fit = BymFit(
        unit_ids=model.structure.graph.unit_ids,
        observed=O, expected=E, kind=model.spatial_kind,
        beta0=scal[..., 0], tau_u=scal[..., 1], tau_v=scal[..., 2],
        u=np.stack([r[1] for r in results]),
        v=np.stack([r[2] for r in results]),
    )
    fit.acceptance = {key: float(np.mean([r[3][key] for r in results])) for key in results[0][3]}
    fit.max_constraint_residual = float(np.abs(fit.u @ k["cvec"]).max())
    fit.rhat = {"beta0": split_rhat(fit.beta0), "tau_u": split_rhat(fit.tau_u), "tau_v": split_rhat(fit.tau_v)}
    eta = fit.eta
    for i in monitored_units(n):
        fit.rhat[f"eta[{fit.unit_ids[i]}]"] = split_rhat(eta[..., i])
    if not fit.converged:
        log.warning("fit flagged as not converged: %s", {k: round(v, 3) for k, v in fit.rhat.items()})
    return fit
