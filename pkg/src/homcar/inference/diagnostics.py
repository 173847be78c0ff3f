import numpy as np


def split_rhat(draws: np.ndarray) -> float:
    """Split potential scale reduction factor for ``(chains, draws)`` samples."""
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2:
        raise ValueError("draws must have shape (chains, draws)")
    m, n = draws.shape
    half = n // 2
    if half < 2:
        raise ValueError("need at least 4 draws per chain")
    split = np.concatenate([draws[:, :half], draws[:, n - half:]], axis=0)
    means = split.mean(axis=1)
    within = split.var(axis=1, ddof=1).mean()
    between = half * means.var(ddof=1)
    if within == 0:
        return 1.0 if between == 0 else float("inf")
    var_plus = (half - 1) / half * within + between / half
    return float(np.sqrt(var_plus / within))


def monitored_units(n_units: int, count: int = 5) -> np.ndarray:
    """Evenly spaced unit indices whose log-risks are monitored."""
    return np.unique(np.linspace(0, n_units - 1, min(count, n_units)).round().astype(int))
