"""Central finite-difference oracle for the model gradient."""

import numpy as np

from slate_lab.core import ModelParams, Variant
from slate_lab.model import grad_log_likelihood, log_likelihood


def _with(params: ModelParams, name: str, idx, delta: float) -> ModelParams:
    arrays = {k: v.copy() for k, v in params.arrays().items()}
    arrays[name][idx] += delta
    return ModelParams.from_arrays(arrays, params.variant)


def fd_gradient(params: ModelParams, record, h: float = 1e-6) -> dict[str, np.ndarray]:
    out = {}
    for name, arr in params.arrays().items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            up = log_likelihood(_with(params, name, idx, h), record)
            dn = log_likelihood(_with(params, name, idx, -h), record)
            g[idx] = (up - dn) / (2 * h)
        out[name] = g
    return out


def analytic_gradient(params: ModelParams, record) -> dict[str, np.ndarray]:
    g = grad_log_likelihood(params, record)
    return {
        "phi": np.zeros_like(params.phi) if g.phi is None else g.phi,
        "Gamma": g.Gamma,
        "Psi": g.dense_Psi(params.num_items),
        "gamma": g.gamma,
        "alpha": g.alpha,
        "phi_scalar": np.array([0.0 if g.phi_scalar is None else g.phi_scalar]),
    }


def max_relative_error(params: ModelParams, record, h: float = 1e-6) -> float:
    fd = fd_gradient(params, record, h)
    an = analytic_gradient(params, record)
    a = np.concatenate([an[k].ravel() for k in fd])
    f = np.concatenate([fd[k].ravel() for k in fd])
    return float(np.linalg.norm(a - f) / max(np.linalg.norm(a) + np.linalg.norm(f), 1e-12))


def fixture_record(rng, params):
    from conftest import random_record

    if params.variant is Variant.RANK_ONLY:
        k = int(rng.integers(1, params.k_max + 1))
        return random_record(rng, params, k=k, click=int(rng.integers(1, k + 1)))
    return random_record(rng, params)
