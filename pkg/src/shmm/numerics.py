"""Log-domain reductions, diagonal Gaussians and the ADAM update."""

from dataclasses import dataclass

import numpy as np

from . import UsageError

LOG_2PI = float(np.log(2.0 * np.pi))


def logsumexp(values, axis=None):
    """Stable ``log(sum(exp(values)))``.

    With ``axis=None`` the input must be a non-empty vector and a float is
    returned. All ``-inf`` entries give ``-inf``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise UsageError("logsumexp of an empty input")
    if axis is None:
        vmax = values.max()
        if not np.isfinite(vmax):
            return float(vmax)
        return float(vmax + np.log(np.exp(values - vmax).sum()))
    vmax = values.max(axis=axis, keepdims=True)
    finite = np.isfinite(vmax)
    if finite.all():
        out = np.log(np.exp(values - vmax).sum(axis=axis, keepdims=True))
        out += vmax
    else:
        vmax = np.where(finite, vmax, 0.0)
        with np.errstate(divide="ignore"):
            out = np.log(np.exp(values - vmax).sum(axis=axis, keepdims=True)) + vmax
    return np.squeeze(out, axis=axis)


def _check_same_dim(*arrays):
    dims = {np.shape(a) for a in arrays}
    if len(dims) != 1:
        raise UsageError(f"dimension mismatch: {sorted(dims)}")


def diag_gaussian_logpdf(x, mean, log_var):
    """Log density of ``x`` under N(mean, diag(exp(log_var)))."""
    x, mean, log_var = (np.asarray(a, dtype=np.float64) for a in (x, mean, log_var))
    _check_same_dim(x, mean, log_var)
    if x.ndim != 1 or x.size == 0:
        raise UsageError("expected non-empty vectors")
    return float(-0.5 * np.sum(LOG_2PI + log_var + (x - mean) ** 2 * np.exp(-log_var)))


def kl_diag_gaussians(mean_q, log_var_q, mean_p, log_var_p):
    """KL(q || p) between two diagonal Gaussians given by means and log-variances.

    ``mean_p``/``log_var_p`` may be scalars broadcast over q's dimension.
    """
    mean_q = np.asarray(mean_q, dtype=np.float64)
    log_var_q = np.asarray(log_var_q, dtype=np.float64)
    mean_p = np.broadcast_to(np.asarray(mean_p, dtype=np.float64), mean_q.shape)
    log_var_p = np.broadcast_to(np.asarray(log_var_p, dtype=np.float64), mean_q.shape)
    _check_same_dim(mean_q, log_var_q, mean_p, log_var_p)
    kl = 0.5 * np.sum(
        np.exp(log_var_q - log_var_p)
        + (mean_p - mean_q) ** 2 * np.exp(-log_var_p)
        - 1.0
        + log_var_p
        - log_var_q
    )
    return max(float(kl), 0.0)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, dim, **hyper):
        return cls(np.zeros(dim), np.zeros(dim), **hyper)


def adam_step(state, params, gradient):
    """One ADAM ascent step. Mutates ``state`` and returns ``(state, new_params)``."""
    params = np.asarray(params, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    _check_same_dim(params, gradient, state.first_moment, state.second_moment)
    state.step_count += 1
    t = state.step_count
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * gradient
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * gradient**2
    m_hat = state.first_moment / (1.0 - state.beta1**t)
    v_hat = state.second_moment / (1.0 - state.beta2**t)
    new_params = params + state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return state, new_params
