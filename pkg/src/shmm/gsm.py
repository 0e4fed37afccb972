"""Generalized subspace model: embeddings -> HMM-GMM parameters.

A unit with embedding ``h`` gets the super-vector ``psi = W^T h + b`` which
is split per HMM state into mixture logits, component means and component
log-variances. The variational posterior over ``(W, b, h_1..h_U)`` is a
single diagonal Gaussian stored as flat mean/log-variance vectors.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import FormatError, UsageError
from .numerics import kl_diag_gaussians

NUM_STATES = 3


@dataclass(frozen=True)
class ParameterLayout:
    num_components: int
    feature_dim: int
    num_states: int = NUM_STATES

    def __post_init__(self):
        if self.num_components < 1 or self.feature_dim < 1 or self.num_states < 1:
            raise UsageError(f"invalid layout {self}")

    @property
    def state_dim(self):
        k, f = self.num_components, self.feature_dim
        return k * 2 * f + (k - 1)

    @property
    def psi_dim(self):
        return self.num_states * self.state_dim

    def state_slices(self, state):
        """Return ``(logits, means, log_vars)`` slices of one state's block."""
        k, f = self.num_components, self.feature_dim
        start = state * self.state_dim
        logits = slice(start, start + k - 1)
        means = slice(logits.stop, logits.stop + k * f)
        log_vars = slice(means.stop, means.stop + k * f)
        return logits, means, log_vars


@dataclass
class UnitParams:
    """Standard HMM-GMM parameters of one unit, one row per state."""

    log_weights: np.ndarray  # (states, K)
    means: np.ndarray  # (states, K, F)
    log_vars: np.ndarray  # (states, K, F)

    @property
    def weights(self):
        return np.exp(self.log_weights)

    @property
    def variances(self):
        return np.exp(self.log_vars)


def compute_psi(W, b, h):
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if W.ndim != 2 or W.shape != (h.shape[-1], b.shape[0]):
        raise UsageError(f"W {W.shape} incompatible with h {h.shape} and b {b.shape}")
    return h @ W + b


def mixture_log_weights(logits):
    """Softmax over ``[logits, 0]`` along the last axis, in log domain."""
    full = np.concatenate([logits, np.zeros(logits.shape[:-1] + (1,))], axis=-1)
    vmax = full.max(axis=-1, keepdims=True)
    norm = vmax + np.log(np.exp(full - vmax).sum(axis=-1, keepdims=True))
    return full - norm


def split_psi(psi, layout):
    """Split ``psi`` of shape ``(..., D)`` into logits, means and log-variances.

    Returns arrays shaped ``(..., states, K-1)``, ``(..., states, K, F)`` and
    ``(..., states, K, F)``.
    """
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape[-1] != layout.psi_dim:
        raise UsageError(f"psi has length {psi.shape[-1]}, layout expects {layout.psi_dim}")
    k, f = layout.num_components, layout.feature_dim
    blocks = psi.reshape(psi.shape[:-1] + (layout.num_states, layout.state_dim))
    logits = blocks[..., : k - 1]
    means = blocks[..., k - 1 : k - 1 + k * f].reshape(blocks.shape[:-1] + (k, f))
    log_vars = blocks[..., k - 1 + k * f :].reshape(blocks.shape[:-1] + (k, f))
    return logits, means, log_vars


def join_psi(logits, means, log_vars):
    """Inverse of :func:`split_psi` (also used to pack gradients)."""
    lead = logits.shape[:-1]
    parts = [logits, means.reshape(lead + (-1,)), log_vars.reshape(lead + (-1,))]
    return np.concatenate(parts, axis=-1).reshape(lead[:-1] + (-1,))


def map_to_standard(psi, layout):
    logits, means, log_vars = split_psi(psi, layout)
    if logits.ndim != 2:
        raise UsageError("map_to_standard takes a single psi vector")
    return UnitParams(mixture_log_weights(logits), means.copy(), log_vars.copy())


@dataclass(frozen=True)
class SubspacePrior:
    sigma2_W: float = 1.0

    def __post_init__(self):
        if not self.sigma2_W > 0:
            raise UsageError("sigma2_W must be positive")


@dataclass
class SubspacePosterior:
    """Diagonal Gaussian q over ``[vec(W), b, h_1, ..., h_U]``.

    ``W`` has shape ``(S, D)`` and is stored row-major.
    """

    layout: ParameterLayout
    subspace_dim: int
    m: np.ndarray
    lam: np.ndarray
    unit_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64)
        self.lam = np.asarray(self.lam, dtype=np.float64)
        expected = self.shared_size + len(self.unit_ids) * self.subspace_dim
        if self.m.shape != (expected,) or self.lam.shape != (expected,):
            raise UsageError(f"posterior vectors must have length {expected}")
        if len(set(self.unit_ids)) != len(self.unit_ids):
            raise UsageError("duplicate unit identifiers")

    @classmethod
    def at_prior(cls, layout, subspace_dim, unit_ids=(), sigma2_W=1.0):
        if subspace_dim < 1:
            raise UsageError("subspace dimension must be >= 1")
        S, D = subspace_dim, layout.psi_dim
        size = S * D + D + len(unit_ids) * S
        lam = np.zeros(size)
        lam[: S * D] = np.log(sigma2_W)
        return cls(layout, S, np.zeros(size), lam, list(unit_ids))

    @property
    def psi_dim(self):
        return self.layout.psi_dim

    @property
    def shared_size(self):
        return self.subspace_dim * self.psi_dim + self.psi_dim

    @property
    def W_slice(self):
        return slice(0, self.subspace_dim * self.psi_dim)

    @property
    def b_slice(self):
        return slice(self.subspace_dim * self.psi_dim, self.shared_size)

    @property
    def embeddings_slice(self):
        return slice(self.shared_size, len(self.m))

    def unit_slice(self, unit_id):
        try:
            idx = self.unit_ids.index(unit_id)
        except ValueError:
            raise UsageError(f"unknown unit {unit_id!r}") from None
        start = self.shared_size + idx * self.subspace_dim
        return slice(start, start + self.subspace_dim)

    def unpack(self, theta):
        """Split a flat parameter vector into ``W (S, D)``, ``b (D,)``, ``H (U, S)``."""
        S, D = self.subspace_dim, self.psi_dim
        W = theta[self.W_slice].reshape(S, D)
        b = theta[self.b_slice]
        H = theta[self.embeddings_slice].reshape(len(self.unit_ids), S)
        return W, b, H

    def mean_psi(self):
        """``psi`` of every unit at the posterior mean, shape ``(U, D)``."""
        W, b, H = self.unpack(self.m)
        return H @ W + b

    def unit_params(self, unit_id):
        W, b, _ = self.unpack(self.m)
        return map_to_standard(compute_psi(W, b, self.m[self.unit_slice(unit_id)]), self.layout)

    def copy(self):
        return SubspacePosterior(
            self.layout, self.subspace_dim, self.m.copy(), self.lam.copy(), list(self.unit_ids)
        )


def sample_parameters(zeta, noise):
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] != zeta.m.shape[0]:
        raise UsageError(f"noise has length {noise.shape[-1]}, posterior has {zeta.m.shape[0]}")
    return zeta.m + np.exp(zeta.lam / 2.0) * noise


def kl_to_prior(zeta, prior):
    W, b, E = zeta.W_slice, zeta.b_slice, zeta.embeddings_slice
    kl = kl_diag_gaussians(zeta.m[W], zeta.lam[W], 0.0, np.log(prior.sigma2_W))
    kl += kl_diag_gaussians(zeta.m[b], zeta.lam[b], 0.0, 0.0)
    if E.stop > E.start:
        kl += kl_diag_gaussians(zeta.m[E], zeta.lam[E], 0.0, 0.0)
    return kl


def kl_gradient(zeta, prior):
    """Gradient of :func:`kl_to_prior` w.r.t. ``(m, lam)``."""
    prior_var = np.ones_like(zeta.m)
    prior_var[zeta.W_slice] = prior.sigma2_W
    return zeta.m / prior_var, 0.5 * (np.exp(zeta.lam) / prior_var - 1.0)


def add_unit(zeta, unit_id):
    if unit_id in zeta.unit_ids:
        raise UsageError(f"unit {unit_id!r} already present")
    S = zeta.subspace_dim
    return SubspacePosterior(
        zeta.layout,
        S,
        np.concatenate([zeta.m, np.zeros(S)]),
        np.concatenate([zeta.lam, np.zeros(S)]),
        zeta.unit_ids + [unit_id],
    )


def remove_unit(zeta, unit_id):
    sl = zeta.unit_slice(unit_id)
    keep = np.ones(len(zeta.m), dtype=bool)
    keep[sl] = False
    return SubspacePosterior(
        zeta.layout,
        zeta.subspace_dim,
        zeta.m[keep],
        zeta.lam[keep],
        [u for u in zeta.unit_ids if u != unit_id],
    )


# Checkpoint: "SHMM" | u32 version | u32 states, K, F, S | u32 n_units |
# n_units x (u32 byte length, utf-8 id) | m (f64 LE) | lam (f64 LE)
CHECKPOINT_MAGIC = b"SHMM"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, zeta):
    layout = zeta.layout
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(
            struct.pack(
                "<6I",
                CHECKPOINT_VERSION,
                layout.num_states,
                layout.num_components,
                layout.feature_dim,
                zeta.subspace_dim,
                len(zeta.unit_ids),
            )
        )
        for uid in zeta.unit_ids:
            raw = uid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(zeta.m.astype("<f8").tobytes())
        fh.write(zeta.lam.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    if len(data) < 28:
        raise FormatError(f"{path}: truncated header at byte {len(data)}")
    version, states, k, f, s, n_units = struct.unpack_from("<6I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    pos = 28
    unit_ids = []
    for _ in range(n_units):
        if pos + 4 > len(data):
            raise FormatError(f"{path}: truncated unit table at byte {pos}")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated unit id at byte {pos}")
        try:
            unit_ids.append(data[pos : pos + n].decode("utf-8"))
        except UnicodeDecodeError:
            raise FormatError(f"{path}: invalid unit id at byte {pos}") from None
        pos += n
    try:
        layout = ParameterLayout(k, f, states)
    except UsageError as err:
        raise FormatError(f"{path}: {err}") from None
    size = s * layout.psi_dim + layout.psi_dim + n_units * s
    if len(data) != pos + 16 * size:
        raise FormatError(f"{path}: expected {pos + 16 * size} bytes, found {len(data)}")
    m = np.frombuffer(data, dtype="<f8", count=size, offset=pos).astype(np.float64)
    lam = np.frombuffer(data, dtype="<f8", count=size, offset=pos + 8 * size).astype(np.float64)
    try:
        return SubspacePosterior(layout, s, m, lam, unit_ids)
    except UsageError as err:
        raise FormatError(f"{path}: {err}") from None
