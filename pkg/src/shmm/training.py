"""Variational Bayes training of the subspace HMM.

The objective alternates two updates: state responsibilities are set
exactly by forward-backward, and the Gaussian posterior over
``(W, b, h_u)`` follows stochastic reparameterized gradient ascent with
ADAM. Gradients are derived by hand through ``psi = W^T h + b`` and the
softmax/identity/exp mapping to mixture weights, means and variances.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import UsageError
from .gsm import join_psi, kl_gradient, kl_to_prior, mixture_log_weights, sample_parameters, split_psi
from .hmm import forward_backward, gmm_terms, prior_posteriors
from .numerics import AdamState, adam_step

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """The ELBO became non-finite during training."""


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray
    graph: object

    @property
    def num_frames(self):
        return len(self.features)


@dataclass
class TrainingConfig:
    num_samples: int = 10
    phi_update_interval: int = 1000
    pretrain_updates: int = 15000
    outer_iterations: int = 30
    minibatch_size: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.num_samples < 1 or self.minibatch_size < 1 or self.phi_update_interval < 1:
            raise UsageError("num_samples, minibatch_size and phi_update_interval must be >= 1")
        if self.pretrain_updates < 0 or self.outer_iterations < 0:
            raise UsageError("update counts must be non-negative")


@dataclass
class ElboReport:
    expected_loglike: float
    kl_term: float
    elbo: float
    scale: float = 1.0
    kl_theta: float = 0.0
    kl_assignments: float = 0.0


@dataclass
class RoundRecord:
    round: int
    report: ElboReport
    wall_time: float

    def log_line(self):
        r = self.report
        return f"{self.round}\t{r.elbo:.10g}\t{r.expected_loglike:.10g}\t{r.kl_term:.10g}\t{self.wall_time:.3f}"


def model_state_index(zeta):
    """Map ``(unit_id, state)`` to a column of the model-wide emission table."""
    n = zeta.layout.num_states
    return {(u, i): k * n + i for k, u in enumerate(zeta.unit_ids) for i in range(n)}


def emission_tables(zeta, theta):
    """Log-weights ``(M, K)``, means and log-variances ``(M, K, F)`` for one parameter sample."""
    W, b, H = zeta.unpack(theta)
    psi = H @ W + b
    logits, means, log_vars = split_psi(psi, zeta.layout)
    k, f = zeta.layout.num_components, zeta.layout.feature_dim
    return (
        mixture_log_weights(logits).reshape(-1, k),
        means.reshape(-1, k, f),
        log_vars.reshape(-1, k, f),
    )


@dataclass
class Batch:
    """Stacked frames of several utterances with their state occupancies."""

    features: np.ndarray  # (N, F)
    occupancy: np.ndarray  # (N, M) responsibilities summed onto model states
    scale: float
    assignment_kl: float


def occupancy_matrix(post, graph, state_index, num_model_states):
    cols = np.array([state_index[s] for s in graph.states], dtype=np.int64)
    occ = np.zeros((post.gamma.shape[0], num_model_states))
    np.add.at(occ.T, cols, post.gamma.T)
    return occ


def make_batch(utterances, phi, zeta, total_utterances=None):
    if not utterances:
        raise UsageError("empty batch")
    index = model_state_index(zeta)
    M = len(index)
    occ, feats, akl = [], [], 0.0
    for utt in utterances:
        try:
            post = phi[utt.utt_id]
        except KeyError:
            raise UsageError(f"no responsibilities for utterance {utt.utt_id!r}") from None
        if post.gamma.shape != (utt.num_frames, len(utt.graph)):
            raise UsageError(f"responsibilities of {utt.utt_id!r} do not match its graph")
        occ.append(occupancy_matrix(post, utt.graph, index, M))
        feats.append(utt.features)
        akl += post.assignment_kl
    total = len(utterances) if total_utterances is None else total_utterances
    return Batch(
        np.vstack(feats).astype(np.float64), np.vstack(occ), total / len(utterances), akl
    )


def _check_noise(zeta, noise_draws):
    noise_draws = np.atleast_2d(np.asarray(noise_draws, dtype=np.float64))
    if noise_draws.shape[1] != len(zeta.m):
        raise UsageError(f"noise draws must have length {len(zeta.m)}")
    return noise_draws


def batch_objective(batch, zeta, prior, noise_draws, with_gradient=True):
    """ELBO report and (optionally) its gradient w.r.t. ``(m, lam)`` for one batch."""
    noise_draws = _check_noise(zeta, noise_draws)
    L = len(noise_draws)
    layout = zeta.layout
    S, D = zeta.subspace_dim, layout.psi_dim
    k = layout.num_components
    X, occ = batch.features, batch.occupancy
    active = np.flatnonzero(occ.sum(0) > 0)
    occ_a = occ[:, active]
    M = occ.shape[1]

    data = 0.0
    grad_m = np.zeros_like(zeta.m)
    grad_lam = np.zeros_like(zeta.m)
    for eps in noise_draws:
        theta = sample_parameters(zeta, eps)
        log_w, means, log_vars = emission_tables(zeta, theta)
        if active.size == 0:
            continue
        mu = means[active]
        total, comp_post, prec = gmm_terms(X, log_w[active], mu, log_vars[active])
        data += float(np.sum(occ_a * total))
        if not with_gradient:
            continue
        w = occ_a[..., None] * np.exp(comp_post)
        counts = w.sum(0)
        g_logits = np.zeros((M, k - 1))
        g_means = np.zeros((M,) + means.shape[1:])
        g_log_vars = np.zeros_like(g_means)
        weights = np.exp(log_w[active])
        g_logits[active] = counts[:, : k - 1] - weights[:, : k - 1] * counts.sum(1, keepdims=True)
        flat_w = w.reshape(len(X), -1).T
        first = (flat_w @ X).reshape(mu.shape)
        second = (flat_w @ (X * X)).reshape(mu.shape)
        n_k = counts[..., None]
        g_means[active] = prec * (first - n_k * mu)
        g_log_vars[active] = 0.5 * (prec * (second - 2.0 * mu * first + n_k * mu * mu) - n_k)
        n_states = layout.num_states
        U = len(zeta.unit_ids)
        g_psi = join_psi(
            g_logits.reshape(U, n_states, k - 1),
            g_means.reshape((U, n_states) + means.shape[1:]),
            g_log_vars.reshape((U, n_states) + means.shape[1:]),
        )
        W, _, H = zeta.unpack(theta)
        g_theta = np.concatenate([(H.T @ g_psi).ravel(), g_psi.sum(0), (g_psi @ W.T).ravel()])
        grad_m += g_theta
        grad_lam += g_theta * eps
    scale = batch.scale
    expected = scale * data / L
    kl_theta = kl_to_prior(zeta, prior)
    kl_assign = scale * batch.assignment_kl
    kl = kl_theta + kl_assign
    report = ElboReport(expected, kl, expected - kl, scale, kl_theta, kl_assign)
    if not with_gradient:
        return report, None
    kl_m, kl_lam = kl_gradient(zeta, prior)
    grad_m = scale * grad_m / L - kl_m
    grad_lam = scale * grad_lam / L * 0.5 * np.exp(zeta.lam / 2.0) - kl_lam
    assert grad_m.shape == (S * D + D + len(zeta.unit_ids) * S,)
    return report, np.concatenate([grad_m, grad_lam])


def estimate_elbo(utterances, zeta, prior, phi, noise_draws, total_utterances=None):
    batch = make_batch(utterances, phi, zeta, total_utterances)
    return batch_objective(batch, zeta, prior, noise_draws, with_gradient=False)[0]


def zeta_gradient(utterances, zeta, prior, phi, noise_draws, total_utterances=None):
    """Gradient of :func:`estimate_elbo` as one vector ``[d/dm, d/dlam]``."""
    batch = make_batch(utterances, phi, zeta, total_utterances)
    return batch_objective(batch, zeta, prior, noise_draws)[1]


def average_loglikes(features, zeta, noise_draws, columns=None, chunk=4096):
    """Sample-averaged frame log-likelihoods over model states.

    Returns ``(N, C)`` log-likelihoods and ``(N, C, K)`` sample-averaged
    component responsibilities for the requested model-state columns.
    """
    noise_draws = _check_noise(zeta, noise_draws)
    X = np.asarray(features, dtype=np.float64)
    tables = [emission_tables(zeta, sample_parameters(zeta, eps)) for eps in noise_draws]
    if columns is None:
        columns = np.arange(tables[0][0].shape[0])
    k = zeta.layout.num_components
    ll = np.zeros((len(X), len(columns)))
    comp = np.zeros((len(X), len(columns), k))
    for start in range(0, len(X), chunk):
        rows = slice(start, start + chunk)
        for log_w, means, log_vars in tables:
            total, post, _ = gmm_terms(X[rows], log_w[columns], means[columns], log_vars[columns])
            ll[rows] += total
            comp[rows] += np.exp(post)
    L = len(noise_draws)
    return ll / L, comp / L


def update_phi(utterances, zeta, noise_draws, workers=1):
    """Exact responsibilities of every utterance given averaged sampled likelihoods."""
    index = model_state_index(zeta)
    noise_draws = _check_noise(zeta, noise_draws)

    def one(utt):
        cols = np.array([index[s] for s in utt.graph.states], dtype=np.int64)
        uniq, inverse = np.unique(cols, return_inverse=True)
        ll, comp = average_loglikes(utt.features, zeta, noise_draws, uniq)
        ll, comp = ll[:, inverse], comp[:, inverse]
        try:
            return forward_backward(ll, utt.graph, np.log(np.maximum(comp, 1e-300)))
        except ValueError as err:
            raise type(err)(f"utterance {utt.utt_id!r}: {err}") from None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            posts = list(pool.map(one, utterances))
    else:
        posts = [one(u) for u in utterances]
    return {u.utt_id: p for u, p in zip(utterances, posts)}


def initial_phi(utterances, num_components):
    return {
        u.utt_id: prior_posteriors(u.num_frames, u.graph, num_components) for u in utterances
    }


def corpus_report(phi, zeta, prior):
    """Full-corpus ELBO for responsibilities fresh from :func:`update_phi`."""
    evidence = sum(p.log_evidence for p in phi.values())
    akl = sum(p.assignment_kl for p in phi.values())
    kl_theta = kl_to_prior(zeta, prior)
    elbo = evidence - kl_theta
    return ElboReport(elbo + akl + kl_theta, akl + kl_theta, elbo, 1.0, kl_theta, akl)


def elbo_spread(utterances, zeta, prior, num_samples, rng, repeats=10):
    """Standard deviation of the corpus ELBO over repeated noise draws at fixed q."""
    values = []
    for _ in range(repeats):
        noise = rng.standard_normal((num_samples, len(zeta.m)))
        values.append(corpus_report(update_phi(utterances, zeta, noise), zeta, prior).elbo)
    return float(np.std(values, ddof=1))


@dataclass
class TrainingResult:
    zeta: object
    phi: dict
    trace: list = field(default_factory=list)

    @property
    def elbo_trace(self):
        return [r.report.elbo for r in self.trace]


def train(utterances, zeta0, prior, config, phi0=None, trainable=None, log_file=None, workers=1):
    """Run the alternating schedule.

    ``pretrain_updates`` gradient steps with the initial responsibilities,
    then ``outer_iterations`` rounds of one responsibility update followed
    by ``phi_update_interval`` gradient steps. A last responsibility update
    refreshes ``phi`` for the final posterior. ``trainable`` is a boolean
    mask over the posterior coordinates; frozen coordinates never change.
    """
    if not utterances:
        raise UsageError("empty corpus")
    rng = np.random.default_rng(config.seed)
    zeta = zeta0.copy()
    phi = dict(phi0) if phi0 is not None else initial_phi(utterances, zeta.layout.num_components)
    n = len(utterances)
    mask = np.ones(len(zeta.m), dtype=bool) if trainable is None else np.asarray(trainable, bool)
    free = np.concatenate([mask, mask])
    params = np.concatenate([zeta.m, zeta.lam])
    adam = AdamState.zeros(
        int(free.sum()),
        learning_rate=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        epsilon=config.epsilon,
    )
    batch_size = min(config.minibatch_size, n)
    index = model_state_index(zeta)
    occupancy = {}

    def refresh_occupancy():
        for u in utterances:
            occupancy[u.utt_id] = occupancy_matrix(phi[u.utt_id], u.graph, index, len(index))

    def step():
        nonlocal params
        picked = np.sort(rng.choice(n, size=batch_size, replace=False))
        chosen = [utterances[i] for i in picked]
        batch = Batch(
            np.vstack([u.features for u in chosen]).astype(np.float64),
            np.vstack([occupancy[u.utt_id] for u in chosen]),
            n / batch_size,
            sum(phi[u.utt_id].assignment_kl for u in chosen),
        )
        noise = rng.standard_normal((config.num_samples, len(zeta.m)))
        report, grad = batch_objective(batch, zeta, prior, noise)
        if not np.isfinite(report.elbo) or not np.all(np.isfinite(grad)):
            raise DivergenceError("non-finite ELBO or gradient")
        _, params[free] = adam_step(adam, params[free], grad[free])
        zeta.m = params[: len(zeta.m)].copy()
        zeta.lam = params[len(zeta.m) :].copy()

    trace = []
    start = time.perf_counter()
    steps_taken = 0
    refresh_occupancy()
    for _ in range(config.pretrain_updates):
        step()
        steps_taken += 1
    for rnd in range(config.outer_iterations + (1 if steps_taken or config.outer_iterations else 0)):
        noise = rng.standard_normal((config.num_samples, len(zeta.m)))
        phi = update_phi(utterances, zeta, noise, workers=workers)
        report = corpus_report(phi, zeta, prior)
        if not np.isfinite(report.elbo):
            raise DivergenceError(f"non-finite ELBO at round {rnd}")
        record = RoundRecord(rnd, report, time.perf_counter() - start)
        trace.append(record)
        logger.info("round %d elbo %.4f", rnd, report.elbo)
        if log_file is not None:
            log_file.write(record.log_line() + "\n")
        if rnd == config.outer_iterations:
            break
        refresh_occupancy()
        for _ in range(config.phi_update_interval):
            step()
    return TrainingResult(zeta, phi, trace)
