"""Unit HMM topology, decode graphs, GMM emissions and log-domain inference."""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import InfeasibleAlignmentError, UsageError
from .numerics import LOG_2PI, logsumexp

DEFAULT_SELF_LOOP = 0.5


@dataclass
class UnitFragment:
    """Three-state left-to-right HMM for one unit.

    ``arcs`` holds ``(src, dst, logp)`` with local state indices; ``dst`` is
    ``None`` for the exit arc leaving the last state.
    """

    unit_id: str
    arcs: list
    num_states: int = 3

    @property
    def states(self):
        return [(self.unit_id, i) for i in range(self.num_states)]


def build_unit_hmm(unit_id, self_loop_prob=DEFAULT_SELF_LOOP):
    if not 0.0 < self_loop_prob < 1.0:
        raise UsageError(f"self-loop probability {self_loop_prob} outside (0, 1)")
    loop, forward = np.log(self_loop_prob), np.log1p(-self_loop_prob)
    arcs = []
    for i in range(3):
        arcs.append((i, i, loop))
        arcs.append((i, i + 1 if i < 2 else None, forward))
    return UnitFragment(unit_id, arcs)


class DecodeGraph:
    """Finite-state graph over ``(unit_id, state_index)`` states, all weights in log domain."""

    def __init__(self, states, initial, arcs, final):
        self.states = list(states)
        n = len(self.states)
        self.initial = np.asarray(initial, dtype=np.float64)
        self.final = np.asarray(final, dtype=np.float64)
        if n == 0 or self.initial.shape != (n,) or self.final.shape != (n,):
            raise UsageError("graph weights do not match its state list")
        if arcs:
            src, dst, logp = zip(*arcs)
        else:
            src, dst, logp = (), (), ()
        self.arc_src = np.asarray(src, dtype=np.int64)
        self.arc_dst = np.asarray(dst, dtype=np.int64)
        self.arc_logp = np.asarray(logp, dtype=np.float64)

    def __len__(self):
        return len(self.states)

    @property
    def num_arcs(self):
        return len(self.arc_logp)

    @cached_property
    def log_transitions(self):
        n = len(self.states)
        trans = np.full((n, n), -np.inf)
        # duplicate arcs between the same pair of states add up
        for s, d, w in zip(self.arc_src, self.arc_dst, self.arc_logp):
            trans[s, d] = np.logaddexp(trans[s, d], w)
        return trans

    @cached_property
    def entry_mask(self):
        """True for states where a new unit instance begins (local state 0)."""
        return np.array([idx == 0 for _, idx in self.states])

    def outgoing_mass(self):
        """Probability mass leaving each state, including termination."""
        trans = self.log_transitions
        return np.exp(logsumexp(np.column_stack([trans, self.final]), axis=1))

    def check_stochastic(self, tol=1e-10):
        ok_out = np.allclose(self.outgoing_mass(), 1.0, atol=tol, rtol=0.0)
        ok_init = abs(np.exp(logsumexp(self.initial)) - 1.0) <= tol
        return bool(ok_out and ok_init)


def _add_fragment(fragment, offset, states, arcs):
    states.extend(fragment.states)
    exits = []
    for src, dst, logp in fragment.arcs:
        if dst is None:
            exits.append((offset + src, logp))
        else:
            arcs.append((offset + src, offset + dst, logp))
    return exits


def build_phone_loop(unit_ids, self_loop_prob=DEFAULT_SELF_LOOP):
    """Flat loop over units; exit mass is split uniformly over re-entry into
    each of the ``P`` units and termination."""
    unit_ids = list(unit_ids)
    if not unit_ids:
        raise UsageError("phone loop needs at least one unit")
    P = len(unit_ids)
    states, arcs, exits, entries = [], [], [], []
    for uid in unit_ids:
        offset = len(states)
        entries.append(offset)
        exits.extend(_add_fragment(build_unit_hmm(uid, self_loop_prob), offset, states, arcs))
    n = len(states)
    initial = np.full(n, -np.inf)
    initial[entries] = -np.log(P)
    final = np.full(n, -np.inf)
    share = -np.log(P + 1)
    for src, logp in exits:
        final[src] = logp + share
        arcs.extend((src, dst, logp + share) for dst in entries)
    return DecodeGraph(states, initial, arcs, final)


def build_alignment_graph(transcript, self_loop_prob=DEFAULT_SELF_LOOP):
    """Linear chain of unit HMMs following ``transcript``."""
    transcript = list(transcript)
    if not transcript:
        raise UsageError("alignment graph needs a non-empty transcript")
    states, arcs = [], []
    pending_exits = []
    for uid in transcript:
        offset = len(states)
        arcs.extend((src, offset, logp) for src, logp in pending_exits)
        pending_exits = _add_fragment(build_unit_hmm(uid, self_loop_prob), offset, states, arcs)
    n = len(states)
    initial = np.full(n, -np.inf)
    initial[0] = 0.0
    final = np.full(n, -np.inf)
    for src, logp in pending_exits:
        final[src] = logp
    return DecodeGraph(states, initial, arcs, final)


def gmm_terms(features, log_weights, means, log_vars):
    """Mixture log-likelihoods and per-component log-posteriors.

    Shapes: features ``(N, F)``, log_weights ``(M, K)``, means/log_vars
    ``(M, K, F)``. Returns ``(N, M)`` log-likelihoods, ``(N, M, K)``
    component log-posteriors and the ``(M, K, F)`` precisions. The
    quadratic form is expanded into matrix products.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != means.shape[-1]:
        raise UsageError(f"features {features.shape} do not match emission dim {means.shape[-1]}")
    M, K, F = means.shape
    prec = np.exp(-log_vars)
    scaled = means * prec
    const = log_weights - 0.5 * (
        LOG_2PI * F + log_vars.sum(-1) + np.einsum("mkf,mkf->mk", means, scaled)
    )
    quad = (features * features) @ prec.reshape(M * K, F).T
    quad -= 2.0 * (features @ scaled.reshape(M * K, F).T)
    comp = const.reshape(1, M * K) - 0.5 * quad
    comp = comp.reshape(len(features), M, K)
    # explicit loop: numpy reductions over a short trailing axis are slow
    top = comp[..., 0].copy()
    for k in range(1, K):
        np.maximum(top, comp[..., k], out=top)
    acc = np.zeros_like(top)
    for k in range(K):
        acc += np.exp(comp[..., k] - top)
    total = np.log(acc)
    total += top
    comp -= total[..., None]
    return total, comp, prec


def gmm_loglikes(features, log_weights, means, log_vars):
    """``(N, M)`` mixture log-likelihoods and ``(N, M, K)`` component log-posteriors."""
    total, comp, _ = gmm_terms(features, log_weights, means, log_vars)
    return total, comp


def per_frame_loglikes(features, units, states):
    """Log-likelihood of each frame for each ``(unit_id, state_index)`` in ``states``.

    ``units`` maps unit ids to :class:`~shmm.gsm.UnitParams`.
    """
    try:
        log_w = np.stack([units[u].log_weights[i] for u, i in states])
        means = np.stack([units[u].means[i] for u, i in states])
        log_vars = np.stack([units[u].log_vars[i] for u, i in states])
    except KeyError as err:
        raise UsageError(f"no parameters for unit {err.args[0]!r}") from None
    return gmm_loglikes(features, log_w, means, log_vars)


@dataclass
class StatePosteriors:
    """Frame-level state responsibilities of one utterance.

    ``assignment_kl`` is KL(q(v, Z) || p(v)) for the path distribution that
    produced ``gamma``; it is zero only when q equals the graph prior.
    """

    gamma: np.ndarray  # (N, |states|)
    log_evidence: float
    assignment_kl: float
    component_gamma: np.ndarray = None  # (N, |states|, K)


def _forward(loglikes, graph):
    trans = graph.log_transitions
    alpha = np.empty_like(loglikes)
    alpha[0] = graph.initial + loglikes[0]
    for n in range(1, len(loglikes)):
        alpha[n] = logsumexp(alpha[n - 1][:, None] + trans, axis=0) + loglikes[n]
    return alpha


def _backward(loglikes, graph):
    trans = graph.log_transitions
    beta = np.empty_like(loglikes)
    beta[-1] = graph.final
    for n in range(len(loglikes) - 2, -1, -1):
        beta[n] = logsumexp(trans + (loglikes[n + 1] + beta[n + 1])[None, :], axis=1)
    return beta


def _check_inputs(loglikes, graph):
    loglikes = np.asarray(loglikes, dtype=np.float64)
    if loglikes.ndim != 2 or loglikes.shape[1] != len(graph) or len(loglikes) == 0:
        raise UsageError(f"loglikes {loglikes.shape} do not match a graph of {len(graph)} states")
    return loglikes


def forward_backward(loglikes, graph, component_logpost=None):
    loglikes = _check_inputs(loglikes, graph)
    alpha = _forward(loglikes, graph)
    beta = _backward(loglikes, graph)
    log_evidence = logsumexp(alpha[-1] + graph.final)
    if not np.isfinite(log_evidence):
        raise InfeasibleAlignmentError(
            f"no path of length {len(loglikes)} through a graph of {len(graph)} states"
        )
    with np.errstate(invalid="ignore"):
        log_gamma = alpha + beta - log_evidence
    gamma = np.exp(np.where(np.isnan(log_gamma), -np.inf, log_gamma))
    gamma /= gamma.sum(axis=1, keepdims=True)
    expected = float(np.sum(gamma * np.where(gamma > 0, loglikes, 0.0)))
    comp = None
    if component_logpost is not None:
        comp = gamma[..., None] * np.exp(component_logpost)
    return StatePosteriors(gamma, float(log_evidence), max(expected - log_evidence, 0.0), comp)


def prior_posteriors(num_frames, graph, num_components=None):
    """Posteriors under the graph prior alone (flat emissions).

    Used as the initial responsibilities; component responsibilities are
    equal within each state. Its assignment KL is ``-log p(length N)``.
    """
    post = forward_backward(np.zeros((num_frames, len(graph))), graph)
    if num_components:
        post.component_gamma = np.repeat(post.gamma[..., None] / num_components, num_components, -1)
    return post


def posterior_chain(loglikes, graph):
    """Exact posterior over paths as a Markov chain.

    Returns ``(initial, transitions)``: ``initial[s] = q(s_0 = s)`` and
    ``transitions[n - 1, r, s] = q(s_n = s | s_{n-1} = r)``.
    """
    loglikes = _check_inputs(loglikes, graph)
    alpha = _forward(loglikes, graph)
    beta = _backward(loglikes, graph)
    log_evidence = logsumexp(alpha[-1] + graph.final)
    if not np.isfinite(log_evidence):
        raise InfeasibleAlignmentError("no feasible path")
    initial = np.exp(alpha[0] + beta[0] - log_evidence)
    trans = graph.log_transitions
    with np.errstate(invalid="ignore"):
        logt = trans[None] + (loglikes[1:] + beta[1:])[:, None, :] - beta[:-1, :, None]
    transitions = np.exp(np.where(np.isnan(logt), -np.inf, logt))
    sums = transitions.sum(-1, keepdims=True)
    transitions = np.divide(transitions, sums, out=np.zeros_like(transitions), where=sums > 0)
    return initial, transitions


def chain_posteriors(loglikes, graph, initial, transitions):
    """Marginals and assignment KL of an arbitrary Markov path distribution."""
    loglikes = _check_inputs(loglikes, graph)
    trans = graph.log_transitions
    gamma = np.empty_like(loglikes)
    gamma[0] = initial

    def xlogy(q, logp):
        return np.sum(np.where(q > 0, q * np.where(q > 0, logp, 0.0), 0.0))

    def xlogx(q):
        return np.sum(np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0))

    e_log_q = xlogx(initial)
    e_log_p = xlogy(initial, graph.initial)
    for n in range(1, len(loglikes)):
        cond = transitions[n - 1]
        xi = gamma[n - 1][:, None] * cond
        gamma[n] = xi.sum(0)
        e_log_q += xlogx(xi) - xlogx(gamma[n - 1])
        e_log_p += xlogy(xi, trans)
    e_log_p += xlogy(gamma[-1], graph.final)
    log_evidence = logsumexp(_forward(loglikes, graph)[-1] + graph.final)
    return StatePosteriors(gamma, float(log_evidence), float(e_log_q - e_log_p))


def viterbi(loglikes, graph):
    """Best state path.

    Returns ``(path, segments, log_prob)`` with ``segments`` a list of
    ``(unit_id, start, end)`` frame spans (end exclusive). Ties go to the
    lowest predecessor state index.
    """
    loglikes = _check_inputs(loglikes, graph)
    trans = graph.log_transitions
    N = len(loglikes)
    delta = graph.initial + loglikes[0]
    back = np.zeros((N, len(graph)), dtype=np.int64)
    for n in range(1, N):
        scores = delta[:, None] + trans
        back[n] = np.argmax(scores, axis=0)
        delta = scores[back[n], np.arange(len(graph))] + loglikes[n]
    final = delta + graph.final
    last = int(np.argmax(final))
    log_prob = float(final[last])
    if not np.isfinite(log_prob):
        raise InfeasibleAlignmentError(f"no path of length {N} through the graph")
    path = np.empty(N, dtype=np.int64)
    path[-1] = last
    for n in range(N - 1, 0, -1):
        path[n - 1] = back[n, path[n]]
    return path, path_segments(path, graph), log_prob


def path_segments(path, graph):
    entry = graph.entry_mask
    segments = []
    for n, s in enumerate(path):
        if n == 0 or (s != path[n - 1] and entry[s]):
            segments.append([graph.states[s][0], n, n + 1])
        else:
            segments[-1][2] = n + 1
    return [tuple(seg) for seg in segments]
