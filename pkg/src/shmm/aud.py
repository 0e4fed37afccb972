"""Two-phase acoustic unit discovery.

Phase one fits the subspace ``(W, b)`` on transcribed source languages
with forced-alignment graphs, one embedding per ``LANG:phone``. Phase two
drops those embeddings, adds fresh pseudo-phone embeddings and clusters
the untranscribed target speech through a phone loop, by default with the
subspace held fixed.
"""

import dataclasses
import io
from dataclasses import dataclass, field

import numpy as np

from . import UsageError
from .gsm import SubspacePosterior, SubspacePrior, add_unit, remove_unit
from .hmm import DEFAULT_SELF_LOOP, build_alignment_graph, build_phone_loop, gmm_loglikes, viterbi
from .training import TrainingConfig, Utterance, emission_tables, train

SHIPPED_SUBSPACE_DIMS = {1: 35, 2: 70, 3: 100}
DEFAULT_NUM_UNITS = 100


def default_subspace_dim(num_languages):
    if num_languages < 1:
        raise UsageError("need at least one source language")
    return SHIPPED_SUBSPACE_DIMS.get(num_languages, SHIPPED_SUBSPACE_DIMS[3])


def namespaced(language, phone):
    return f"{language}:{phone}"


@dataclass
class LabeledCorpus:
    language: str
    features: object  # mapping utt_id -> (N, F) frames
    transcripts: dict
    inventory: set = None

    def __post_init__(self):
        if self.inventory is None:
            self.inventory = {p for t in self.transcripts.values() for p in t}
        else:
            self.inventory = set(self.inventory)


@dataclass
class DiscoveryResult:
    unit_ids: list
    alignments: dict
    zeta: SubspacePosterior
    trace: list = field(default_factory=list)


def supervised_utterances(corpora, self_loop_prob=DEFAULT_SELF_LOOP):
    utterances = []
    for corpus in corpora:
        for utt_id, symbols in corpus.transcripts.items():
            unknown = [s for s in symbols if s not in corpus.inventory]
            if unknown:
                raise UsageError(f"{utt_id}: symbols {unknown} not in the {corpus.language} inventory")
            if utt_id not in corpus.features:
                raise UsageError(f"{utt_id}: no features")
            frames = np.asarray(corpus.features[utt_id], dtype=np.float64)
            if len(frames) < 3 * len(symbols):
                raise UsageError(
                    f"{utt_id}: {len(frames)} frames cannot align {len(symbols)} units"
                )
            graph = build_alignment_graph(
                [namespaced(corpus.language, s) for s in symbols], self_loop_prob
            )
            utterances.append(Utterance(f"{corpus.language}/{utt_id}", frames, graph))
    return utterances


def initial_posterior(layout, subspace_dim, unit_ids, prior, rng, init_scale=0.1, init_log_var=-4.0):
    """Starting point for subspace estimation.

    The prior itself is a saddle point (flipping the signs of ``W`` and all
    ``h`` leaves ``psi`` unchanged), so the mean of ``W`` starts at a small
    random value. Log-variances start at ``init_log_var``.
    """
    zeta = SubspacePosterior.at_prior(layout, subspace_dim, unit_ids, prior.sigma2_W)
    W = zeta.W_slice
    zeta.m[W] = rng.normal(0.0, init_scale, size=W.stop - W.start)
    zeta.lam[:] = init_log_var
    return zeta


def estimate_subspace(
    corpora,
    subspace_dim,
    layout,
    config=None,
    prior=None,
    self_loop_prob=DEFAULT_SELF_LOOP,
    init_scale=0.1,
    init_log_var=-4.0,
    log_file=None,
):
    """Train ``q(W, b, h)`` on labeled corpora; returns a :class:`TrainingResult`."""
    config = config or TrainingConfig()
    prior = prior or SubspacePrior()
    if subspace_dim < 1:
        raise UsageError("subspace dimension must be >= 1")
    if subspace_dim > layout.psi_dim:
        raise UsageError(f"subspace dimension {subspace_dim} exceeds psi dimension {layout.psi_dim}")
    seen = set()
    for c in corpora:
        if c.language in seen:
            raise UsageError(f"language {c.language!r} given twice")
        seen.add(c.language)
    # canonical order: the result does not depend on how the corpora are listed
    utterances = sorted(supervised_utterances(corpora, self_loop_prob), key=lambda u: u.utt_id)
    if not utterances:
        raise UsageError("no labeled utterances")
    unit_ids = sorted(namespaced(c.language, p) for c in corpora for p in c.inventory)
    rng = np.random.default_rng(config.seed + 7919)
    zeta0 = initial_posterior(layout, subspace_dim, unit_ids, prior, rng, init_scale, init_log_var)
    return train(utterances, zeta0, prior, config, log_file=log_file)


def unit_names(P):
    width = max(3, len(str(P)))
    return [f"au{i + 1:0{width}d}" for i in range(P)]


def prepare_discovery(subspace, P):
    if P < 1:
        raise UsageError("need at least one acoustic unit")
    zeta = subspace
    for uid in list(subspace.unit_ids):
        zeta = remove_unit(zeta, uid)
    for uid in unit_names(P):
        zeta = add_unit(zeta, uid)
    return zeta


def random_subspace(layout, subspace_dim, P, prior, rng, log_var=-10.0):
    """Control: ``W, b`` drawn once from the prior and held nearly fixed."""
    zeta = SubspacePosterior.at_prior(layout, subspace_dim, (), prior.sigma2_W)
    W, b = zeta.W_slice, zeta.b_slice
    zeta.m[W] = rng.normal(0.0, np.sqrt(prior.sigma2_W), size=W.stop - W.start)
    zeta.m[b] = rng.standard_normal(b.stop - b.start)
    zeta.lam[:] = log_var
    return prepare_discovery(zeta, P)


def _utterance_list(features):
    utts = []
    for utt_id in features:
        utts.append((utt_id, np.asarray(features[utt_id], dtype=np.float64)))
    if not utts:
        raise UsageError("empty corpus")
    return utts


def discover_units(
    features,
    subspace,
    config=None,
    prior=None,
    freeze_subspace=True,
    self_loop_prob=DEFAULT_SELF_LOOP,
    log_file=None,
    workers=1,
    restarts=1,
):
    """Cluster untranscribed ``features`` into the units of a prepared posterior.

    Fresh units start at the prior, so the clustering is only broken out of
    symmetry by sampling noise and can settle in a poor local optimum (two
    true units merged, another left empty). With ``restarts > 1`` the
    schedule is rerun with seeds ``seed, seed + 1, ...`` and the run with
    the highest final ELBO is kept; only its log lines are written.
    """
    config = config or TrainingConfig()
    prior = prior or SubspacePrior()
    unit_ids = list(subspace.unit_ids)
    if not unit_ids:
        raise UsageError("posterior has no units; call prepare_discovery first")
    graph = build_phone_loop(unit_ids, self_loop_prob)
    utterances = [Utterance(u, x, graph) for u, x in _utterance_list(features)]
    trainable = None
    if freeze_subspace:
        trainable = np.zeros(len(subspace.m), dtype=bool)
        trainable[subspace.embeddings_slice] = True
    if restarts < 1:
        raise UsageError("restarts must be >= 1")
    best, best_log = None, None
    for attempt in range(restarts):
        attempt_config = dataclasses.replace(config, seed=config.seed + attempt)
        buffer = io.StringIO()
        result = train(
            utterances, subspace, prior, attempt_config, trainable=trainable, log_file=buffer, workers=workers
        )
        score = result.trace[-1].report.elbo if result.trace else -np.inf
        if best is None or score > best[0]:
            best, best_log = (score, result), buffer.getvalue()
    result = best[1]
    if log_file is not None:
        log_file.write(best_log)
    alignments = decode_corpus(features, result.zeta, unit_ids, self_loop_prob)
    return DiscoveryResult(unit_ids, alignments, result.zeta, result.trace)


def decode_corpus(features, zeta, unit_ids=None, self_loop_prob=DEFAULT_SELF_LOOP):
    """Viterbi decoding through a phone loop at the posterior-mean parameters."""
    unit_ids = list(zeta.unit_ids if unit_ids is None else unit_ids)
    graph = build_phone_loop(unit_ids, self_loop_prob)
    log_w, means, log_vars = emission_tables(zeta, zeta.m)
    n = zeta.layout.num_states
    cols = np.array([zeta.unit_ids.index(u) * n + i for u, i in graph.states])
    log_w, means, log_vars = log_w[cols], means[cols], log_vars[cols]
    alignments = {}
    for utt_id, frames in _utterance_list(features):
        loglikes, _ = gmm_loglikes(frames, log_w, means, log_vars)
        _, segments, _ = viterbi(loglikes, graph)
        alignments[utt_id] = segments
    return alignments
