"""Synthetic corpora drawn from the subspace HMM itself.

A true subspace ``(W, b)`` and one embedding per phone are drawn from
their Gaussian priors, mapped to HMM-GMM parameters and used to emit
frames along left-to-right state sequences. The generator's truth is kept
so tests can measure how much of it training recovers.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .formats import write_alignments, write_feature_archive, write_inventory, write_transcripts
from .gsm import NUM_STATES, ParameterLayout, SubspacePosterior, map_to_standard, save_checkpoint

TRUTH_LOG_VAR = -60.0


@dataclass
class SynthSpec:
    subspace_dim: int = 4
    num_components: int = 2
    feature_dim: int = 8
    num_languages: int = 2
    phones_per_language: int = 8
    utterances_per_language: int = 200
    target_phones: int = 5
    target_utterances: int = 200
    min_phones: int = 3
    max_phones: int = 8
    sigma2_W: float = 0.5
    self_loop_prob: float = 0.5


@dataclass
class SynthCorpus:
    """Per-language features, transcripts and phone alignments plus the truth."""

    spec: SynthSpec
    truth: SubspacePosterior
    features: dict = field(default_factory=dict)  # lang -> {utt: frames}
    transcripts: dict = field(default_factory=dict)  # lang -> {utt: [phone, ...]}
    alignments: dict = field(default_factory=dict)  # lang -> {utt: [(phone, s, e)]}

    @property
    def source_languages(self):
        return [lang for lang in self.features if lang != "target"]

    def inventory(self, lang):
        return sorted({p for t in self.transcripts[lang].values() for p in t})


def _language_names(n):
    return [f"L{i + 1}" for i in range(n)]


def random_durations(rng, self_loop_prob, size):
    """Frames spent in each state: geometric with at least one frame."""
    return rng.geometric(1.0 - self_loop_prob, size=size)


def emit_utterance(rng, phones, params, self_loop_prob):
    """Sample frames for a phone sequence; returns ``(frames, spans)``."""
    frames, spans, t = [], [], 0
    for phone in phones:
        unit = params[phone]
        start = t
        for state, dur in enumerate(random_durations(rng, self_loop_prob, NUM_STATES)):
            comps = rng.choice(len(unit.log_weights[state]), size=dur, p=unit.weights[state])
            mean = unit.means[state][comps]
            std = np.exp(0.5 * unit.log_vars[state][comps])
            frames.append(mean + std * rng.standard_normal(mean.shape))
            t += dur
        spans.append((phone, start, t))
    return np.vstack(frames), spans


def _phone_sequence(rng, inventory, length):
    seq = [inventory[rng.integers(len(inventory))]]
    while len(seq) < length:
        nxt = inventory[rng.integers(len(inventory))]
        if nxt != seq[-1] or len(inventory) == 1:
            seq.append(nxt)
    return seq


def generate_synthetic(spec=None, seed=0):
    spec = spec or SynthSpec()
    rng = np.random.default_rng(seed)
    layout = ParameterLayout(spec.num_components, spec.feature_dim)
    S, D = spec.subspace_dim, layout.psi_dim
    langs = _language_names(spec.num_languages)
    unit_ids = [f"{lang}:p{j}" for lang in langs for j in range(spec.phones_per_language)]
    unit_ids += [f"target:t{j}" for j in range(spec.target_phones)]
    W = rng.normal(0.0, np.sqrt(spec.sigma2_W), size=(S, D))
    b = rng.standard_normal(D)
    H = rng.standard_normal((len(unit_ids), S))
    m = np.concatenate([W.ravel(), b, H.ravel()])
    truth = SubspacePosterior(layout, S, m, np.full(m.shape, TRUTH_LOG_VAR), unit_ids)
    psi = H @ W + b
    params = {u: map_to_standard(p, layout) for u, p in zip(unit_ids, psi)}
    corpus = SynthCorpus(spec, truth)
    plan = [(lang, spec.utterances_per_language) for lang in langs]
    plan.append(("target", spec.target_utterances))
    for lang, count in plan:
        inventory = [u.split(":", 1)[1] for u in unit_ids if u.startswith(lang + ":")]
        feats, trans, alis = {}, {}, {}
        for i in range(count):
            utt = f"{lang}_{i:04d}"
            phones = _phone_sequence(
                rng, inventory, int(rng.integers(spec.min_phones, spec.max_phones + 1))
            )
            frames, spans = emit_utterance(
                rng, phones, {p: params[f"{lang}:{p}"] for p in set(phones)}, spec.self_loop_prob
            )
            feats[utt] = frames.astype(np.float32)
            trans[utt] = phones
            alis[utt] = spans
        corpus.features[lang] = feats
        corpus.transcripts[lang] = trans
        corpus.alignments[lang] = alis
    return corpus


def write_synthetic(corpus, out_dir):
    """Write ``<lang>.sfea/.trans/.ali/.units`` for every language and ``truth.shmm``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for lang in corpus.features:
        base = os.path.join(out_dir, lang)
        write_feature_archive(base + ".sfea", corpus.features[lang], corpus.spec.feature_dim)
        write_transcripts(base + ".trans", corpus.transcripts[lang])
        write_alignments(base + ".ali", corpus.alignments[lang])
        write_inventory(base + ".units", corpus.inventory(lang))
        paths[lang] = base
    save_checkpoint(os.path.join(out_dir, "truth.shmm"), corpus.truth)
    return paths
