import numpy as np
import pytest

from shmm.formats import read_alignments, read_feature_archive, read_transcripts
from shmm.gsm import UnitParams, load_checkpoint
from shmm.metrics import validate_segments
from shmm.synthetic import SynthSpec, emit_utterance, generate_synthetic, write_synthetic

SMALL = SynthSpec(utterances_per_language=6, target_utterances=4)


def test_same_seed_gives_byte_identical_files(tmp_path):
    write_synthetic(generate_synthetic(SMALL, seed=5), tmp_path / "a")
    write_synthetic(generate_synthetic(SMALL, seed=5), tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    other = generate_synthetic(SMALL, seed=6)
    assert not np.array_equal(other.truth.m, generate_synthetic(SMALL, seed=5).truth.m)


def test_alignments_tile_and_respect_minimum_duration():
    corpus = generate_synthetic(SMALL, seed=1)
    for lang, alis in corpus.alignments.items():
        for utt, segs in alis.items():
            validate_segments(segs, hypothesis=True)
            assert segs[-1][2] == len(corpus.features[lang][utt])
            assert all(e - s >= 3 for _, s, e in segs)
            assert [p for p, _, _ in segs] == corpus.transcripts[lang][utt]


def test_written_files_read_back(tmp_path):
    corpus = generate_synthetic(SMALL, seed=2)
    paths = write_synthetic(corpus, tmp_path)
    assert set(paths) == {"L1", "L2", "target"}
    arc = read_feature_archive(paths["L1"] + ".sfea")
    assert arc.feature_dim == SMALL.feature_dim and len(arc) == 6
    assert read_transcripts(paths["L2"] + ".trans") == corpus.transcripts["L2"]
    assert read_alignments(paths["target"] + ".ali", hypothesis=True) == corpus.alignments["target"]
    truth = load_checkpoint(tmp_path / "truth.shmm")
    assert truth.unit_ids == corpus.truth.unit_ids
    assert len(truth.unit_ids) == 2 * 8 + 5


def test_single_phone_moments_match_generator():
    corpus = generate_synthetic(SynthSpec(num_components=1, utterances_per_language=1), seed=3)
    drawn = corpus.truth.unit_params("L1:p0")
    # tie the three states so every emitted frame comes from the same Gaussian
    params = UnitParams(
        np.repeat(drawn.log_weights[:1], 3, 0),
        np.repeat(drawn.means[:1], 3, 0),
        np.repeat(drawn.log_vars[:1], 3, 0),
    )
    rng = np.random.default_rng(4)
    frames = []
    while sum(len(f) for f in frames) < 10000:
        x, spans = emit_utterance(rng, ["p0"], {"p0": params}, 0.5)
        assert spans == [("p0", 0, len(x))] and len(x) >= 3
        frames.append(x)
    x = np.vstack(frames)
    n = len(x)
    mean, var = params.means[0, 0], params.variances[0, 0]
    se_mean = np.sqrt(var / n)
    se_var = var * np.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(x.mean(0) - mean) < 3 * se_mean)
    assert np.all(np.abs(x.var(0, ddof=1) - var) < 3 * se_var)
