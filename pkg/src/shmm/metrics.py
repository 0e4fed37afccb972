"""Equivalent phone error rate and boundary segmentation scores.

Alignments are plain dicts ``utt_id -> [(label, start, end), ...]`` with
frame indices, ``end`` exclusive.
"""

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from importlib import resources

from . import FormatError, UsageError

UNK = "unk"
IGNORE = "-"


def validate_segments(segments, hypothesis=False):
    """Check ordering and overlap; hypotheses must also be gap-free from frame 0."""
    prev_end = 0 if hypothesis else None
    for label, start, end in segments:
        if end <= start:
            raise UsageError(f"span {label!r} [{start}, {end}) is empty")
        if prev_end is not None:
            if start < prev_end:
                raise UsageError(f"span {label!r} at {start} overlaps the previous one")
            if hypothesis and start != prev_end:
                raise UsageError(f"gap before span {label!r} at frame {start}")
        prev_end = end


class PhoneMap(dict):
    """Fine phone -> reduced phone; ``None`` marks symbols dropped from scoring."""

    def reduce(self, symbols):
        out = []
        for sym in symbols:
            if sym not in self:
                out.append(sym)
                continue
            target = self[sym]
            if target is not None:
                out.append(target)
        return out


def parse_phone_map(lines, source="<phone map>"):
    pmap = PhoneMap()
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"{source}:{lineno}: expected 'fine reduced'")
        fine, reduced = parts
        if fine in pmap:
            raise FormatError(f"{source}:{lineno}: {fine!r} mapped twice")
        pmap[fine] = None if reduced == IGNORE else reduced
    return pmap


def load_phone_map(path):
    with open(path, encoding="utf-8") as fh:
        return parse_phone_map(fh, str(path))


def timit_phone_map():
    """The conventional TIMIT 61 -> 39 reduction (glottal stop dropped)."""
    text = resources.files("shmm").joinpath("data/timit_61_39.map").read_text("utf-8")
    return parse_phone_map(text.splitlines(), "timit_61_39.map")


def map_units_to_phones(hyp, ref):
    """Assign each hypothesis label the reference phone it overlaps most (corpus-wide)."""
    overlap = defaultdict(Counter)
    units = set()
    for utt, hsegs in hyp.items():
        if utt not in ref:
            continue
        rsegs = ref[utt]
        j = 0
        for label, hs, he in hsegs:
            units.add(label)
            while j < len(rsegs) and rsegs[j][2] <= hs:
                j += 1
            k = j
            while k < len(rsegs) and rsegs[k][1] < he:
                phone, rs, re_ = rsegs[k]
                frames = min(he, re_) - max(hs, rs)
                if frames > 0:
                    overlap[label][phone] += frames
                k += 1
    mapping = {}
    for unit in sorted(units):
        counts = overlap.get(unit)
        if not counts:
            mapping[unit] = UNK
            continue
        best = max(counts.values())
        mapping[unit] = min(p for p, c in counts.items() if c == best)
    return mapping


def levenshtein(ref, hyp):
    """Unit-cost edit distance with counts ``(distance, subs, ins, dels)``.

    The backtrace prefers match/substitution, then deletion, then insertion.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dist[i][0] = i
    for j in range(m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        row, prev = dist[i], dist[i - 1]
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            row[j] = min(prev[j - 1] + cost, prev[j] + 1, row[j - 1] + 1)
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            if dist[i][j] == dist[i - 1][j - 1] + cost:
                subs += cost
                i, j = i - 1, j - 1
                continue
        if i > 0 and dist[i][j] == dist[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return dist[n][m], subs, ins, dels


def collapse_repeats(symbols):
    out = []
    for sym in symbols:
        if not out or out[-1] != sym:
            out.append(sym)
    return out


@dataclass
class UtteranceScore:
    utt_id: str
    errors: int
    ref_length: int
    substitutions: int
    insertions: int
    deletions: int


@dataclass
class PerReport:
    per: float
    utterances: list = field(default_factory=list)
    mapping: dict = field(default_factory=dict)

    @property
    def errors(self):
        return sum(u.errors for u in self.utterances)

    @property
    def ref_length(self):
        return sum(u.ref_length for u in self.utterances)


def equivalent_per(hyp, ref, phone_map=None, collapse=True):
    """Phone error rate (percent) after majority-overlap unit->phone mapping.

    Mapping is computed on the fine reference labels; both sides are then
    reduced with ``phone_map`` (identity when ``None``).
    """
    missing = sorted(set(ref) ^ set(hyp))
    if missing:
        raise UsageError(f"utterances missing on one side: {', '.join(missing)}")
    mapping = map_units_to_phones(hyp, ref)
    pmap = phone_map if phone_map is not None else PhoneMap()
    scores = []
    for utt in sorted(ref):
        mapped = [mapping[label] for label, _, _ in hyp[utt]]
        if collapse:
            mapped = collapse_repeats(mapped)
        hyp_syms = pmap.reduce(mapped)
        ref_syms = pmap.reduce([label for label, _, _ in ref[utt]])
        d, s, i, dl = levenshtein(ref_syms, hyp_syms)
        scores.append(UtteranceScore(utt, d, len(ref_syms), s, i, dl))
    total = sum(u.ref_length for u in scores)
    if total == 0:
        raise UsageError("reference has no scorable phones")
    return PerReport(100.0 * sum(u.errors for u in scores) / total, scores, mapping)


def segment_boundaries(segments):
    points = set()
    for _, start, end in segments:
        points.add(start)
        points.add(end)
    return sorted(points)


def match_boundaries(hyp_points, ref_points, tolerance):
    """Greedy one-to-one matching, hypotheses taken left to right.

    Returns a list of ``(hyp, ref)`` pairs. Each hypothesis boundary takes
    the nearest still-unmatched reference boundary within ``tolerance``;
    equal distances go to the earlier reference boundary.
    """
    if tolerance < 0:
        raise UsageError("tolerance must be >= 0")
    used = set()
    pairs = []
    for h in sorted(hyp_points):
        best = None
        for r in ref_points:
            if r in used or abs(r - h) > tolerance:
                continue
            if best is None or abs(r - h) < abs(best - h):
                best = r
        if best is not None:
            used.add(best)
            pairs.append((h, best))
    return pairs


@dataclass
class BoundaryScore:
    recall: float
    precision: float
    f_score: float
    matched: int = 0
    num_ref: int = 0
    num_hyp: int = 0


def boundary_prf(hyp, ref, tolerance_frames=2):
    matched = n_ref = n_hyp = 0
    for utt in sorted(set(hyp) | set(ref)):
        hb = segment_boundaries(hyp.get(utt, []))
        rb = segment_boundaries(ref.get(utt, []))
        matched += len(match_boundaries(hb, rb, tolerance_frames))
        n_ref += len(rb)
        n_hyp += len(hb)
    recall = matched / n_ref if n_ref else 0.0
    precision = matched / n_hyp if n_hyp else 0.0
    f = 2 * recall * precision / (recall + precision) if recall + precision > 0 else 0.0
    return BoundaryScore(recall, precision, f, matched, n_ref, n_hyp)


def frame_accuracy(hyp, ref, mapping=None):
    """Fraction of reference frames whose (mapped) hypothesis label agrees."""
    if mapping is None:
        mapping = map_units_to_phones(hyp, ref)
    good = total = 0
    for utt, rsegs in ref.items():
        labels = {}
        for label, s, e in hyp.get(utt, []):
            for n in range(s, e):
                labels[n] = mapping.get(label, UNK)
        for phone, s, e in rsegs:
            total += e - s
            good += sum(1 for n in range(s, e) if labels.get(n) == phone)
    return good / total if total else 0.0


def format_report(per_report=None, boundaries=None, tsv=False):
    lines = []
    if tsv:
        header = ["utt_id"]
        if per_report is not None:
            header += ["errors", "ref_length", "sub", "ins", "del"]
        lines.append("\t".join(header))
        if per_report is not None:
            for u in per_report.utterances:
                lines.append(
                    f"{u.utt_id}\t{u.errors}\t{u.ref_length}\t{u.substitutions}\t{u.insertions}\t{u.deletions}"
                )
            lines.append(f"#eq.PER\t{per_report.per:.2f}")
        if boundaries is not None:
            lines.append(f"#recall\t{boundaries.recall:.4f}")
            lines.append(f"#precision\t{boundaries.precision:.4f}")
            lines.append(f"#f_score\t{boundaries.f_score:.4f}")
        return "\n".join(lines) + "\n"
    if per_report is not None:
        lines.append(f"eq.PER {per_report.per:.2f}")
    if boundaries is not None:
        lines.append(
            f"R {100 * boundaries.recall:.2f} P {100 * boundaries.precision:.2f} "
            f"F {100 * boundaries.f_score:.2f}"
        )
    if per_report is not None:
        lines.append("")
        for u in per_report.utterances:
            rate = 100.0 * u.errors / u.ref_length if u.ref_length else 0.0
            lines.append(
                f"{u.utt_id} {rate:.2f} ({u.errors}/{u.ref_length}; "
                f"S {u.substitutions} I {u.insertions} D {u.deletions})"
            )
    return "\n".join(lines) + "\n"
