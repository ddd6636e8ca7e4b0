"""Conversion evaluation: the analytic identity oracle, pair sampling for
homogeneity/diversity scores, and the equal-error rate with its DET curve.

On the synthetic corpus the generation rule adds the speaker tilt to every
mel frame, so subtracting the corpus-wide token pattern mean from the
time-averaged spectrogram recovers the tilt up to content-sampling noise.
That vector plays the role a pretrained speaker encoder's embedding would
play on real speech.
"""

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .corpus import CorpusManifest
from .errors import DataError


def oracle_identity(mel: np.ndarray, manifest: CorpusManifest) -> np.ndarray:
    """Time-averaged mel minus the corpus token pattern mean, float64."""
    if manifest.token_pattern_mean is None:
        raise DataError(
            "manifest has no token_pattern_mean; the identity oracle only "
            "exists for synthetic corpora")
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[1] != manifest.mel_bins:
        raise ValueError(
            f"expected mel (T, {manifest.mel_bins}), got {mel.shape}")
    if mel.shape[0] < 1:
        raise ValueError("empty mel")
    return mel.mean(axis=0) - manifest.token_pattern_mean


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for zero vectors")
    return float(a @ b / (na * nb))


@dataclass(frozen=True)
class ScoredPair:
    similarity: float
    label: str  # "positive" | "negative"
    provenance: tuple  # (source utt, target utt A, target utt B)

    def to_json(self) -> dict:
        return {"similarity": self.similarity, "label": self.label,
                "provenance": list(self.provenance)}

    @classmethod
    def from_json(cls, data: dict) -> "ScoredPair":
        return cls(float(data["similarity"]), data["label"],
                   tuple(data["provenance"]))


@dataclass
class PairPlan:
    """Pair constructions over conversions S(source -> target).

    positives: (source utt, target utt A, target utt B) with A, B distinct
    utterances of one target speaker; negatives: same shape with A, B from
    two different target speakers.
    """
    source_speakers: list
    target_speakers: list
    positives: list = field(default_factory=list)
    negatives: list = field(default_factory=list)

    def conversions(self) -> list:
        """Unique (source utt, target utt) jobs the plan requires."""
        jobs = set()
        for src, a, b in self.positives + self.negatives:
            jobs.add((src, a))
            jobs.add((src, b))
        return sorted(jobs)

    def to_json(self) -> dict:
        return {
            "source_speakers": self.source_speakers,
            "target_speakers": self.target_speakers,
            "positives": [list(p) for p in self.positives],
            "negatives": [list(p) for p in self.negatives],
        }

    @classmethod
    def from_json(cls, data: dict) -> "PairPlan":
        return cls(
            source_speakers=list(data["source_speakers"]),
            target_speakers=list(data["target_speakers"]),
            positives=[tuple(p) for p in data["positives"]],
            negatives=[tuple(p) for p in data["negatives"]],
        )


def sample_pairs(manifest: CorpusManifest, n_sources: int, n_targets: int,
                 n_pairs: int, seed: int) -> PairPlan:
    """Deterministic pair plan: n_pairs positives and n_pairs negatives over
    disjoint source/target speaker sets."""
    if n_sources < 1 or n_targets < 2 or n_pairs < 1:
        raise ValueError("need n_sources >= 1, n_targets >= 2, n_pairs >= 1")
    by_speaker = {}
    for entry in manifest.entries:
        by_speaker.setdefault(entry.speaker_id, []).append(entry.utt_id)
    speakers = sorted(by_speaker)
    if len(speakers) < n_sources + n_targets:
        raise DataError(
            f"need {n_sources + n_targets} distinct speakers for disjoint "
            f"source/target sets, corpus has {len(speakers)}")
    if any(len(by_speaker[s]) < 2 for s in speakers):
        raise DataError("every speaker needs at least 2 utterances")

    rng = np.random.default_rng([seed])
    chosen = rng.choice(len(speakers), size=n_sources + n_targets, replace=False)
    sources = [speakers[i] for i in chosen[:n_sources]]
    targets = [speakers[i] for i in chosen[n_sources:]]
    source_utts = [u for s in sources for u in by_speaker[s]]

    positives = []
    for _ in range(n_pairs):
        src = source_utts[rng.integers(len(source_utts))]
        tgt = targets[rng.integers(len(targets))]
        a, b = rng.choice(len(by_speaker[tgt]), size=2, replace=False)
        positives.append((src, by_speaker[tgt][a], by_speaker[tgt][b]))
    negatives = []
    for _ in range(n_pairs):
        src = source_utts[rng.integers(len(source_utts))]
        ta, tb = rng.choice(len(targets), size=2, replace=False)
        utt_a = by_speaker[targets[ta]][rng.integers(len(by_speaker[targets[ta]]))]
        utt_b = by_speaker[targets[tb]][rng.integers(len(by_speaker[targets[tb]]))]
        negatives.append((src, utt_a, utt_b))
    return PairPlan(sources, targets, positives, negatives)


def score_pairs(plan: PairPlan,
                identity_of: Callable[[str, str], np.ndarray]) -> list:
    """Score every planned pair; identity_of(source, target) must return the
    identity vector of the converted utterance."""
    scored = []
    for label, triples in (("positive", plan.positives),
                           ("negative", plan.negatives)):
        for src, a, b in triples:
            sim = cosine(identity_of(src, a), identity_of(src, b))
            scored.append(ScoredPair(sim, label, (src, a, b)))
    return scored


def psh(scores: Sequence[float]) -> float:
    """Mean similarity over positive pairs (higher is better)."""
    if len(scores) == 0:
        raise ValueError("empty score list")
    return float(np.mean(scores))


def psd(scores: Sequence[float]) -> float:
    """Mean similarity over negative pairs (lower is better)."""
    if len(scores) == 0:
        raise ValueError("empty score list")
    return float(np.mean(scores))


@dataclass
class DetCurve:
    points: list  # (threshold, fpr, fnr), threshold ascending

    def validate(self) -> None:
        for i, (_, fpr, fnr) in enumerate(self.points):
            if not (0.0 <= fpr <= 1.0 and 0.0 <= fnr <= 1.0):
                raise ValueError(f"point {i} has rates outside [0, 1]")
        for (t0, f0, n0), (t1, f1, n1) in zip(self.points, self.points[1:]):
            if not (t0 < t1 and f1 <= f0 and n1 >= n0):
                raise ValueError("DET curve is not monotone in threshold")


def eer(positive_scores: Sequence[float],
        negative_scores: Sequence[float]) -> tuple:
    """Equal-error rate under the accept-if-score>=threshold convention,
    with the full DET sweep.

    The crossing is linearly interpolated between adjacent sweep points when
    no threshold hits FPR = FNR exactly.  All crossing arithmetic runs on
    exact integer counts (rationals), so the result depends only on the
    ordering pattern of the scores, never on float rounding.
    """
    pos = np.asarray(positive_scores, dtype=np.float64)
    neg = np.asarray(negative_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need at least one positive and one negative score")
    n_pos, n_neg = pos.size, neg.size
    sweep = np.unique(np.concatenate([pos, neg]))
    thresholds = np.concatenate([[sweep[0] - 1.0], sweep, [sweep[-1] + 1.0]])
    counts = [(int((neg >= t).sum()), int((pos < t).sum())) for t in thresholds]
    points = [(float(t), kf / n_neg, kn / n_pos)
              for t, (kf, kn) in zip(thresholds, counts)]
    curve = DetCurve(points)
    curve.validate()

    rates = [(Fraction(kf, n_neg), Fraction(kn, n_pos)) for kf, kn in counts]
    value = None
    for (f0, n0), (f1, n1) in zip(rates, rates[1:]):
        d0, d1 = f0 - n0, f1 - n1
        if d0 == 0:
            value = f0
            break
        if d0 > 0 >= d1:
            if d1 == 0:
                value = f1
            else:
                s = d0 / (d0 - d1)
                value = f0 + s * (f1 - f0)
            break
    if value is None:
        # FPR runs 1 -> 0 while FNR runs 0 -> 1 across the sweep, so a sign
        # change always exists; this is unreachable on valid input.
        raise RuntimeError("no DET crossing found")
    return float(value), curve


def write_scored_pairs(path, pairs: Sequence[ScoredPair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair.to_json()) + "\n")


def read_scored_pairs(path) -> list:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                pairs.append(ScoredPair.from_json(json.loads(line)))
    return pairs


def write_det_csv(path, curve: DetCurve) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fpr", "fnr"])
        for t, fpr, fnr in curve.points:
            writer.writerow([f"{t:.10g}", f"{fpr:.10g}", f"{fnr:.10g}"])


def read_det_csv(path) -> DetCurve:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["threshold", "fpr", "fnr"]:
        raise DataError(f"{path}: not a DET curve file")
    return DetCurve([(float(t), float(f), float(n)) for t, f, n in rows[1:]])


def write_report(path, psh_value: float, psd_value: float,
                 eer_value: float, extra: dict = None) -> None:
    report = {"psh": psh_value, "psd": psd_value, "eer": eer_value}
    if extra:
        report.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1)
        fh.write("\n")


def corpus_mean_mel(corpus) -> np.ndarray:
    """Frame-weighted corpus mean mel frame, float64 (bins,)."""
    total = np.zeros(corpus.manifest.mel_bins, dtype=np.float64)
    frames = 0
    for utt_id in corpus.utt_ids:
        mel = corpus.load_utterance(utt_id).mel
        total += mel.sum(axis=0, dtype=np.float64)
        frames += mel.shape[0]
    return total / frames


def mean_mel_baseline_l1(corpus) -> float:
    """Mean absolute error of always predicting the corpus mean mel,
    averaged per utterance then across utterances (the same weighting the
    reconstruction loss uses)."""
    mean = corpus_mean_mel(corpus)
    per_utt = [
        float(np.abs(corpus.load_utterance(u).mel - mean).mean())
        for u in corpus.utt_ids
    ]
    return float(np.mean(per_utt))
