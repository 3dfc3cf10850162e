"""Embedding-based evaluation: similarity, speaker verification EER/DET,
synthesized-speech detection ROC/AUC, and per-mark report aggregation.

Scores here are cosine similarities between analytic utterance embeddings;
the verification and detection procedures mirror standard score-and-threshold
speaker-verification practice at desk scale.
"""

from __future__ import annotations

import numpy as np

from .corpus import Corpus, CorpusConfig, Utterance, oracle_embed
from .errors import DataError

CONTEXT_VERIFICATION = "verification"
CONTEXT_DETECTION = "detection"


class ScoreSet:
    """Labeled similarity scores: label True = same-speaker / real."""

    def __init__(self, scores, labels, context: str = CONTEXT_VERIFICATION):
        self.scores = np.asarray(scores, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=bool)
        self.context = context
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError("scores and labels must be 1-D and aligned")

    def require_both_labels(self) -> None:
        if not self.labels.any() or self.labels.all():
            raise ValueError(
                "threshold metrics need at least one positive and one negative score"
            )

    def __len__(self) -> int:
        return len(self.scores)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for zero vectors")
    return float(np.dot(a, b) / (na * nb))


def speaker_centroid(embeddings) -> np.ndarray:
    embeddings = list(embeddings)
    if not embeddings:
        raise ValueError("cannot average an empty embedding set")
    return np.mean(np.stack(embeddings), axis=0)


def similarity_to_target(synth_embedding, target_centroid) -> float:
    return cosine_similarity(synth_embedding, target_centroid)


def aggregate_similarities(values) -> tuple[float, float]:
    """Mean and population standard deviation of a similarity collection."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("no similarities to aggregate")
    return float(arr.mean()), float(arr.std())


def similarity_matrix(synth_reps: dict[int, np.ndarray],
                      real_reps: dict[int, np.ndarray]) -> tuple[list[int], np.ndarray]:
    """Entry (i, j) = cosine(synth speaker i, real speaker j), ids sorted."""
    if set(synth_reps) != set(real_reps):
        raise ValueError("synthesized and real representations cover different speakers")
    ids = sorted(synth_reps)
    mat = np.empty((len(ids), len(ids)))
    for i, si in enumerate(ids):
        for j, sj in enumerate(ids):
            mat[i, j] = cosine_similarity(synth_reps[si], real_reps[sj])
    return ids, mat


def real_embeddings_by_speaker(corpus: Corpus) -> dict[int, list[np.ndarray]]:
    out: dict[int, list[np.ndarray]] = {sid: [] for sid in corpus.speakers}
    for u in corpus.utterances:
        out[u.speaker_id].append(oracle_embed(u, corpus.config))
    return out


def verification_scores(
    synth: list[tuple[int, np.ndarray]],
    real_by_speaker: dict[int, list[np.ndarray]],
    pairing_seed: int,
    same_ratio: float = 0.5,
) -> ScoreSet:
    """Pair every synthesized embedding with one random real enrollment.

    The enrollment speaker equals the target with probability ``same_ratio``
    (0.5 keeps same/different trials at the default 1:1 ratio); otherwise it
    is uniform over the other speakers. Label is positive iff speakers match.
    """
    if not synth:
        raise ValueError("no synthesized embeddings to score")
    speakers = sorted(real_by_speaker)
    for sid, utts in real_by_speaker.items():
        if not utts:
            raise DataError(f"speaker {sid} has no real utterances to enroll")
    if len(speakers) < 2:
        raise DataError("verification pairing needs at least two speakers")
    rng = np.random.default_rng(np.random.SeedSequence([int(pairing_seed), 4]))
    scores, labels = [], []
    for sid, emb in synth:
        if rng.random() < same_ratio:
            other = sid
        else:
            pool = [s for s in speakers if s != sid]
            other = pool[int(rng.integers(len(pool)))]
        enroll = real_by_speaker[other][int(rng.integers(len(real_by_speaker[other])))]
        scores.append(cosine_similarity(emb, enroll))
        labels.append(other == sid)
    return ScoreSet(scores, labels, CONTEXT_VERIFICATION)


def detection_scores(
    synth: list[tuple[int, np.ndarray]],
    real_by_speaker: dict[int, list[np.ndarray]],
    pairing_seed: int,
) -> ScoreSet:
    """Real-vs-synthesized detection scores against same-speaker enrollments.

    Every real utterance (label positive) is paired with a different real
    utterance of its own speaker; every synthesized utterance (label
    negative) with any real utterance of its target speaker.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(pairing_seed), 5]))
    scores, labels = [], []
    for sid in sorted(real_by_speaker):
        utts = real_by_speaker[sid]
        if len(utts) < 2:
            raise DataError(
                f"speaker {sid} needs >= 2 real utterances for detection pairing"
            )
        for i, emb in enumerate(utts):
            j = int(rng.integers(len(utts) - 1))
            if j >= i:
                j += 1
            scores.append(cosine_similarity(emb, utts[j]))
            labels.append(True)
    for sid, emb in synth:
        utts = real_by_speaker[sid]
        enroll = utts[int(rng.integers(len(utts)))]
        scores.append(cosine_similarity(emb, enroll))
        labels.append(False)
    return ScoreSet(scores, labels, CONTEXT_DETECTION)


# --- threshold metrics -----------------------------------------------------------

def det_curve(s: ScoreSet) -> list[tuple[float, float]]:
    """(FAR, FRR) operating points swept over all distinct score values.

    The operating rule accepts scores strictly above the threshold; a score
    equal to the threshold counts as a rejection (FRR side).
    """
    points, _ = _sweep_points(s)
    return [(far, frr) for far, frr, _ in points]


def _sweep_points(s: ScoreSet):
    """Staircase of (FAR, FRR, threshold) from (0, 1) down to (1, 0)."""
    s.require_both_labels()
    pos = np.sort(s.scores[s.labels])
    neg = np.sort(s.scores[~s.labels])
    values = np.unique(s.scores)[::-1]
    points = [(0.0, 1.0, float("inf"))]
    for v in values:
        far = float((neg >= v).sum()) / len(neg)
        frr = float((pos < v).sum()) / len(pos)
        points.append((far, frr, float(v)))
    return points, values


def _lower_hull(points):
    """Lower-left convex hull of (FAR, FRR) staircase points.

    Input arrives sorted by FAR ascending / FRR descending; the hull is the
    boundary of operating points achievable with randomized thresholds.
    """
    hull: list[tuple[float, float, float]] = []
    for p in points:
        while len(hull) >= 2:
            (x1, y1, _), (x2, y2, _) = hull[-2], hull[-1]
            cross = (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1)
            if cross <= 0:  # middle point on or above the chord: not on the hull
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def compute_eer(s: ScoreSet) -> tuple[float, float]:
    """Equal error rate via linear interpolation on the sweep's convex hull.

    Returns (eer, threshold). The hull interpolation reproduces the standard
    speaker-verification convention (randomized-threshold operating points);
    EER is always in [0, 0.5].
    """
    points, _ = _sweep_points(s)
    hull = _lower_hull(points)
    for i, (far, frr, thr) in enumerate(hull):
        if far == frr:
            return float(far), float(thr)
        if i + 1 < len(hull):
            far2, frr2, thr2 = hull[i + 1]
            d1, d2 = frr - far, frr2 - far2
            if d1 > 0 > d2:
                u = d1 / (d1 - d2)
                eer = far + u * (far2 - far)
                if np.isinf(thr):
                    thr = thr2
                if np.isinf(thr2):
                    thr2 = thr
                return float(eer), float(thr + u * (thr2 - thr))
    raise ValueError("DET hull never crosses the FAR == FRR diagonal")  # pragma: no cover


def roc_curve(s: ScoreSet) -> list[tuple[float, float]]:
    """(FPR, TPR) staircase points, thresholds swept over distinct scores."""
    points, _ = _sweep_points(s)
    return [(far, 1.0 - frr) for far, frr, _ in points]


def roc_auc(s: ScoreSet) -> float:
    """Area under the ROC curve by the rank statistic.

    AUC = (#(positive, negative) pairs with positive score higher, counting
    ties as half) / (P * N); 0.5 means synthesized speech is indistinguishable
    from real by this scorer.
    """
    s.require_both_labels()
    scores, labels = s.scores, s.labels
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    p = int(labels.sum())
    n = len(labels) - p
    u = ranks[labels].sum() - p * (p + 1) / 2.0
    return float(u / (p * n))


# --- report ------------------------------------------------------------------------

def synth_embeddings_at_mark(records: list[dict], mark: int,
                             corpus_cfg: CorpusConfig) -> list[tuple[int, np.ndarray]]:
    out = []
    for rec in records:
        if mark in rec["marks"]:
            for u in rec["marks"][mark]["synth"]:
                out.append((rec["speaker_id"], oracle_embed(u, corpus_cfg)))
    return out


def build_report(
    records: list[dict],
    corpus: Corpus,
    manifest_digest: str,
    pairing_seed: int,
    same_ratio: float = 0.5,
) -> dict:
    """Aggregate a task sweep into per-mark metrics plus similarity matrices.

    Every record must carry the same manifest hash (identical task sets are a
    precondition for comparing approaches).
    """
    if not records:
        raise ValueError("no task records to aggregate")
    hashes = {rec["manifest_hash"] for rec in records}
    if hashes != {manifest_digest}:
        raise DataError(
            f"task records carry manifest hashes {sorted(hashes)}, expected {manifest_digest}"
        )
    marks = sorted({m for rec in records for m in rec["marks"]})
    if not marks:
        raise ValueError("task records contain no marks")

    real_by_spk = real_embeddings_by_speaker(corpus)
    real_reps = {sid: speaker_centroid(embs) for sid, embs in real_by_spk.items()}

    per_mark = {}
    for mark in marks:
        synth = synth_embeddings_at_mark(records, mark, corpus.config)
        sims = [similarity_to_target(emb, real_reps[sid]) for sid, emb in synth]
        mean, std = aggregate_similarities(sims)
        ver = verification_scores(synth, real_by_spk, pairing_seed, same_ratio)
        det = detection_scores(synth, real_by_spk, pairing_seed)
        eer, thr = compute_eer(ver)

        by_speaker: dict[int, list[np.ndarray]] = {}
        for sid, emb in synth:
            by_speaker.setdefault(sid, []).append(emb)
        synth_reps = {sid: speaker_centroid(embs) for sid, embs in by_speaker.items()}
        ids, mat = similarity_matrix(synth_reps, {sid: real_reps[sid] for sid in synth_reps})

        support_losses = [rec["marks"][mark]["support_loss"] for rec in records
                          if mark in rec["marks"]
                          and np.isfinite(rec["marks"][mark]["support_loss"])]
        if not support_losses:  # speaker-encoding path records no support loss
            support_losses = [float("nan")]
        per_mark[mark] = {
            "similarity_mean": mean,
            "similarity_std": std,
            "eer": eer,
            "eer_threshold": thr,
            "roc_auc": roc_auc(det),
            "support_loss_mean": float(np.mean(support_losses)),
            "det_points": det_curve(ver),
            "roc_points": roc_curve(det),
            "speaker_ids": ids,
            "similarity_matrix": mat.tolist(),
            "diagonal_argmax_rate": float(np.mean(np.argmax(mat, axis=1) == np.arange(len(ids)))),
            "n_synth": len(synth),
        }

    return {
        "manifest_hash": manifest_digest,
        "marks": marks,
        "per_mark": per_mark,
        "n_tasks": len(records),
        "pairing_seed": pairing_seed,
        "embedding_note": (
            "synthesized-utterance embeddings come from the analytic oracle applied "
            "to generated features (mel + predicted durations/pitch/energy)"
        ),
    }
