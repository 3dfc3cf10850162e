"""K-shot episode construction and frozen evaluation-task manifests."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus
from .errors import DataError, SamplingError


@dataclass(frozen=True)
class TaskEpisode:
    """One task: a support set to adapt on and a query set to score on.

    Support and query hold utterance ids (positions in ``corpus.utterances``),
    all belonging to ``speaker_id``, with no overlap.
    """

    speaker_id: int
    support: tuple[int, ...]
    query: tuple[int, ...]

    def __post_init__(self):
        if set(self.support) & set(self.query):
            raise ValueError("support and query sets overlap")

    def validate(self, corpus: Corpus) -> None:
        for i in (*self.support, *self.query):
            if corpus.utterances[i].speaker_id != self.speaker_id:
                raise ValueError(
                    f"utterance {i} belongs to speaker "
                    f"{corpus.utterances[i].speaker_id}, episode says {self.speaker_id}"
                )


def sample_episode(corpus: Corpus, k: int, q: int, rng: np.random.Generator) -> TaskEpisode:
    """Sample a speaker uniformly, then k+q of their utterances without replacement."""
    by_speaker = corpus.speaker_utterance_ids()
    speaker_ids = sorted(by_speaker)
    sid = speaker_ids[int(rng.integers(len(speaker_ids)))]
    pool = by_speaker[sid]
    if len(pool) < k + q:
        raise SamplingError(
            f"speaker {sid} has {len(pool)} utterances; episode needs {k + q}"
        )
    picked = rng.choice(np.asarray(pool), size=k + q, replace=False)
    return TaskEpisode(
        speaker_id=sid,
        support=tuple(int(v) for v in picked[:k]),
        query=tuple(int(v) for v in picked[k:]),
    )


def build_eval_tasks(
    corpus: Corpus, tasks_per_speaker: int, k: int, seed: int
) -> list[TaskEpisode]:
    """Exactly tasks_per_speaker single-query episodes per speaker, seeded.

    Each task's randomness comes from a (seed, speaker, task) derived stream
    so construction could run speaker-parallel without changing results.
    """
    by_speaker = corpus.speaker_utterance_ids()
    episodes: list[TaskEpisode] = []
    for sid in sorted(by_speaker):
        pool = np.asarray(by_speaker[sid])
        if len(pool) < k + 1:
            raise SamplingError(
                f"speaker {sid} has {len(pool)} utterances; evaluation needs {k + 1}"
            )
        for t in range(tasks_per_speaker):
            rng = np.random.default_rng(np.random.SeedSequence([seed, sid, t]))
            picked = rng.choice(pool, size=k + 1, replace=False)
            episodes.append(
                TaskEpisode(
                    speaker_id=sid,
                    support=tuple(int(v) for v in picked[:k]),
                    query=(int(picked[k]),),
                )
            )
    return episodes


def save_manifest(episodes: list[TaskEpisode], seed: int, path: str) -> None:
    """Freeze episodes to a JSONL manifest (byte-stable for identical inputs)."""
    lines = []
    for ep in episodes:
        lines.append(
            '{"speaker_id":%d,"support":%s,"query":%s,"k":%d,"q":%d,"seed":%d}'
            % (
                ep.speaker_id,
                json.dumps(list(ep.support)),
                json.dumps(list(ep.query)),
                len(ep.support),
                len(ep.query),
                seed,
            )
        )
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_manifest(path: str) -> list[TaskEpisode]:
    episodes = []
    try:
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    ep = TaskEpisode(
                        speaker_id=int(rec["speaker_id"]),
                        support=tuple(int(v) for v in rec["support"]),
                        query=tuple(int(v) for v in rec["query"]),
                    )
                except (KeyError, TypeError, ValueError) as e:
                    raise DataError(f"{path}:{lineno}: bad manifest record: {e}") from e
                episodes.append(ep)
    except OSError as e:
        raise DataError(f"{path}: cannot read: {e}") from e
    if not episodes:
        raise DataError(f"{path}: empty manifest")
    return episodes


def manifest_hash(path: str) -> str:
    """Identity of a frozen task set; reports sharing it saw identical tasks."""
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
