"""Few-shot voice cloning: prepare embeddings for unseen speakers, fine-tune
the selected modules on a 5-shot support set, and synthesize the query text
at snapshots along the adaptation trajectory."""

from __future__ import annotations

import math

import numpy as np
import torch

from .corpus import Corpus, Utterance
from .errors import ConfigError, NumericError
from .episodes import TaskEpisode
from .metalearn import ModuleMask, gd_adapt, mask_adapt_names, supervised_loss_fn
from .model import (
    DTYPE,
    MODE_TABLE,
    ModelConfig,
    ModelParameters,
    batch_forward,
    make_batch,
)

DEFAULT_MARKS = (0, 5, 10, 20, 50, 100)

STRATEGY_ZERO = "zero"
STRATEGY_MEAN = "mean_of_train_rows"


def prepare_unseen(
    params: ModelParameters,
    test_speaker_ids,
    strategy: str = STRATEGY_ZERO,
) -> ModelParameters:
    """Replace the embedding table with fresh rows for the test speakers.

    Training rows are discarded from the store used at test time; all other
    partitions are carried over as the same tensor objects. Shared-embedding
    models transfer their single vector as-is and must not call this.
    """
    if params.mode != MODE_TABLE:
        raise ConfigError(
            "prepare_unseen applies to table mode only; a shared embedding transfers as-is"
        )
    ids = sorted(int(s) for s in test_speaker_ids)
    if not ids:
        raise ConfigError("need at least one test speaker id")
    old_table = params.tensors["spk.table"]
    if strategy == STRATEGY_ZERO:
        fresh = torch.zeros((len(ids), old_table.shape[1]), dtype=DTYPE)
    elif strategy == STRATEGY_MEAN:
        fresh = old_table.mean(dim=0, keepdim=True).repeat(len(ids), 1).detach()
    else:
        raise ConfigError(f"unknown unseen-embedding strategy {strategy!r}")
    tensors = {n: (fresh if n == "spk.table" else t) for n, t in params.tensors.items()}
    return ModelParameters(
        tensors=tensors, mode=MODE_TABLE, speaker_rows={sid: i for i, sid in enumerate(ids)}
    )


def adapt_to_task(
    cfg: ModelConfig,
    params: ModelParameters,
    task: TaskEpisode,
    corpus: Corpus,
    mask: ModuleMask,
    steps: int,
    lr: float,
    marks=DEFAULT_MARKS,
    clip_norm: float | None = 1.0,
):
    """Full-batch gradient descent on the support loss, with snapshots.

    Returns {mark: (parameter snapshot, support loss at that snapshot)} for
    every mark <= steps. Mark 0 is the un-adapted starting point; the text
    encoder is untouched throughout.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    support = [corpus.utterances[i] for i in task.support]
    batch = make_batch(support)
    loss_fn = supervised_loss_fn(cfg, params, batch)
    adapt_names = mask_adapt_names(params, mask)
    wanted = sorted(m for m in set(marks) if m <= steps)

    trajectory: dict[int, tuple[ModelParameters, float]] = {}
    work = {n: (t.detach().clone().requires_grad_(True) if n in adapt_names else t)
            for n, t in params.tensors.items()}

    def snapshot(step_no: int):
        tensors = {n: (work[n].detach().clone() if n in adapt_names else params.tensors[n])
                   for n in params.tensors}
        snap = params.replace_tensors(tensors)
        with torch.no_grad():
            loss = float(loss_fn(tensors))
        if not math.isfinite(loss):
            raise NumericError(f"non-finite support loss at adaptation step {step_no}")
        trajectory[step_no] = (snap, loss)

    if 0 in wanted:
        snapshot(0)
    for step in range(1, steps + 1):
        work = gd_adapt(work, loss_fn, adapt_names, lr, 1,
                        create_graph=False, clip_norm=clip_norm)
        work = {n: (work[n].detach().requires_grad_(True) if n in adapt_names else work[n])
                for n in work}
        if step in wanted:
            snapshot(step)
    return trajectory


def synthesize_query(
    cfg: ModelConfig,
    params: ModelParameters,
    task: TaskEpisode,
    corpus: Corpus,
    spk_vec: torch.Tensor | None = None,
) -> list[Utterance]:
    """Free-run synthesis of the query phoneme sequences.

    Uses the store row of the task's speaker unless an explicit speaker
    vector is given (the speaker-encoding path, which never touches the
    store). The outputs carry predicted durations/pitch/energy alongside the
    generated mel, shaped like real utterances so the embedding oracle
    applies directly.
    """
    if not task.query:
        raise ValueError("task has an empty query set")
    outputs: list[Utterance] = []
    with torch.no_grad():
        for qid in task.query:
            ref = corpus.utterances[qid]
            dummy = Utterance(
                speaker_id=task.speaker_id,
                phonemes=ref.phonemes,
                durations=np.ones(len(ref.phonemes), dtype=np.int64),
                pitch=np.zeros(len(ref.phonemes)),
                energy=np.zeros(len(ref.phonemes)),
                mel=np.zeros((len(ref.phonemes), cfg.n_mel_channels)),
            )
            batch = make_batch([dummy])
            if spk_vec is not None:
                vec = spk_vec.view(1, -1)
            else:
                vec = params.speaker_vector(task.speaker_id).view(1, -1)
            out = batch_forward(cfg, params.tensors, batch, vec, teacher_forced=False)
            n_frames = int(out.durations.sum())
            outputs.append(
                Utterance(
                    speaker_id=task.speaker_id,
                    phonemes=ref.phonemes.copy(),
                    durations=out.durations[0].numpy().astype(np.int64),
                    pitch=out.pitch_pred[0].numpy(),
                    energy=out.energy_pred[0].numpy(),
                    mel=out.mel_pred[0, :n_frames].numpy(),
                )
            )
    return outputs
