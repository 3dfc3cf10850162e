"""End-to-end cloning evaluation: adapt each frozen task, synthesize the query
at every step mark, and aggregate the neural-evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, fields

from . import metrics
from .baselines import (
    APPROACH_META,
    APPROACH_MULTITASK,
    encode_speaker_reference,
    project_reference,
    validate_encoder_setting,
)
from .cloning import DEFAULT_MARKS, adapt_to_task, prepare_unseen, synthesize_query
from .corpus import Corpus
from .errors import ConfigError
from .episodes import TaskEpisode
from .metalearn import ModuleMask
from .model import MODE_TABLE, ModelConfig, ModelParameters


@dataclass(frozen=True)
class EvalConfig:
    tasks_per_speaker: int = 16
    shots: int = 5
    marks: tuple[int, ...] = DEFAULT_MARKS
    lr: float = 1e-2                      # matches the inner-loop step size
    clip_norm: float | None = 1.0
    unseen_strategy: str = "zero"
    manifest_seed: int = 1234
    pairing_seed: int = 999
    same_ratio: float = 0.5

    def __post_init__(self):
        if self.tasks_per_speaker < 1 or self.shots < 1:
            raise ConfigError("tasks_per_speaker and shots must be >= 1")
        if not self.marks or any(m < 0 for m in self.marks):
            raise ConfigError("marks must be non-negative")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        object.__setattr__(self, "marks", tuple(sorted(set(self.marks))))

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["marks"] = list(self.marks)
        return d


def check_eval_mask(approach: str, checkpoint_extras: dict, mask: ModuleMask) -> None:
    """Meta checkpoints must be fine-tuned with their meta-training mask."""
    if approach == APPROACH_META:
        trained = checkpoint_extras.get("mask")
        if trained != mask.tag():
            raise ConfigError(
                f"meta checkpoint was trained with mask {trained!r} but evaluation "
                f"requested mask {mask.tag()!r}; the adapted modules must match"
            )


def run_adaptive_sweep(
    cfg: ModelConfig,
    params: ModelParameters,
    episodes: list[TaskEpisode],
    corpus: Corpus,
    mask: ModuleMask,
    eval_cfg: EvalConfig,
    manifest_digest: str,
) -> list[dict]:
    """Speaker-adaptation sweep (meta or multitask checkpoints).

    Table-mode parameters are re-prepared with fresh rows for the test
    speakers; each task adapts independently from that prepared state.
    """
    if params.mode == MODE_TABLE:
        test_ids = sorted({ep.speaker_id for ep in episodes})
        base = prepare_unseen(params, test_ids, eval_cfg.unseen_strategy)
    else:
        base = params
    steps = max(eval_cfg.marks)
    records = []
    for t, ep in enumerate(episodes):
        ep.validate(corpus)
        trajectory = adapt_to_task(
            cfg, base, ep, corpus, mask, steps, eval_cfg.lr,
            marks=eval_cfg.marks, clip_norm=eval_cfg.clip_norm,
        )
        mark_results = {}
        for mark, (snap, support_loss) in trajectory.items():
            synth = synthesize_query(cfg, snap, ep, corpus)
            mark_results[mark] = {"support_loss": support_loss, "synth": synth}
        records.append(
            {
                "task_index": t,
                "speaker_id": ep.speaker_id,
                "support": list(ep.support),
                "query": list(ep.query),
                "manifest_hash": manifest_digest,
                "marks": mark_results,
            }
        )
    return records


def run_encoding_sweep(
    cfg: ModelConfig,
    params: ModelParameters,
    setting: str,
    episodes: list[TaskEpisode],
    corpus: Corpus,
    eval_cfg: EvalConfig,
    manifest_digest: str,
) -> list[dict]:
    """Speaker-encoding sweep: zero fine-tuning steps, mark 0 only.

    The support set's target utterances serve as the reference audios; their
    averaged embedding is projected into the conditioning vector. TTS
    parameters are never mutated on this path.
    """
    validate_encoder_setting(setting)
    records = []
    for t, ep in enumerate(episodes):
        ep.validate(corpus)
        refs = [corpus.utterances[i] for i in ep.support]
        emb = encode_speaker_reference(params, setting, refs, corpus.config)
        spk_vec = project_reference(params.tensors, emb.view(1, -1))[0].detach()
        synth = synthesize_query(cfg, params, ep, corpus, spk_vec=spk_vec)
        records.append(
            {
                "task_index": t,
                "speaker_id": ep.speaker_id,
                "support": list(ep.support),
                "query": list(ep.query),
                "manifest_hash": manifest_digest,
                "marks": {0: {"support_loss": float("nan"), "synth": synth}},
            }
        )
    return records


def run_adapt_eval(
    cfg: ModelConfig,
    params: ModelParameters,
    approach: str,
    checkpoint_extras: dict,
    episodes: list[TaskEpisode],
    corpus: Corpus,
    mask: ModuleMask,
    eval_cfg: EvalConfig,
    manifest_digest: str,
):
    """Dispatch on the checkpoint's approach tag; returns (records, report)."""
    if approach.startswith("spk_enc:"):
        setting = approach.split(":", 1)[1]
        records = run_encoding_sweep(cfg, params, setting, episodes, corpus,
                                     eval_cfg, manifest_digest)
    elif approach in (APPROACH_META, APPROACH_MULTITASK):
        check_eval_mask(approach, checkpoint_extras, mask)
        records = run_adaptive_sweep(cfg, params, episodes, corpus, mask,
                                     eval_cfg, manifest_digest)
    else:
        raise ConfigError(f"unknown approach tag {approach!r}")
    report = metrics.build_report(
        records, corpus, manifest_digest, eval_cfg.pairing_seed, eval_cfg.same_ratio
    )
    report["approach"] = approach
    report["mask"] = mask.tag()
    report["emb_mode"] = params.mode
    report["eval_config"] = eval_cfg.to_dict()
    return records, report
