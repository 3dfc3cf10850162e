"""Module-selective MAML: inner-loop adaptation with a frozen text encoder,
second-order (or first-order) meta-updates of the whole model.

The engine is generic: it adapts any flat ``name -> tensor`` parameter dict
through differentiable gradient-descent steps on a caller-supplied loss
closure, so its correctness can be checked on tiny analytic models with
finite differences. The TTS-facing operations wrap it with the
ModelParameters partition scheme and the module mask.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, fields

import numpy as np
import torch

from . import model as M
from .checkpoint import save_checkpoint
from .corpus import Corpus
from .episodes import TaskEpisode, sample_episode
from .errors import ConfigError, NumericError
from .model import (
    Batch,
    LossBreakdown,
    ModelConfig,
    ModelParameters,
    PARTITION_DECODER,
    PARTITION_ENCODER,
    PARTITION_SPEAKER,
    PARTITION_VARIANCE,
    batch_forward,
    batch_loss,
    make_batch,
    partition_of,
    resolve_speaker_vecs_from,
)

ORDER_SECOND = "second"
ORDER_FIRST = "first"


@dataclass(frozen=True)
class ModuleMask:
    """Which partitions the inner loop / fine-tuning may update.

    The text encoder is never adaptable (no flag exists for it), and the
    variance adaptor or decoder are only ever tuned together with the
    speaker embedding.
    """

    adapt_emb: bool = True
    adapt_va: bool = False
    adapt_dec: bool = False

    def __post_init__(self):
        if (self.adapt_va or self.adapt_dec) and not self.adapt_emb:
            raise ConfigError(
                "adapt_emb must be set whenever the variance adaptor or decoder is adapted"
            )

    def partitions(self) -> set[str]:
        out = set()
        if self.adapt_emb:
            out.add(PARTITION_SPEAKER)
        if self.adapt_va:
            out.add(PARTITION_VARIANCE)
        if self.adapt_dec:
            out.add(PARTITION_DECODER)
        return out

    def tag(self) -> str:
        parts = [n for n, on in (("emb", self.adapt_emb), ("va", self.adapt_va),
                                 ("dec", self.adapt_dec)) if on]
        return "+".join(parts) if parts else "none"

    @classmethod
    def from_tag(cls, tag: str) -> "ModuleMask":
        parts = set(tag.split("+")) if tag and tag != "none" else set()
        unknown = parts - {"emb", "va", "dec"}
        if unknown:
            raise ConfigError(f"unknown module mask parts {sorted(unknown)} in {tag!r}")
        return cls(adapt_emb="emb" in parts, adapt_va="va" in parts, adapt_dec="dec" in parts)


@dataclass(frozen=True)
class MetaConfig:
    alpha: float = 1e-2            # inner step size
    beta: float = 1e-3             # meta step size
    inner_steps: int = 5           # N
    tasks_per_step: int = 8        # M
    order: str = ORDER_SECOND
    total_meta_steps: int = 2000   # desk-scale stand-in for a long schedule
    clip_norm: float | None = 1.0  # global-norm clip in both loops; None disables
    outer_optimizer: str = "sgd"   # "sgd" follows the plain meta-update; "adam" optional
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.alpha <= 0 or self.beta < 0:
            raise ConfigError("alpha must be > 0 and beta >= 0")
        if self.inner_steps < 1 or self.tasks_per_step < 1:
            raise ConfigError("inner_steps and tasks_per_step must be >= 1")
        if self.order not in (ORDER_SECOND, ORDER_FIRST):
            raise ConfigError(f"order must be 'second' or 'first', got {self.order!r}")
        if self.outer_optimizer not in ("sgd", "adam"):
            raise ConfigError("outer_optimizer must be 'sgd' or 'adam'")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or None")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# --- generic differentiable engine ---------------------------------------------

def clip_scale(grads: list[torch.Tensor], clip_norm: float | None) -> torch.Tensor | float:
    """Global-norm clip factor; differentiable so it survives second order."""
    if clip_norm is None:
        return 1.0
    norm = torch.sqrt(sum((g ** 2).sum() for g in grads))
    return clip_norm / torch.clamp(norm, min=clip_norm)


def gd_adapt(
    tensors: dict[str, torch.Tensor],
    loss_fn,
    adapt_names: list[str],
    alpha: float,
    n_steps: int,
    create_graph: bool = False,
    clip_norm: float | None = None,
) -> dict[str, torch.Tensor]:
    """n_steps of full-batch gradient descent on loss_fn over adapt_names.

    Untouched names keep their original tensor objects. With
    ``create_graph=True`` the result stays a differentiable function of the
    inputs (including through the clip factor).
    """
    if not adapt_names:
        return dict(tensors)
    work = dict(tensors)
    for _ in range(n_steps):
        loss = loss_fn(work)
        grads = torch.autograd.grad(loss, [work[n] for n in adapt_names],
                                    create_graph=create_graph)
        scale = clip_scale(grads, clip_norm)
        for name, g in zip(adapt_names, grads):
            work[name] = work[name] - alpha * scale * g
    return work


def _as_leaves(tensors: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {n: t.detach().clone().requires_grad_(True) for n, t in tensors.items()}


def _query_total(result):
    return result.total if isinstance(result, LossBreakdown) else result


def _accumulate_components(comps: dict, result, m: int) -> None:
    if isinstance(result, LossBreakdown):
        for key, val in (("mel", result.mel_loss), ("duration", result.duration_loss),
                         ("pitch", result.pitch_loss), ("energy", result.energy_loss)):
            comps[key] = comps.get(key, 0.0) + float(val) / m


def meta_gradient_generic(
    tensors: dict[str, torch.Tensor],
    episode_losses: list[tuple],
    adapt_names: list[str],
    cfg: MetaConfig,
):
    """Gradient of F = mean_i query_loss_i(adapted_i) w.r.t. every tensor.

    episode_losses holds (support_loss_fn, query_loss_fn) pairs mapping a
    tensor dict to a scalar (query fns may return a LossBreakdown, whose
    components are then averaged into the returned dict). Episode
    contributions are accumulated in list order, so reductions are
    bit-reproducible. Returns (grads, F value, component averages).
    """
    names = list(tensors)
    m = len(episode_losses)
    comps: dict[str, float] = {}
    leaves = _as_leaves(tensors)

    if cfg.order == ORDER_SECOND:
        total = None
        for support_fn, query_fn in episode_losses:
            adapted = gd_adapt(leaves, support_fn, adapt_names, cfg.alpha,
                               cfg.inner_steps, create_graph=True, clip_norm=cfg.clip_norm)
            res = query_fn(adapted)
            _accumulate_components(comps, res, m)
            q = _query_total(res)
            total = q if total is None else total + q
        f_value = total / m
        grads = torch.autograd.grad(f_value, [leaves[n] for n in names])
        return dict(zip(names, grads)), float(f_value), comps

    # first order: gradients taken at the adapted point, treated as an offset
    acc = {n: torch.zeros_like(t) for n, t in tensors.items()}
    f_total = 0.0
    for support_fn, query_fn in episode_losses:
        adapted = gd_adapt(leaves, support_fn, adapt_names, cfg.alpha,
                           cfg.inner_steps, create_graph=False, clip_norm=cfg.clip_norm)
        point = {n: adapted[n].detach().clone().requires_grad_(True) for n in names}
        res = query_fn(point)
        _accumulate_components(comps, res, m)
        q = _query_total(res)
        grads = torch.autograd.grad(q, [point[n] for n in names])
        for n, g in zip(names, grads):
            acc[n] += g
        f_total += float(q)
    return {n: g / m for n, g in acc.items()}, f_total / m, comps


# --- TTS-facing operations ------------------------------------------------------

def supervised_loss_fn(cfg: ModelConfig, params: ModelParameters, batch: Batch,
                       reduction: str = "mean"):
    """Closure: tensor dict -> scalar teacher-forced loss on a fixed batch."""

    def fn(tensors: dict[str, torch.Tensor]) -> torch.Tensor:
        return supervised_breakdown_fn(cfg, params, batch, reduction)(tensors).total

    return fn


def supervised_breakdown_fn(cfg: ModelConfig, params: ModelParameters, batch: Batch,
                            reduction: str = "mean"):
    def fn(tensors: dict[str, torch.Tensor]) -> LossBreakdown:
        spk = resolve_speaker_vecs_from(tensors, params, batch.speaker_ids)
        out = batch_forward(cfg, tensors, batch, spk, teacher_forced=True)
        return batch_loss(out, batch, reduction=reduction)

    return fn


def mask_adapt_names(params: ModelParameters, mask: ModuleMask) -> list[str]:
    allowed = mask.partitions()
    return [n for n in params.tensors if partition_of(n) in allowed]


def inner_adapt(
    cfg: ModelConfig,
    params: ModelParameters,
    support: list,
    mask: ModuleMask,
    alpha: float,
    n_steps: int,
    clip_norm: float | None = 1.0,
) -> ModelParameters:
    """Adapt the masked partitions to a support set; everything else is
    returned as the very same tensor objects (bit-identical, encoder always).
    """
    if not support:
        raise ValueError("support set must be non-empty")
    batch = make_batch(support)
    adapt_names = mask_adapt_names(params, mask)
    loss_fn = supervised_loss_fn(cfg, params, batch)

    work = {n: (t.detach().clone().requires_grad_(True) if n in adapt_names else t)
            for n, t in params.tensors.items()}
    adapted = gd_adapt(work, loss_fn, adapt_names, alpha, n_steps,
                       create_graph=False, clip_norm=clip_norm)
    new_tensors = {n: (adapted[n].detach() if n in adapt_names else params.tensors[n])
                   for n in params.tensors}
    return params.replace_tensors(new_tensors)


def episode_batches(corpus: Corpus, episode: TaskEpisode) -> tuple[Batch, Batch]:
    support = make_batch([corpus.utterances[i] for i in episode.support])
    query = make_batch([corpus.utterances[i] for i in episode.query])
    return support, query


def meta_gradient(
    cfg: ModelConfig,
    params: ModelParameters,
    episodes: list[tuple[Batch, Batch]],
    meta_cfg: MetaConfig,
    mask: ModuleMask,
):
    """Meta-gradient of the averaged post-adaptation query loss.

    Returns (grads by name, F value, per-component query averages).
    """
    if len(episodes) != meta_cfg.tasks_per_step:
        raise ValueError(
            f"expected {meta_cfg.tasks_per_step} episodes, got {len(episodes)}"
        )
    adapt_names = mask_adapt_names(params, mask)
    losses = [
        (supervised_loss_fn(cfg, params, support), supervised_breakdown_fn(cfg, params, query))
        for support, query in episodes
    ]
    return meta_gradient_generic(params.tensors, losses, adapt_names, meta_cfg)


def meta_step(
    cfg: ModelConfig,
    params: ModelParameters,
    episodes: list[tuple[Batch, Batch]],
    meta_cfg: MetaConfig,
    mask: ModuleMask,
) -> ModelParameters:
    """One plain meta-update: θ <- θ - β * clip(∇F); updates every partition."""
    grads, _, _ = meta_gradient(cfg, params, episodes, meta_cfg, mask)
    names = list(params.tensors)
    scale = clip_scale([grads[n] for n in names], meta_cfg.clip_norm)
    new_tensors = {
        n: (params.tensors[n] - meta_cfg.beta * scale * grads[n]).detach()
        for n in names
    }
    return params.replace_tensors(new_tensors)


class OuterOptimizer:
    """Plain step or adaptive-moment step on the meta-gradient, with clipping."""

    def __init__(self, meta_cfg: MetaConfig, names: list[str]):
        self.cfg = meta_cfg
        self.names = names
        self.t = 0
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}

    def step(self, params: ModelParameters, grads: dict[str, torch.Tensor]) -> ModelParameters:
        cfg = self.cfg
        scale = clip_scale([grads[n] for n in self.names], cfg.clip_norm)
        new = {}
        if cfg.outer_optimizer == "sgd":
            for n in self.names:
                new[n] = (params.tensors[n] - cfg.beta * scale * grads[n]).detach()
        else:
            self.t += 1
            b1, b2, eps = 0.9, 0.999, 1e-8
            for n in self.names:
                g = scale * grads[n]
                self.m[n] = b1 * self.m.get(n, torch.zeros_like(g)) + (1 - b1) * g
                self.v[n] = b2 * self.v.get(n, torch.zeros_like(g)) + (1 - b2) * g * g
                mhat = self.m[n] / (1 - b1 ** self.t)
                vhat = self.v[n] / (1 - b2 ** self.t)
                new[n] = (params.tensors[n] - cfg.beta * mhat / (torch.sqrt(vhat) + eps)).detach()
        return params.replace_tensors(new)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"opt.t": np.array([float(self.t)])}
        for n in self.names:
            if n in self.m:
                out[f"opt.m.{n}"] = self.m[n].numpy()
                out[f"opt.v.{n}"] = self.v[n].numpy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if "opt.t" in arrays:
            self.t = int(arrays["opt.t"][0])
        for n in self.names:
            if f"opt.m.{n}" in arrays:
                self.m[n] = torch.as_tensor(arrays[f"opt.m.{n}"], dtype=M.DTYPE)
                self.v[n] = torch.as_tensor(arrays[f"opt.v.{n}"], dtype=M.DTYPE)


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_json(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def meta_train(
    corpus: Corpus,
    model_cfg: ModelConfig,
    meta_cfg: MetaConfig,
    mask: ModuleMask,
    seed: int,
    out_dir: str | None = None,
    resume_from: str | None = None,
    k_shots: int | None = None,
    log_path: str | None = None,
):
    """Run the meta-training loop; returns (params, log records).

    The mask used here must match the mask used at cloning time; it is
    recorded in every checkpoint so evaluation can enforce that.
    Checkpoints carry optimizer and rng state, so a resumed run reproduces
    the uninterrupted one bit for bit.
    """
    k = k_shots if k_shots is not None else corpus.config.k_shots

    if resume_from is not None:
        from .checkpoint import load_checkpoint

        params, loaded_cfg, extras, extra_arrays = load_checkpoint(resume_from)
        if loaded_cfg.to_dict() != model_cfg.to_dict():
            raise ConfigError("resume checkpoint model config differs from requested config")
        if extras.get("mask") != mask.tag():
            raise ConfigError(
                f"resume checkpoint was meta-trained with mask {extras.get('mask')!r}, "
                f"requested {mask.tag()!r}"
            )
        start_step = int(extras["step"])
        rng = _rng_from_json(json.loads(extras["rng_state"]))
        opt = OuterOptimizer(meta_cfg, list(params.tensors))
        opt.load_state_arrays(extra_arrays)
    else:
        params = M.init_params(model_cfg, sorted(corpus.speakers), seed)
        start_step = 0
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
        opt = OuterOptimizer(meta_cfg, list(params.tensors))

    records: list[dict] = []
    log_f = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for step in range(start_step, meta_cfg.total_meta_steps):
            t0 = time.monotonic()
            eps = [
                episode_batches(corpus, sample_episode(corpus, k, k, rng))
                for _ in range(meta_cfg.tasks_per_step)
            ]
            grads, f_value, comps = meta_gradient(model_cfg, params, eps, meta_cfg, mask)
            if not math.isfinite(f_value):
                raise NumericError(f"non-finite meta-loss at step {step}: {f_value}")
            params = opt.step(params, grads)
            rec = {"step": step, "meta_loss": f_value, **comps}
            records.append(rec)
            if log_f:
                log_f.write(json.dumps({**rec, "wall_time": time.monotonic() - t0}) + "\n")
            if out_dir and (
                (step + 1) % meta_cfg.checkpoint_interval == 0
                or step + 1 == meta_cfg.total_meta_steps
            ):
                _save_meta_checkpoint(out_dir, params, model_cfg, meta_cfg, mask,
                                      step + 1, rng, opt, seed)
    finally:
        if log_f:
            log_f.close()
    return params, records


def _save_meta_checkpoint(out_dir, params, model_cfg, meta_cfg, mask, step, rng, opt, seed):
    os.makedirs(out_dir, exist_ok=True)
    extras = {
        "approach": "meta",
        "mask": mask.tag(),
        "meta_config": meta_cfg.to_dict(),
        "step": step,
        "seed": seed,
        "rng_state": json.dumps(_rng_state_to_json(rng)),
    }
    path = os.path.join(out_dir, f"ckpt_step{step:06d}.bin")
    save_checkpoint(path, params, model_cfg, extras, opt.state_arrays())
    return path
