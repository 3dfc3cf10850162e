"""Non-meta references: multi-task multi-speaker training, and speaker-encoding
TTS with a jointly trained, oracle-backed, or pre-trained reference encoder.

The speaker-encoding models consume an utterance-level speaker vector instead
of a store lookup; their reference encoder and its projection live in the
``spk.*`` parameter partition.
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
from .corpus import Corpus, CorpusConfig, Utterance, embedding_dim, oracle_embed
from .errors import ConfigError, NumericError
from .metalearn import clip_scale
from .model import (
    DTYPE,
    MODE_ENCODER,
    Batch,
    ModelConfig,
    ModelParameters,
    batch_forward,
    batch_loss,
    make_batch,
    parameter_spec,
    resolve_speaker_vecs_from,
)

SETTING_SCRATCH = "scratch_joint"
SETTING_ORACLE = "fixed_oracle"
SETTING_PRETRAINED = "pretrained_joint"
ENCODER_SETTINGS = (SETTING_SCRATCH, SETTING_ORACLE, SETTING_PRETRAINED)

APPROACH_MULTITASK = "multitask"
APPROACH_META = "meta"


def validate_encoder_setting(mode: str) -> str:
    if mode not in ENCODER_SETTINGS:
        raise ConfigError(f"unknown speaker encoder setting {mode!r}; use one of {ENCODER_SETTINGS}")
    return mode


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    steps: int = 2000
    batch_size: int = 80  # M * 2K of the meta schedule, for equal sample budget
    clip_norm: float | None = 1.0
    optimizer: str = "sgd"
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.lr < 0 or self.steps < 1 or self.batch_size < 1:
            raise ConfigError("lr must be >= 0, steps and batch_size >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class _Adam:
    def __init__(self, lr):
        self.lr, self.t = lr, 0
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}

    def step(self, tensors, grads, names):
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        out = dict(tensors)
        for n in names:
            g = grads[n]
            self.m[n] = b1 * self.m.get(n, torch.zeros_like(g)) + (1 - b1) * g
            self.v[n] = b2 * self.v.get(n, torch.zeros_like(g)) + (1 - b2) * g * g
            mhat = self.m[n] / (1 - b1 ** self.t)
            vhat = self.v[n] / (1 - b2 ** self.t)
            out[n] = (tensors[n] - self.lr * mhat / (torch.sqrt(vhat) + eps)).detach()
        return out


# --- multi-task baseline --------------------------------------------------------

def _supervised_step(cfg, params, batch_utts, lr, clip_norm, opt: "_Adam | None"):
    """Shared step on the summed supervised loss over a mixed-speaker batch.

    Returns (new params, mean per-utterance loss breakdown at the pre-step
    parameters, for logging).
    """
    batch = make_batch(batch_utts)
    names = list(params.tensors)
    leaves = {n: t.detach().clone().requires_grad_(True) for n, t in params.tensors.items()}
    spk = resolve_speaker_vecs_from(leaves, params, batch.speaker_ids)
    out = batch_forward(cfg, leaves, batch, spk, teacher_forced=True)
    loss = batch_loss(out, batch, reduction="sum").total
    grads = torch.autograd.grad(loss, [leaves[n] for n in names])
    scale = clip_scale(list(grads), clip_norm)
    gd = {n: scale * g for n, g in zip(names, grads)}
    if opt is None:
        new = {n: (params.tensors[n] - lr * gd[n]).detach() for n in names}
    else:
        new = opt.step(params.tensors, gd, names)
    with torch.no_grad():
        report = batch_loss(out, batch, reduction="mean").detached()
    return params.replace_tensors(new), report


def multitask_step(
    cfg: ModelConfig,
    params: ModelParameters,
    batch_utts: list[Utterance],
    lr: float,
    clip_norm: float | None = 1.0,
) -> ModelParameters:
    """One gradient step on the summed supervised loss; updates all partitions."""
    new_params, _ = _supervised_step(cfg, params, batch_utts, lr, clip_norm, None)
    return new_params


def train_multitask(
    corpus: Corpus,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seed: int,
    out_dir: str | None = None,
    log_path: str | None = None,
):
    """Multi-task training over mixed-speaker batches; returns (params, records)."""
    params = M.init_params(model_cfg, sorted(corpus.speakers), seed)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    n_utts = len(corpus.utterances)
    if train_cfg.batch_size > n_utts:
        raise ConfigError(
            f"batch_size {train_cfg.batch_size} exceeds corpus size {n_utts}"
        )
    opt = _Adam(train_cfg.lr) if train_cfg.optimizer == "adam" else None

    records: list[dict] = []
    log_f = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for step in range(train_cfg.steps):
            t0 = time.monotonic()
            idx = rng.choice(n_utts, size=train_cfg.batch_size, replace=False)
            utts = [corpus.utterances[i] for i in idx]
            params, bd = _supervised_step(model_cfg, params, utts, train_cfg.lr,
                                          train_cfg.clip_norm, opt)
            if not math.isfinite(bd["total"]):
                raise NumericError(f"non-finite loss at step {step}")
            rec = {"step": step, **bd}
            records.append(rec)
            if log_f:
                log_f.write(json.dumps({**rec, "wall_time": time.monotonic() - t0}) + "\n")
            if out_dir and ((step + 1) % train_cfg.checkpoint_interval == 0
                            or step + 1 == train_cfg.steps):
                _save_baseline_checkpoint(out_dir, params, model_cfg, train_cfg,
                                          APPROACH_MULTITASK, step + 1, seed)
    finally:
        if log_f:
            log_f.close()
    return params, records


def _save_baseline_checkpoint(out_dir, params, model_cfg, train_cfg, approach, step, seed,
                              setting=None):
    os.makedirs(out_dir, exist_ok=True)
    extras = {
        "approach": approach,
        "train_config": train_cfg.to_dict(),
        "step": step,
        "seed": seed,
    }
    if setting is not None:
        extras["encoder_setting"] = setting
    path = os.path.join(out_dir, f"ckpt_step{step:06d}.bin")
    save_checkpoint(path, params, model_cfg, extras)
    return path


# --- speaker-encoding baselines ---------------------------------------------------

ENC_HIDDEN = 32  # width of the small mel-pooling reference encoder


def speaker_encoder_spec(cfg: ModelConfig, corpus_cfg: CorpusConfig, setting: str):
    """spk.* tensors for the reference-encoder speaker subsystem."""
    d_emb = embedding_dim(corpus_cfg)
    spec = []
    if setting != SETTING_ORACLE:
        spec += [("spk.enc.fc1.w", (ENC_HIDDEN, corpus_cfg.n_mel_channels), ("uniform", corpus_cfg.n_mel_channels)),
                 ("spk.enc.fc1.b", (ENC_HIDDEN,), ("zeros",)),
                 ("spk.enc.fc2.w", (d_emb, ENC_HIDDEN), ("uniform", ENC_HIDDEN)),
                 ("spk.enc.fc2.b", (d_emb,), ("zeros",))]
    spec += [("spk.proj.w", (cfg.spk_emb_dim, d_emb), ("uniform", d_emb)),
             ("spk.proj.b", (cfg.spk_emb_dim,), ("zeros",))]
    return spec


def init_speaker_encoder_params(
    cfg: ModelConfig, corpus_cfg: CorpusConfig, setting: str, seed: int
) -> ModelParameters:
    """TTS trunk + reference-encoder speaker subsystem (mode 'encoder')."""
    validate_encoder_setting(setting)
    trunk_cfg = ModelConfig.from_dict({**cfg.to_dict(), "emb_mode": "shared"})
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    tensors: dict[str, torch.Tensor] = {}
    spec = [t for t in parameter_spec(trunk_cfg, None) if not t[0].startswith("spk.")]
    spec += speaker_encoder_spec(cfg, corpus_cfg, setting)
    for name, shape, init in spec:
        if init[0] == "uniform":
            lim = 1.0 / math.sqrt(init[1])
            arr = rng.uniform(-lim, lim, size=shape)
        elif init[0] == "zeros":
            arr = np.zeros(shape)
        else:
            arr = np.ones(shape)
        tensors[name] = torch.as_tensor(arr, dtype=DTYPE)
    return ModelParameters(tensors=tensors, mode=MODE_ENCODER)


def encoder_embed_mel(tensors: dict, mel: torch.Tensor, mel_mask: torch.Tensor) -> torch.Tensor:
    """Mean-pool mel over frames, two feed-forward layers -> [B, d_emb]."""
    m = mel_mask.unsqueeze(-1).to(DTYPE)
    pooled = (mel * m).sum(dim=1) / mel_mask.sum(dim=1, keepdim=True).to(DTYPE)
    h = torch.relu(pooled @ tensors["spk.enc.fc1.w"].T + tensors["spk.enc.fc1.b"])
    return h @ tensors["spk.enc.fc2.w"].T + tensors["spk.enc.fc2.b"]


def reference_embeddings(tensors: dict, setting: str, batch: Batch,
                         utts: list[Utterance], corpus_cfg: CorpusConfig) -> torch.Tensor:
    """Per-utterance d_emb-dimensional reference embeddings for a batch."""
    if setting == SETTING_ORACLE:
        embs = np.stack([oracle_embed(u, corpus_cfg) for u in utts])
        return torch.as_tensor(embs, dtype=DTYPE)
    return encoder_embed_mel(tensors, batch.mel, batch.mel_mask)


def project_reference(tensors: dict, embedding: torch.Tensor) -> torch.Tensor:
    """Reference embedding(s) -> speaker vector(s) the TTS conditions on."""
    return embedding @ tensors["spk.proj.w"].T + tensors["spk.proj.b"]


def encode_speaker_reference(
    params: ModelParameters, setting: str, references: list[Utterance],
    corpus_cfg: CorpusConfig,
) -> torch.Tensor:
    """Arithmetic mean of the references' embeddings (single speaker vector
    source for cloning without any fine-tuning)."""
    if not references:
        raise ValueError("need at least one reference utterance")
    if setting == SETTING_ORACLE:
        embs = np.stack([oracle_embed(u, corpus_cfg) for u in references])
        return torch.as_tensor(embs.mean(axis=0), dtype=DTYPE)
    with torch.no_grad():
        batch = make_batch(references)
        embs = encoder_embed_mel(params.tensors, batch.mel, batch.mel_mask)
        return embs.mean(dim=0)


def pretrain_speaker_encoder(
    params: ModelParameters,
    pretrain_corpus: Corpus,
    steps: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
):
    """Fit the mel-pooling encoder to oracle embeddings on held-out speakers.

    Stands in for large-scale verification pre-training; returns
    (params, regression-loss records).
    """
    enc_names = [n for n in params.tensors if n.startswith("spk.enc.")]
    if not enc_names:
        raise ConfigError("these parameters have no trainable reference encoder")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    corpus_cfg = pretrain_corpus.config
    targets = np.stack([oracle_embed(u, corpus_cfg) for u in pretrain_corpus.utterances])
    opt = _Adam(lr)
    tensors = dict(params.tensors)
    records = []
    n = len(pretrain_corpus.utterances)
    for step in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        batch = make_batch([pretrain_corpus.utterances[i] for i in idx])
        leaves = {m: (t.detach().clone().requires_grad_(True) if m in enc_names else t)
                  for m, t in tensors.items()}
        pred = encoder_embed_mel(leaves, batch.mel, batch.mel_mask)
        tgt = torch.as_tensor(targets[idx], dtype=DTYPE)
        loss = ((pred - tgt) ** 2).mean()
        grads = torch.autograd.grad(loss, [leaves[m] for m in enc_names])
        gd = dict(zip(enc_names, grads))
        tensors = opt.step(leaves, gd, enc_names)
        tensors = {m: t.detach() for m, t in tensors.items()}
        records.append({"step": step, "regression_loss": float(loss)})
    return params.replace_tensors(tensors), records


def train_speaker_encoder_tts(
    corpus: Corpus,
    setting: str,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seed: int,
    pretrain_corpus: Corpus | None = None,
    pretrain_steps: int = 500,
    pretrain_lr: float = 1e-3,
    out_dir: str | None = None,
    log_path: str | None = None,
):
    """Joint TTS + reference-encoder training per the chosen setting.

    Each training utterance serves as its own reference audio. With the
    oracle setting the external embedder is frozen by construction; only its
    projection (and the TTS trunk) trains.
    """
    validate_encoder_setting(setting)
    corpus_cfg = corpus.config
    params = init_speaker_encoder_params(model_cfg, corpus_cfg, setting, seed)

    pretrain_records: list[dict] = []
    if setting == SETTING_PRETRAINED:
        if pretrain_corpus is None:
            raise ConfigError("pretrained_joint needs a held-out pretraining corpus")
        params, pretrain_records = pretrain_speaker_encoder(
            params, pretrain_corpus, pretrain_steps, pretrain_lr, seed
        )

    oracle_cache = None
    if setting == SETTING_ORACLE:
        oracle_cache = np.stack([oracle_embed(u, corpus_cfg) for u in corpus.utterances])

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    names = list(params.tensors)
    opt = _Adam(train_cfg.lr) if train_cfg.optimizer == "adam" else None
    n_utts = len(corpus.utterances)
    records: list[dict] = []
    log_f = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for step in range(train_cfg.steps):
            t0 = time.monotonic()
            idx = rng.choice(n_utts, size=min(train_cfg.batch_size, n_utts), replace=False)
            utts = [corpus.utterances[i] for i in idx]
            batch = make_batch(utts)
            leaves = {n: t.detach().clone().requires_grad_(True) for n, t in params.tensors.items()}
            if setting == SETTING_ORACLE:
                ref = torch.as_tensor(oracle_cache[idx], dtype=DTYPE)
            else:
                ref = encoder_embed_mel(leaves, batch.mel, batch.mel_mask)
            spk = project_reference(leaves, ref)
            out = batch_forward(model_cfg, leaves, batch, spk, teacher_forced=True)
            bd = batch_loss(out, batch, reduction="sum")
            if not math.isfinite(float(bd.total)):
                raise NumericError(f"non-finite loss at step {step}")
            grads = torch.autograd.grad(bd.total, [leaves[n] for n in names])
            scale = clip_scale(list(grads), train_cfg.clip_norm)
            gd = {n: scale * g for n, g in zip(names, grads)}
            if opt is None:
                new = {n: (params.tensors[n] - train_cfg.lr * gd[n]).detach() for n in names}
            else:
                new = opt.step(params.tensors, gd, names)
            params = params.replace_tensors(new)
            rec = {"step": step, **batch_loss(out, batch, reduction="mean").detached()}
            records.append(rec)
            if log_f:
                log_f.write(json.dumps({**rec, "wall_time": time.monotonic() - t0}) + "\n")
            if out_dir and ((step + 1) % train_cfg.checkpoint_interval == 0
                            or step + 1 == train_cfg.steps):
                _save_baseline_checkpoint(out_dir, params, model_cfg, train_cfg,
                                          f"spk_enc:{setting}", step + 1, seed,
                                          setting=setting)
    finally:
        if log_f:
            log_f.close()
    return params, records, pretrain_records
