"""Toy multi-speaker FastSpeech 2 on a partitioned, functional parameter store.

Parameters live in a flat ``name -> torch.Tensor`` dict (float64). The name
prefix decides the partition: ``encoder.*`` (speaker-independent text
encoder), ``va.*`` (variance adaptor: duration/pitch/energy predictors and
their embeddings), ``dec.*`` (mel decoder), ``spk.*`` (speaker subsystem:
embedding table, shared embedding, or a reference encoder). Training code
adapts subsets of partitions by name, so "frozen" means the same tensor
object, bit for bit.

All forward functions are pure in the parameters and inputs; nothing here
mutates a tensor in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
import torch

from .corpus import Utterance
from .errors import ConfigError, UnknownSpeakerError

DTYPE = torch.float64

PARTITION_ENCODER = "encoder"
PARTITION_VARIANCE = "variance_adaptor"
PARTITION_DECODER = "decoder"
PARTITION_SPEAKER = "speaker"
PARTITIONS = (PARTITION_ENCODER, PARTITION_VARIANCE, PARTITION_DECODER, PARTITION_SPEAKER)

_PREFIX_TO_PARTITION = {
    "encoder": PARTITION_ENCODER,
    "va": PARTITION_VARIANCE,
    "dec": PARTITION_DECODER,
    "spk": PARTITION_SPEAKER,
}

MODE_TABLE = "table"
MODE_SHARED = "shared"
MODE_ENCODER = "encoder"  # speaker subsystem is a reference encoder (baselines)


def partition_of(name: str) -> str:
    prefix = name.split(".", 1)[0]
    try:
        return _PREFIX_TO_PARTITION[prefix]
    except KeyError:
        raise ValueError(f"parameter name {name!r} has no partition prefix") from None


@dataclass(frozen=True)
class ModelConfig:
    n_phonemes: int = 16
    n_mel_channels: int = 8
    hidden_dim: int = 32
    n_encoder_blocks: int = 2
    n_decoder_blocks: int = 2
    n_heads: int = 2
    ffn_dim: int = 64
    spk_emb_dim: int | None = None  # None -> hidden_dim
    emb_mode: str = MODE_TABLE
    n_bins: int = 16
    predictor_kernel: int = 3
    pitch_range: tuple[float, float] = (50.0, 82.0)
    energy_range: tuple[float, float] = (0.0, 3.0)

    def __post_init__(self):
        if self.spk_emb_dim is None:
            object.__setattr__(self, "spk_emb_dim", self.hidden_dim)
        if self.hidden_dim % self.n_heads != 0:
            raise ConfigError("hidden_dim must be divisible by n_heads")
        if self.emb_mode not in (MODE_TABLE, MODE_SHARED):
            raise ConfigError(f"emb_mode must be 'table' or 'shared', got {self.emb_mode!r}")
        for name in ("n_phonemes", "n_mel_channels", "hidden_dim", "ffn_dim",
                     "n_encoder_blocks", "n_decoder_blocks", "n_heads", "n_bins",
                     "spk_emb_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.predictor_kernel % 2 != 1:
            raise ConfigError("predictor_kernel must be odd")
        for rng_name in ("pitch_range", "energy_range"):
            lo, hi = getattr(self, rng_name)
            if not lo < hi:
                raise ConfigError(f"{rng_name} must be (lo, hi) with lo < hi")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["pitch_range"] = list(self.pitch_range)
        d["energy_range"] = list(self.energy_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        for rng_name in ("pitch_range", "energy_range"):
            if rng_name in kw:
                kw[rng_name] = tuple(kw[rng_name])
        return cls(**kw)


@dataclass
class ModelParameters:
    """Partitioned parameter store; the unit the training loops operate on."""

    tensors: dict[str, torch.Tensor]
    mode: str
    speaker_rows: dict[int, int] | None = None  # table mode: speaker id -> row

    def __post_init__(self):
        for name in self.tensors:
            partition_of(name)  # raises on stray names
        if self.mode == MODE_TABLE and self.speaker_rows is None:
            raise ConfigError("table mode requires a speaker row map")

    def partition_names(self, partition: str) -> list[str]:
        return [n for n in self.tensors if partition_of(n) == partition]

    def clone(self) -> "ModelParameters":
        return ModelParameters(
            tensors={n: t.detach().clone() for n, t in self.tensors.items()},
            mode=self.mode,
            speaker_rows=dict(self.speaker_rows) if self.speaker_rows else None,
        )

    def replace_tensors(self, tensors: dict[str, torch.Tensor]) -> "ModelParameters":
        return ModelParameters(
            tensors=tensors,
            mode=self.mode,
            speaker_rows=dict(self.speaker_rows) if self.speaker_rows else None,
        )

    def n_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def speaker_vector(self, speaker_id: int) -> torch.Tensor:
        if self.mode == MODE_SHARED:
            return self.tensors["spk.shared"]
        if self.mode == MODE_TABLE:
            if speaker_id not in self.speaker_rows:
                raise UnknownSpeakerError(speaker_id)
            return self.tensors["spk.table"][self.speaker_rows[speaker_id]]
        raise ConfigError("reference-encoder parameters hold no per-speaker store")


@dataclass
class ForwardOutput:
    """Per-utterance model outputs (teacher-forced or free-run)."""

    mel_pred: torch.Tensor           # [frames, n_mel_channels]
    log_duration_pred: torch.Tensor  # [L]
    pitch_pred: torch.Tensor         # [L]
    energy_pred: torch.Tensor        # [L]
    durations: torch.Tensor          # [L] frame counts that shaped mel_pred


@dataclass
class LossBreakdown:
    mel_loss: torch.Tensor
    duration_loss: torch.Tensor
    pitch_loss: torch.Tensor
    energy_loss: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.mel_loss + self.duration_loss + self.pitch_loss + self.energy_loss

    def detached(self) -> dict[str, float]:
        return {
            "mel": float(self.mel_loss),
            "duration": float(self.duration_loss),
            "pitch": float(self.pitch_loss),
            "energy": float(self.energy_loss),
            "total": float(self.total),
        }


# --- initialization -----------------------------------------------------------

def _linear_spec(name, out_d, in_d):
    return [(f"{name}.w", (out_d, in_d), ("uniform", in_d)), (f"{name}.b", (out_d,), ("zeros",))]


def _ln_spec(name, d):
    return [(f"{name}.scale", (d,), ("ones",)), (f"{name}.bias", (d,), ("zeros",))]


def _block_spec(prefix, h, ffn):
    spec = _ln_spec(f"{prefix}.ln1", h)
    for p in ("wq", "wk", "wv", "wo"):
        spec += [(f"{prefix}.attn.{p}", (h, h), ("uniform", h))]
    for p in ("bq", "bk", "bv", "bo"):
        spec += [(f"{prefix}.attn.{p}", (h,), ("zeros",))]
    spec += _ln_spec(f"{prefix}.ln2", h)
    spec += _linear_spec(f"{prefix}.ffn.fc1", ffn, h)
    spec += _linear_spec(f"{prefix}.ffn.fc2", h, ffn)
    return spec


def _predictor_spec(prefix, h, kernel, out_bias: float):
    spec = []
    spec += [(f"{prefix}.conv1.w", (h, h, kernel), ("uniform", h * kernel)),
             (f"{prefix}.conv1.b", (h,), ("zeros",))]
    spec += _ln_spec(f"{prefix}.ln1", h)
    spec += [(f"{prefix}.conv2.w", (h, h, kernel), ("uniform", h * kernel)),
             (f"{prefix}.conv2.b", (h,), ("zeros",))]
    spec += _ln_spec(f"{prefix}.ln2", h)
    # output bias starts at the target's prior mean so raw-scale regression
    # (pitch ~ 60..72) is trainable within desk-scale step budgets
    spec += [(f"{prefix}.out.w", (1, h), ("uniform", h)),
             (f"{prefix}.out.b", (1,), ("const", out_bias))]
    return spec


def parameter_spec(cfg: ModelConfig, n_speakers: int | None) -> list[tuple]:
    """Ordered (name, shape, init) triples; the checkpoint manifest order."""
    h, e = cfg.hidden_dim, cfg.spk_emb_dim
    spec: list[tuple] = []

    spec += [("encoder.phoneme_embed", (cfg.n_phonemes, h), ("uniform", h))]
    for i in range(cfg.n_encoder_blocks):
        spec += _block_spec(f"encoder.block{i}", h, cfg.ffn_dim)
    spec += _ln_spec("encoder.final_ln", h)

    spec += _linear_spec("va.spk_proj", h, e)
    for head in ("duration", "pitch", "energy"):
        spec += _predictor_spec(f"va.{head}", h, cfg.predictor_kernel)
    spec += [("va.pitch_embed", (cfg.n_bins, h), ("uniform", h)),
             ("va.energy_embed", (cfg.n_bins, h), ("uniform", h))]

    spec += _linear_spec("dec.spk_proj", h, e)
    for i in range(cfg.n_decoder_blocks):
        spec += _block_spec(f"dec.block{i}", h, cfg.ffn_dim)
    spec += _ln_spec("dec.final_ln", h)
    spec += _linear_spec("dec.out", cfg.n_mel_channels, h)

    if cfg.emb_mode == MODE_TABLE:
        if not n_speakers:
            raise ConfigError("table mode needs a non-empty speaker id set")
        spec += [("spk.table", (n_speakers, e), ("zeros",))]
    else:
        spec += [("spk.shared", (e,), ("zeros",))]
    return spec


def init_params(cfg: ModelConfig, speaker_ids, seed: int) -> ModelParameters:
    """Deterministic init: scaled-uniform weights, zero speaker embeddings."""
    speaker_ids = sorted(int(s) for s in speaker_ids) if speaker_ids is not None else []
    if cfg.emb_mode == MODE_TABLE and not speaker_ids:
        raise ConfigError("table mode requires a non-empty speaker id set")
    n_speakers = len(speaker_ids) if cfg.emb_mode == MODE_TABLE else None

    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    tensors: dict[str, torch.Tensor] = {}
    for name, shape, init in parameter_spec(cfg, n_speakers):
        if init[0] == "uniform":
            lim = 1.0 / math.sqrt(init[1])
            arr = rng.uniform(-lim, lim, size=shape)
        elif init[0] == "zeros":
            arr = np.zeros(shape)
        elif init[0] == "ones":
            arr = np.ones(shape)
        else:  # pragma: no cover - spec construction bug
            raise ValueError(f"unknown init {init}")
        tensors[name] = torch.as_tensor(arr, dtype=DTYPE)

    if cfg.emb_mode == MODE_TABLE:
        rows = {sid: i for i, sid in enumerate(speaker_ids)}
        return ModelParameters(tensors=tensors, mode=MODE_TABLE, speaker_rows=rows)
    return ModelParameters(tensors=tensors, mode=MODE_SHARED)


# --- functional layers ---------------------------------------------------------

def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, 2 * (i // 2) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return torch.as_tensor(table, dtype=DTYPE)


def _linear(t, x):
    return x @ t["w"].T + t["b"]


def _layer_norm(p, name, x):
    h = x.shape[-1]
    return torch.nn.functional.layer_norm(x, (h,), p[f"{name}.scale"], p[f"{name}.bias"], eps=1e-6)


def _attention(p, prefix, x, key_mask, n_heads):
    b, l, h = x.shape
    dh = h // n_heads
    q = (x @ p[f"{prefix}.wq"].T + p[f"{prefix}.bq"]).view(b, l, n_heads, dh).transpose(1, 2)
    k = (x @ p[f"{prefix}.wk"].T + p[f"{prefix}.bk"]).view(b, l, n_heads, dh).transpose(1, 2)
    v = (x @ p[f"{prefix}.wv"].T + p[f"{prefix}.bv"]).view(b, l, n_heads, dh).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    attn = torch.softmax(scores, dim=-1)
    out = (attn @ v).transpose(1, 2).reshape(b, l, h)
    return out @ p[f"{prefix}.wo"].T + p[f"{prefix}.bo"]


def _transformer_block(p, prefix, x, key_mask, n_heads):
    x = x + _attention(p, f"{prefix}.attn", _layer_norm(p, f"{prefix}.ln1", x), key_mask, n_heads)
    h = _layer_norm(p, f"{prefix}.ln2", x)
    h = torch.relu(h @ p[f"{prefix}.ffn.fc1.w"].T + p[f"{prefix}.ffn.fc1.b"])
    return x + h @ p[f"{prefix}.ffn.fc2.w"].T + p[f"{prefix}.ffn.fc2.b"]


def _predictor(p, prefix, x, mask):
    """Two masked conv blocks + scalar head over a [B, T, H] sequence -> [B, T]."""
    m = mask.unsqueeze(-1).to(x.dtype)
    h = x * m
    for i in (1, 2):
        w, bias = p[f"{prefix}.conv{i}.w"], p[f"{prefix}.conv{i}.b"]
        pad = (w.shape[-1] - 1) // 2
        h = torch.nn.functional.conv1d(h.transpose(1, 2), w, bias, padding=pad).transpose(1, 2)
        h = torch.relu(h)
        h = _layer_norm(p, f"{prefix}.ln{i}", h)
        h = h * m
    out = (h @ p[f"{prefix}.out.w"].T + p[f"{prefix}.out.b"]).squeeze(-1)
    return out * mask.to(x.dtype)


def _round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def _bucketize(values: torch.Tensor, value_range, n_bins: int) -> torch.Tensor:
    lo, hi = value_range
    edges = torch.linspace(lo, hi, n_bins + 1, dtype=DTYPE)[1:-1]
    return torch.bucketize(values.detach(), edges)


def frame_index_from_durations(durations: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Map frames back to phoneme positions. durations: [B, L] ints, 0 at pads.

    Returns (index [B, F], mel_mask [B, F]) with F = max total frames; padded
    frame slots index position 0 and are masked out.
    """
    b, l = durations.shape
    totals = durations.sum(dim=1)
    f = int(totals.max())
    index = torch.zeros((b, f), dtype=torch.long)
    for i in range(b):
        row = torch.repeat_interleave(torch.arange(l), durations[i])
        index[i, : row.shape[0]] = row
    mel_mask = torch.arange(f)[None, :] < totals[:, None]
    return index, mel_mask


def _segment_mean(frame_values, frame_index, durations, mel_mask):
    """Average frame-level values over each phoneme's frames -> [B, L]."""
    b, l = durations.shape
    sums = torch.zeros((b, l), dtype=frame_values.dtype)
    sums = sums.scatter_add(1, frame_index, frame_values * mel_mask.to(frame_values.dtype))
    return sums / torch.clamp(durations, min=1).to(frame_values.dtype)


# --- batched forward -----------------------------------------------------------

@dataclass
class Batch:
    """Padded utterance batch; masks are True at valid positions."""

    phonemes: torch.Tensor   # [B, L] long
    src_mask: torch.Tensor   # [B, L] bool
    durations: torch.Tensor  # [B, L] long (0 at pads)
    pitch: torch.Tensor      # [B, L]
    energy: torch.Tensor     # [B, L]
    mel: torch.Tensor        # [B, F, C]
    mel_mask: torch.Tensor   # [B, F] bool
    speaker_ids: list[int]

    @property
    def size(self) -> int:
        return self.phonemes.shape[0]


def make_batch(utterances: list[Utterance]) -> Batch:
    b = len(utterances)
    if b == 0:
        raise ValueError("empty batch")
    lens = [len(u.phonemes) for u in utterances]
    frames = [u.mel.shape[0] for u in utterances]
    l, f, c = max(lens), max(frames), utterances[0].mel.shape[1]

    phonemes = torch.zeros((b, l), dtype=torch.long)
    durations = torch.zeros((b, l), dtype=torch.long)
    pitch = torch.zeros((b, l), dtype=DTYPE)
    energy = torch.zeros((b, l), dtype=DTYPE)
    mel = torch.zeros((b, f, c), dtype=DTYPE)
    src_mask = torch.zeros((b, l), dtype=torch.bool)
    mel_mask = torch.zeros((b, f), dtype=torch.bool)
    for i, u in enumerate(utterances):
        li, fi = lens[i], frames[i]
        phonemes[i, :li] = torch.as_tensor(u.phonemes)
        durations[i, :li] = torch.as_tensor(u.durations)
        pitch[i, :li] = torch.as_tensor(u.pitch, dtype=DTYPE)
        energy[i, :li] = torch.as_tensor(u.energy, dtype=DTYPE)
        mel[i, :fi] = torch.as_tensor(u.mel, dtype=DTYPE)
        src_mask[i, :li] = True
        mel_mask[i, :fi] = True
    return Batch(phonemes, src_mask, durations, pitch, energy, mel, mel_mask,
                 [u.speaker_id for u in utterances])


@dataclass
class BatchOutput:
    mel_pred: torch.Tensor           # [B, F, C]
    log_duration_pred: torch.Tensor  # [B, L]
    pitch_pred: torch.Tensor         # [B, L]
    energy_pred: torch.Tensor        # [B, L]
    durations: torch.Tensor          # [B, L] frame counts used for regulation
    mel_mask: torch.Tensor           # [B, F]
    src_mask: torch.Tensor           # [B, L]


def _encode_batch(cfg: ModelConfig, p: dict, phonemes: torch.Tensor, src_mask: torch.Tensor):
    if (phonemes < 0).any() or (phonemes >= cfg.n_phonemes).any():
        raise ValueError(f"phoneme ids must be in [0, {cfg.n_phonemes})")
    x = p["encoder.phoneme_embed"][phonemes]
    x = x * src_mask.unsqueeze(-1).to(DTYPE)
    x = x + sinusoidal_positions(x.shape[1], cfg.hidden_dim)
    for i in range(cfg.n_encoder_blocks):
        x = _transformer_block(p, f"encoder.block{i}", x, src_mask, cfg.n_heads)
    return _layer_norm(p, "encoder.final_ln", x)


def _variance_adapt_batch(cfg: ModelConfig, p: dict, hidden, spk_vec, src_mask,
                          targets: Batch | None):
    """Speaker-conditioned duration -> length-regulate -> pitch -> energy."""
    if spk_vec.shape[-1] != cfg.spk_emb_dim:
        raise ValueError(
            f"speaker vector dim {spk_vec.shape[-1]} != spk_emb_dim {cfg.spk_emb_dim}"
        )
    s = spk_vec @ p["va.spk_proj.w"].T + p["va.spk_proj.b"]
    h = hidden + s[:, None, :]

    log_d = _predictor(p, "va.duration", h, src_mask)
    if targets is not None:
        durations = targets.durations
    else:
        durations = torch.clamp(_round_half_away(torch.exp(log_d)), min=1.0).long()
        durations = durations * src_mask.long()
    frame_index, mel_mask = frame_index_from_durations(durations)

    gather_index = frame_index.unsqueeze(-1).expand(-1, -1, cfg.hidden_dim)
    reg = torch.gather(h, 1, gather_index) * mel_mask.unsqueeze(-1).to(DTYPE)

    frame_pitch = _predictor(p, "va.pitch", reg, mel_mask)
    pitch_pred = _segment_mean(frame_pitch, frame_index, durations, mel_mask) * src_mask.to(DTYPE)
    pitch_src = targets.pitch if targets is not None else pitch_pred
    p_emb = p["va.pitch_embed"][_bucketize(pitch_src, cfg.pitch_range, cfg.n_bins)]
    reg = reg + torch.gather(p_emb, 1, gather_index) * mel_mask.unsqueeze(-1).to(DTYPE)

    frame_energy = _predictor(p, "va.energy", reg, mel_mask)
    energy_pred = _segment_mean(frame_energy, frame_index, durations, mel_mask) * src_mask.to(DTYPE)
    energy_src = targets.energy if targets is not None else energy_pred
    e_emb = p["va.energy_embed"][_bucketize(energy_src, cfg.energy_range, cfg.n_bins)]
    reg = reg + torch.gather(e_emb, 1, gather_index) * mel_mask.unsqueeze(-1).to(DTYPE)

    return reg, log_d, pitch_pred, energy_pred, durations, mel_mask


def _decode_batch(cfg: ModelConfig, p: dict, regulated, spk_vec, mel_mask):
    s = spk_vec @ p["dec.spk_proj.w"].T + p["dec.spk_proj.b"]
    x = regulated + s[:, None, :] + sinusoidal_positions(regulated.shape[1], cfg.hidden_dim)
    for i in range(cfg.n_decoder_blocks):
        x = _transformer_block(p, f"dec.block{i}", x, mel_mask, cfg.n_heads)
    x = _layer_norm(p, "dec.final_ln", x)
    mel = x @ p["dec.out.w"].T + p["dec.out.b"]
    return mel * mel_mask.unsqueeze(-1).to(DTYPE)


def batch_forward(cfg: ModelConfig, tensors: dict, batch: Batch, spk_vecs: torch.Tensor,
                  teacher_forced: bool = True) -> BatchOutput:
    hidden = _encode_batch(cfg, tensors, batch.phonemes, batch.src_mask)
    targets = batch if teacher_forced else None
    reg, log_d, pitch_pred, energy_pred, durations, mel_mask = _variance_adapt_batch(
        cfg, tensors, hidden, spk_vecs, batch.src_mask, targets
    )
    mel_pred = _decode_batch(cfg, tensors, reg, spk_vecs, mel_mask)
    return BatchOutput(mel_pred, log_d, pitch_pred, energy_pred, durations,
                       mel_mask, batch.src_mask)


def batch_loss(out: BatchOutput, batch: Batch, reduction: str = "mean") -> LossBreakdown:
    """Masked supervised loss; per-utterance components combined by reduction.

    mel: mean absolute error over the utterance's mel entries; duration: MSE
    between predicted and log target durations; pitch/energy: MSE on raw
    per-phoneme values.
    """
    if out.mel_pred.shape != batch.mel.shape:
        raise ValueError(
            f"teacher-forced mel shape {tuple(out.mel_pred.shape)} "
            f"!= target {tuple(batch.mel.shape)}"
        )
    src = batch.src_mask.to(DTYPE)
    melm = batch.mel_mask.to(DTYPE)
    n_src = batch.src_mask.sum(dim=1).to(DTYPE)
    n_mel = (batch.mel_mask.sum(dim=1) * batch.mel.shape[2]).to(DTYPE)

    mel_err = ((out.mel_pred - batch.mel).abs() * melm.unsqueeze(-1)).sum(dim=(1, 2)) / n_mel
    log_t = torch.log(torch.clamp(batch.durations, min=1).to(DTYPE))
    dur_err = (((out.log_duration_pred - log_t) ** 2) * src).sum(dim=1) / n_src
    pitch_err = (((out.pitch_pred - batch.pitch) ** 2) * src).sum(dim=1) / n_src
    energy_err = (((out.energy_pred - batch.energy) ** 2) * src).sum(dim=1) / n_src

    agg = torch.mean if reduction == "mean" else torch.sum
    return LossBreakdown(agg(mel_err), agg(dur_err), agg(pitch_err), agg(energy_err))


def resolve_speaker_vecs(params: ModelParameters, speaker_ids: list[int]) -> torch.Tensor:
    """Look up conditioning vectors for a batch from the speaker store."""
    return resolve_speaker_vecs_from(params.tensors, params, speaker_ids)


def resolve_speaker_vecs_from(tensors: dict, params: ModelParameters,
                              speaker_ids: list[int]) -> torch.Tensor:
    """Store lookup evaluated against an alternative tensor dict.

    The training loops re-bind parameter tensors to autograd leaves; the row
    map still comes from ``params``.
    """
    if params.mode == MODE_SHARED:
        return tensors["spk.shared"].unsqueeze(0).expand(len(speaker_ids), -1)
    if params.mode == MODE_TABLE:
        rows = []
        for sid in speaker_ids:
            if sid not in params.speaker_rows:
                raise UnknownSpeakerError(sid)
            rows.append(params.speaker_rows[sid])
        return tensors["spk.table"][torch.as_tensor(rows, dtype=torch.long)]
    raise ConfigError("reference-encoder parameters need explicit speaker vectors")


# --- single-utterance operations (the module contract) --------------------------

def encode(cfg: ModelConfig, params: ModelParameters, phonemes) -> torch.Tensor:
    """Phoneme ids -> hidden sequence [L, hidden_dim]; reads only encoder.*."""
    ph = torch.as_tensor(np.asarray(phonemes, dtype=np.int64)).view(1, -1)
    mask = torch.ones_like(ph, dtype=torch.bool)
    enc_only = {n: t for n, t in params.tensors.items()
                if partition_of(n) == PARTITION_ENCODER}
    return _encode_batch(cfg, enc_only, ph, mask)[0]


def length_regulate(hidden: torch.Tensor, durations) -> torch.Tensor:
    """Repeat row i of hidden durations[i] times, order preserved."""
    dur = torch.as_tensor(np.asarray(durations, dtype=np.int64))
    if dur.shape[0] != hidden.shape[0]:
        raise ValueError("durations length must match hidden length")
    if (dur < 1).any():
        raise ValueError("all durations must be >= 1")
    return torch.repeat_interleave(hidden, dur, dim=0)


def variance_adapt(cfg: ModelConfig, params: ModelParameters, hidden: torch.Tensor,
                   spk_vec: torch.Tensor, targets: dict | None = None) -> dict:
    """Single-sequence variance adaptor; returns the regulated hidden and predictions."""
    mask = torch.ones((1, hidden.shape[0]), dtype=torch.bool)
    t = None
    if targets is not None:
        t = Batch(
            phonemes=torch.zeros((1, hidden.shape[0]), dtype=torch.long),
            src_mask=mask,
            durations=torch.as_tensor(np.asarray(targets["durations"], dtype=np.int64)).view(1, -1),
            pitch=torch.as_tensor(np.asarray(targets["pitch"], dtype=np.float64)).view(1, -1),
            energy=torch.as_tensor(np.asarray(targets["energy"], dtype=np.float64)).view(1, -1),
            mel=torch.zeros((1, 1, cfg.n_mel_channels), dtype=DTYPE),
            mel_mask=torch.ones((1, 1), dtype=torch.bool),
            speaker_ids=[-1],
        )
        if (t.durations < 1).any():
            raise ValueError("all target durations must be >= 1")
    reg, log_d, pitch_pred, energy_pred, durations, mel_mask = _variance_adapt_batch(
        cfg, params.tensors, hidden.unsqueeze(0), spk_vec.view(1, -1), mask, t
    )
    n = int(durations.sum())
    return {
        "regulated": reg[0, :n],
        "log_duration_pred": log_d[0],
        "pitch_pred": pitch_pred[0],
        "energy_pred": energy_pred[0],
        "durations": durations[0],
    }


def decode(cfg: ModelConfig, params: ModelParameters, regulated: torch.Tensor,
           spk_vec: torch.Tensor) -> torch.Tensor:
    """Regulated hidden [F, H] -> mel [F, n_mel_channels]."""
    if regulated.shape[-1] != cfg.hidden_dim:
        raise ValueError("regulated hidden dim mismatch")
    mask = torch.ones((1, regulated.shape[0]), dtype=torch.bool)
    return _decode_batch(cfg, params.tensors, regulated.unsqueeze(0), spk_vec.view(1, -1), mask)[0]


def forward(cfg: ModelConfig, params: ModelParameters, phonemes,
            speaker_id: int | None = None, spk_vec: torch.Tensor | None = None,
            targets: Utterance | None = None) -> ForwardOutput:
    """encode -> variance_adapt -> decode for one utterance.

    Speaker conditioning comes from the store (``speaker_id``) or an explicit
    ``spk_vec`` (the speaker-encoding path, which bypasses the store).
    Teacher-forced when ``targets`` is given.
    """
    if spk_vec is None:
        if params.mode == MODE_SHARED:
            spk_vec = params.speaker_vector(-1)
        elif speaker_id is None:
            raise ValueError("table mode needs speaker_id or an explicit spk_vec")
        else:
            spk_vec = params.speaker_vector(speaker_id)

    ph = np.asarray(phonemes, dtype=np.int64)
    if targets is not None:
        batch = make_batch([targets])
        out = batch_forward(cfg, params.tensors, batch, spk_vec.view(1, -1), teacher_forced=True)
    else:
        dummy = Utterance(
            speaker_id=-1, phonemes=ph, durations=np.ones(len(ph), dtype=np.int64),
            pitch=np.zeros(len(ph)), energy=np.zeros(len(ph)),
            mel=np.zeros((len(ph), cfg.n_mel_channels)),
        )
        batch = make_batch([dummy])
        out = batch_forward(cfg, params.tensors, batch, spk_vec.view(1, -1), teacher_forced=False)
    n_frames = int(out.durations.sum())
    return ForwardOutput(
        mel_pred=out.mel_pred[0, :n_frames],
        log_duration_pred=out.log_duration_pred[0],
        pitch_pred=out.pitch_pred[0],
        energy_pred=out.energy_pred[0],
        durations=out.durations[0],
    )


def compute_loss(out: ForwardOutput, target: Utterance) -> LossBreakdown:
    """Supervised loss of one teacher-forced forward against its targets."""
    if out.mel_pred.shape[0] != target.mel.shape[0]:
        raise ValueError(
            f"mel frame mismatch: predicted {out.mel_pred.shape[0]}, "
            f"target {target.mel.shape[0]} (teacher-forced shapes must align)"
        )
    if out.log_duration_pred.shape[0] != len(target.phonemes):
        raise ValueError("per-phoneme prediction length mismatch")
    mel_t = torch.as_tensor(target.mel, dtype=DTYPE)
    dur_t = torch.as_tensor(target.durations, dtype=DTYPE)
    pitch_t = torch.as_tensor(target.pitch, dtype=DTYPE)
    energy_t = torch.as_tensor(target.energy, dtype=DTYPE)
    return LossBreakdown(
        mel_loss=(out.mel_pred - mel_t).abs().mean(),
        duration_loss=((out.log_duration_pred - torch.log(dur_t)) ** 2).mean(),
        pitch_loss=((out.pitch_pred - pitch_t) ** 2).mean(),
        energy_loss=((out.energy_pred - energy_t) ** 2).mean(),
    )
