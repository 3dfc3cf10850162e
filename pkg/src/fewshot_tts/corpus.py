"""Synthetic multi-speaker corpus with known latent speaker attributes.

Every "utterance" is generated from a closed-form recipe driven by a
speaker's latent parameters (speaking-rate multiplier, pitch offset,
loudness multiplier, per-channel timbre gains), so cloning quality can be
scored without human raters: an analytic embedding recovers the latents
exactly in the noise-free limit and approximately otherwise.

All randomness is derived from explicit integer seeds through
``numpy.random.SeedSequence``; every function here is a pure function of
its arguments.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, CorpusFormatError, DataError

CORPUS_FORMAT_VERSION = 1

_SPEAKERS_FILE = "speakers.jsonl"
_UTTERANCES_FILE = "utterances.jsonl"
_META_FILE = "meta.json"


@dataclass(frozen=True)
class CorpusConfig:
    """Knobs of the synthetic corpus generator.

    Defaults are desk scale: a 16-symbol phoneme inventory and 8 mel
    channels keep CPU training in the minutes range while leaving speakers
    non-degenerate.
    """

    n_phonemes: int = 16
    n_mel_channels: int = 8
    min_phonemes: int = 4
    max_phonemes: int = 12
    sigma_noise: float = 0.01
    template_seed: int = 0
    k_shots: int = 5

    def __post_init__(self):
        if self.n_mel_channels < 2:
            raise ConfigError("n_mel_channels must be >= 2")
        if self.n_phonemes < 1:
            raise ConfigError("n_phonemes must be >= 1")
        if not (1 <= self.min_phonemes <= self.max_phonemes):
            raise ConfigError("need 1 <= min_phonemes <= max_phonemes")
        if self.sigma_noise < 0:
            raise ConfigError("sigma_noise must be >= 0")
        if self.k_shots < 1:
            raise ConfigError("k_shots must be >= 1")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            warnings.warn(f"ignoring unknown corpus config fields: {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class SpeakerParams:
    """Latent attributes of one synthetic speaker (the cloning ground truth)."""

    speaker_id: int
    duration_scale: float
    pitch_offset: float
    energy_scale: float
    timbre: np.ndarray  # [n_mel_channels], per-channel gain perturbation

    def __post_init__(self):
        self.timbre = np.asarray(self.timbre, dtype=np.float64)
        if self.duration_scale <= 0:
            raise ValueError("duration_scale must be positive")
        if self.energy_scale <= 0:
            raise ValueError("energy_scale must be positive")
        if self.timbre.ndim != 1:
            raise ValueError("timbre must be a 1-D vector")

    def __eq__(self, other) -> bool:
        if not isinstance(other, SpeakerParams):
            return NotImplemented
        return (
            self.speaker_id == other.speaker_id
            and self.duration_scale == other.duration_scale
            and self.pitch_offset == other.pitch_offset
            and self.energy_scale == other.energy_scale
            and np.array_equal(self.timbre, other.timbre)
        )


@dataclass
class Utterance:
    """Phoneme ids plus supervision targets for one synthetic utterance.

    Also used for synthesized outputs: there ``durations``/``pitch``/
    ``energy`` carry the model's predictions and ``mel`` the generated
    spectrogram, which is exactly what the embedding oracle consumes.
    """

    speaker_id: int
    phonemes: np.ndarray   # [L] int ids in [0, n_phonemes)
    durations: np.ndarray  # [L] int frame counts, all >= 1
    pitch: np.ndarray      # [L] float
    energy: np.ndarray     # [L] float
    mel: np.ndarray        # [sum(durations), n_mel_channels] float

    def __post_init__(self):
        self.phonemes = np.asarray(self.phonemes, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        self.pitch = np.asarray(self.pitch, dtype=np.float64)
        self.energy = np.asarray(self.energy, dtype=np.float64)
        self.mel = np.asarray(self.mel, dtype=np.float64)

    def validate(self) -> None:
        n = len(self.phonemes)
        if n == 0:
            raise ValueError("utterance has no phonemes")
        if not (len(self.durations) == len(self.pitch) == len(self.energy) == n):
            raise ValueError("per-phoneme arrays disagree in length")
        if (self.durations < 1).any():
            raise ValueError("all durations must be >= 1")
        if self.mel.ndim != 2 or self.mel.shape[0] != int(self.durations.sum()):
            raise ValueError("mel row count must equal sum(durations)")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        return self.speaker_id == other.speaker_id and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("phonemes", "durations", "pitch", "energy", "mel")
        )


@dataclass
class Corpus:
    """A set of speakers and their utterances, plus generation provenance."""

    speakers: dict[int, SpeakerParams]
    utterances: list[Utterance]
    split_tag: str
    global_seed: int
    config: CorpusConfig = field(default_factory=CorpusConfig)

    def validate(self) -> None:
        counts: dict[int, int] = {sid: 0 for sid in self.speakers}
        for i, u in enumerate(self.utterances):
            u.validate()
            if u.speaker_id not in self.speakers:
                raise DataError(f"utterance {i} references unknown speaker {u.speaker_id}")
            counts[u.speaker_id] += 1
        need = 2 * self.config.k_shots
        for sid, c in counts.items():
            if c < need:
                raise DataError(
                    f"speaker {sid} has {c} utterances; needs >= {need} "
                    f"(2 * k_shots) so meta-tasks stay samplable"
                )

    def speaker_utterance_ids(self) -> dict[int, list[int]]:
        """Utterance ids (positions in ``utterances``) grouped by speaker."""
        out: dict[int, list[int]] = {sid: [] for sid in self.speakers}
        for i, u in enumerate(self.utterances):
            out[u.speaker_id].append(i)
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            self.split_tag == other.split_tag
            and self.global_seed == other.global_seed
            and self.config == other.config
            and self.speakers == other.speakers
            and self.utterances == other.utterances
        )


# --- deterministic generative recipe ---------------------------------------

def derived_seed(*parts: int) -> int:
    """Collapse a tuple of integers into one 64-bit seed, stably."""
    ss = np.random.SeedSequence(list(parts))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def base_duration(phonemes: np.ndarray) -> np.ndarray:
    """Un-scaled frame counts per phoneme id: 2 + (p mod 3)."""
    return 2 + (np.asarray(phonemes) % 3)


def base_pitch(phonemes: np.ndarray) -> np.ndarray:
    """Un-shifted pitch per phoneme id: 60 + 2*(p mod 7)."""
    return 60.0 + 2.0 * (np.asarray(phonemes) % 7)


def energy_profile(phonemes: np.ndarray) -> np.ndarray:
    """Un-scaled energy per phoneme id: 1 + 0.1*(p mod 2)."""
    return 1.0 + 0.1 * (np.asarray(phonemes) % 2)


def round_half_away(x):
    """Round with ties going away from zero (np.round would go to even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


_template_cache: dict[tuple[int, int, int], np.ndarray] = {}


def phoneme_template(phoneme: int, config: CorpusConfig) -> np.ndarray:
    """Deterministic unit-norm spectral template for one phoneme id."""
    key = (config.template_seed, int(phoneme), config.n_mel_channels)
    cached = _template_cache.get(key)
    if cached is None:
        rng = np.random.default_rng(np.random.SeedSequence([config.template_seed, int(phoneme)]))
        v = rng.standard_normal(config.n_mel_channels)
        v /= np.linalg.norm(v)
        v.setflags(write=False)
        cached = _template_cache[key] = v
    return cached


def make_speaker(seed: int, config: CorpusConfig = CorpusConfig(), speaker_id: int = 0) -> SpeakerParams:
    """Draw one speaker's latent parameters; pure function of (seed, config)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    duration_scale = math.exp(rng.uniform(math.log(0.6), math.log(1.6)))
    pitch_offset = rng.uniform(-4.0, 4.0)
    energy_scale = rng.uniform(0.5, 2.0)
    timbre = rng.uniform(-0.5, 0.5, size=config.n_mel_channels)
    return SpeakerParams(
        speaker_id=speaker_id,
        duration_scale=duration_scale,
        pitch_offset=pitch_offset,
        energy_scale=energy_scale,
        timbre=timbre,
    )


def render_utterance(
    spk: SpeakerParams,
    phonemes,
    noise_seed: int,
    config: CorpusConfig = CorpusConfig(),
) -> Utterance:
    """Render the deterministic synthetic "recording" of a phoneme sequence.

    duration(p) = max(1, round(base_duration(p) * duration_scale)),
    pitch(p) = base_pitch(p) + pitch_offset,
    energy(p) = energy_scale * energy_profile(p),
    each frame of p = energy(p) * (template(p) * (1 + timbre)), with channel 0
    offset by 0.01 * pitch(p), plus N(0, sigma_noise^2) noise per entry.
    """
    ph = np.asarray(phonemes, dtype=np.int64)
    if ph.size == 0:
        raise ValueError("phonemes must be non-empty")
    if (ph < 0).any() or (ph >= config.n_phonemes).any():
        raise ValueError(
            f"phoneme ids must be in [0, {config.n_phonemes}); got {ph.tolist()}"
        )
    if len(spk.timbre) != config.n_mel_channels:
        raise ValueError("speaker timbre length does not match n_mel_channels")

    durations = np.maximum(1, round_half_away(base_duration(ph) * spk.duration_scale)).astype(np.int64)
    pitch = base_pitch(ph) + spk.pitch_offset
    energy = spk.energy_scale * energy_profile(ph)

    rows = np.stack([phoneme_template(p, config) for p in ph])  # [L, C]
    rows = energy[:, None] * (rows * (1.0 + spk.timbre)[None, :])
    rows = rows.copy()
    rows[:, 0] += 0.01 * pitch
    mel = np.repeat(rows, durations, axis=0)
    if config.sigma_noise > 0:
        rng = np.random.default_rng(np.random.SeedSequence([int(noise_seed)]))
        mel = mel + rng.normal(0.0, config.sigma_noise, size=mel.shape)

    return Utterance(
        speaker_id=spk.speaker_id,
        phonemes=ph,
        durations=durations,
        pitch=pitch,
        energy=energy,
        mel=mel,
    )


def generate_corpus(
    n_speakers: int,
    utts_per_speaker: int,
    seed: int,
    config: CorpusConfig = CorpusConfig(),
    split_tag: str = "train",
) -> Corpus:
    """Generate a deterministic corpus; disjoint seeds give disjoint speakers."""
    if utts_per_speaker < 2:
        raise ConfigError("utts_per_speaker must be >= 2")
    if n_speakers < 1:
        raise ConfigError("n_speakers must be >= 1")

    speakers: dict[int, SpeakerParams] = {}
    utterances: list[Utterance] = []
    for idx in range(n_speakers):
        spk = make_speaker(derived_seed(seed, idx), config, speaker_id=idx)
        speakers[idx] = spk
        for j in range(utts_per_speaker):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), idx, j]))
            length = int(rng.integers(config.min_phonemes, config.max_phonemes + 1))
            ph = rng.integers(0, config.n_phonemes, size=length)
            utterances.append(
                render_utterance(spk, ph, derived_seed(seed, idx, j, 1), config)
            )

    corpus = Corpus(
        speakers=speakers,
        utterances=utterances,
        split_tag=split_tag,
        global_seed=seed,
        config=config,
    )
    corpus.validate()
    return corpus


# --- analytic embedding oracle ----------------------------------------------

ORACLE_EXTRA_DIMS = 3  # duration, pitch, energy statistics before timbre block

_DENOM_EPS = 1e-12  # template/energy products below this are excluded from ratios


def embedding_dim(config: CorpusConfig) -> int:
    return ORACLE_EXTRA_DIMS + config.n_mel_channels


def oracle_embed(u: Utterance, config: CorpusConfig = CorpusConfig()) -> np.ndarray:
    """Utterance-level speaker embedding that inverts the generative recipe.

    Components: [mean duration ratio, mean pitch residual, mean energy ratio,
    per-channel mean timbre gain]. At sigma_noise = 0 this recovers the
    speaker's (duration_scale*, pitch_offset, energy_scale, timbre) exactly,
    up to duration quantization. Stands in for an external d-vector extractor.
    """
    u.validate()
    ph = u.phonemes
    dur_stat = float(np.mean(u.durations / base_duration(ph)))
    pitch_stat = float(np.mean(u.pitch - base_pitch(ph)))
    energy_stat = float(np.mean(u.energy / energy_profile(ph)))

    templates = np.stack([phoneme_template(p, config) for p in ph])  # [L, C]
    denom = u.energy[:, None] * templates                            # [L, C]
    denom_f = np.repeat(denom, u.durations, axis=0)                  # [F, C]
    adj = u.mel.copy()
    adj[:, 0] -= 0.01 * np.repeat(u.pitch, u.durations)
    include = np.abs(denom_f) > _DENOM_EPS
    ratios = np.where(include, adj / np.where(include, denom_f, 1.0) - 1.0, 0.0)
    n_inc = include.sum(axis=0)
    timbre_stat = np.where(n_inc > 0, ratios.sum(axis=0) / np.maximum(n_inc, 1), 0.0)

    return np.concatenate(([dur_stat, pitch_stat, energy_stat], timbre_stat))


def speaker_latent_vector(spk: SpeakerParams) -> np.ndarray:
    """The speaker's true latents in embedding coordinates (reference point)."""
    return np.concatenate(
        ([spk.duration_scale, spk.pitch_offset, spk.energy_scale], spk.timbre)
    )


# --- on-disk format ----------------------------------------------------------

def _fnum(x: float) -> str:
    # 17 significant digits: exact float64 round trip, >= 12 digits always.
    return format(float(x), ".16e")


def _farr(a) -> str:
    return "[" + ",".join(_fnum(v) for v in np.asarray(a, dtype=np.float64).ravel()) + "]"


def _iarr(a) -> str:
    return "[" + ",".join(str(int(v)) for v in np.asarray(a).ravel()) + "]"


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def save_corpus(corpus: Corpus, path: str) -> None:
    """Write a corpus directory (speakers/utterances JSONL + meta), atomically."""
    corpus.validate()
    os.makedirs(path, exist_ok=True)

    spk_lines = []
    for sid in sorted(corpus.speakers):
        s = corpus.speakers[sid]
        spk_lines.append(
            '{"id":%d,"duration_scale":%s,"pitch_offset":%s,"energy_scale":%s,"timbre":%s}'
            % (sid, _fnum(s.duration_scale), _fnum(s.pitch_offset), _fnum(s.energy_scale), _farr(s.timbre))
        )
    _atomic_write(os.path.join(path, _SPEAKERS_FILE), "\n".join(spk_lines) + "\n")

    utt_lines = []
    for i, u in enumerate(corpus.utterances):
        utt_lines.append(
            '{"id":%d,"speaker_id":%d,"phonemes":%s,"durations":%s,"pitch":%s,'
            '"energy":%s,"mel":%s,"mel_shape":[%d,%d]}'
            % (
                i, u.speaker_id, _iarr(u.phonemes), _iarr(u.durations),
                _farr(u.pitch), _farr(u.energy), _farr(u.mel),
                u.mel.shape[0], u.mel.shape[1],
            )
        )
    _atomic_write(os.path.join(path, _UTTERANCES_FILE), "\n".join(utt_lines) + "\n")

    meta = {
        "format_version": CORPUS_FORMAT_VERSION,
        "split": corpus.split_tag,
        "global_seed": corpus.global_seed,
        "config": corpus.config.to_dict(),
    }
    _atomic_write(os.path.join(path, _META_FILE), json.dumps(meta, sort_keys=True, indent=1) + "\n")


def _parse_jsonl(path: str, required: set[str]):
    """Yield (lineno, record) from a JSONL file, validating required keys."""
    seen_extras: set[str] = set()
    try:
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as e:
                    raise CorpusFormatError(f"{path}:{lineno}: invalid JSON record: {e}") from e
                if not isinstance(rec, dict):
                    raise CorpusFormatError(f"{path}:{lineno}: record is not an object")
                missing = required - set(rec)
                if missing:
                    raise CorpusFormatError(f"{path}:{lineno}: missing fields {sorted(missing)}")
                seen_extras |= set(rec) - required
                yield lineno, rec
    except OSError as e:
        raise CorpusFormatError(f"{path}: cannot read: {e}") from e
    if seen_extras:
        warnings.warn(f"{path}: ignoring unknown fields {sorted(seen_extras)}")


def load_corpus(path: str) -> Corpus:
    """Load a corpus directory; raises CorpusFormatError without partial state.

    Files written by external feature pipelines are accepted: speaker latent
    fields may be absent (recorded as None; the embedding oracle is then
    unavailable and a trainable reference encoder must be used instead).
    """
    meta_path = os.path.join(path, _META_FILE)
    try:
        with open(meta_path, encoding="utf-8") as f:
            meta = json.load(f)
    except OSError as e:
        raise CorpusFormatError(f"{meta_path}: cannot read: {e}") from e
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"{meta_path}: invalid JSON: {e}") from e
    if meta.get("format_version") != CORPUS_FORMAT_VERSION:
        raise CorpusFormatError(
            f"{meta_path}: unsupported format_version {meta.get('format_version')!r}"
        )
    config = CorpusConfig.from_dict(meta.get("config", {}))

    speakers: dict[int, SpeakerParams] = {}
    latent_keys = {"duration_scale", "pitch_offset", "energy_scale", "timbre"}
    spk_path = os.path.join(path, _SPEAKERS_FILE)
    for lineno, rec in _parse_jsonl(spk_path, {"id"}):
        sid = int(rec["id"])
        if sid in speakers:
            raise CorpusFormatError(f"{spk_path}:{lineno}: duplicate speaker id {sid}")
        if latent_keys <= set(rec):
            try:
                speakers[sid] = SpeakerParams(
                    speaker_id=sid,
                    duration_scale=float(rec["duration_scale"]),
                    pitch_offset=float(rec["pitch_offset"]),
                    energy_scale=float(rec["energy_scale"]),
                    timbre=np.asarray(rec["timbre"], dtype=np.float64),
                )
            except (TypeError, ValueError) as e:
                raise CorpusFormatError(f"{spk_path}:{lineno}: bad speaker record: {e}") from e
        else:
            # externally produced features without latents: keep the id only
            speakers[sid] = None  # type: ignore[assignment]

    utterances: list[Utterance] = []
    utt_path = os.path.join(path, _UTTERANCES_FILE)
    required = {"id", "speaker_id", "phonemes", "durations", "pitch", "energy", "mel", "mel_shape"}
    for lineno, rec in _parse_jsonl(utt_path, required):
        if int(rec["id"]) != len(utterances):
            raise CorpusFormatError(
                f"{utt_path}:{lineno}: utterance ids must be contiguous from 0, got {rec['id']}"
            )
        try:
            shape = tuple(int(v) for v in rec["mel_shape"])
            mel = np.asarray(rec["mel"], dtype=np.float64).reshape(shape)
            u = Utterance(
                speaker_id=int(rec["speaker_id"]),
                phonemes=np.asarray(rec["phonemes"], dtype=np.int64),
                durations=np.asarray(rec["durations"], dtype=np.int64),
                pitch=np.asarray(rec["pitch"], dtype=np.float64),
                energy=np.asarray(rec["energy"], dtype=np.float64),
                mel=mel,
            )
            u.validate()
        except (TypeError, ValueError) as e:
            raise CorpusFormatError(f"{utt_path}:{lineno}: bad utterance record: {e}") from e
        utterances.append(u)

    if any(s is None for s in speakers.values()):
        missing = sorted(sid for sid, s in speakers.items() if s is None)
        warnings.warn(
            f"{spk_path}: speakers {missing} lack latent fields; embedding oracle unavailable"
        )
        # substitute neutral latents so validation of structure still runs
        speakers = {
            sid: (s if s is not None else _neutral_speaker(sid, config))
            for sid, s in speakers.items()
        }

    corpus = Corpus(
        speakers=speakers,
        utterances=utterances,
        split_tag=str(meta.get("split", "train")),
        global_seed=int(meta.get("global_seed", 0)),
        config=config,
    )
    corpus.validate()
    return corpus


def _neutral_speaker(sid: int, config: CorpusConfig) -> SpeakerParams:
    return SpeakerParams(
        speaker_id=sid,
        duration_scale=1.0,
        pitch_offset=0.0,
        energy_scale=1.0,
        timbre=np.zeros(config.n_mel_channels),
    )


def neutral_speaker(config: CorpusConfig = CorpusConfig(), speaker_id: int = 0) -> SpeakerParams:
    """Speaker with all latents at their identity values (test fixture)."""
    return _neutral_speaker(speaker_id, config)
