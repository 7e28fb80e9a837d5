"""Synthetic alignment corpus: utterances with exact gold spans, corrupted
pseudo labels, long-form mixtures, and manifest / feature-file round-trips.

Each vocabulary entry gets a fixed prototype feature vector; an utterance's
frames are that prototype plus Gaussian noise, so token identity is readable
from the features while boundary timing stays exactly on the frame grid.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class MixError(ValueError):
    """Incompatible utterances passed to the long-form mixer."""


class ManifestError(ValueError):
    """Malformed manifest line."""


@dataclass(frozen=True)
class TokenSpan:
    token_id: int
    start_ms: int
    end_ms: int


@dataclass
class Utterance:
    id: str
    frames: np.ndarray          # [num_frames, feat_dim] float32
    frame_period_ms: int
    tokens: list[int]
    gold_spans: list[TokenSpan]
    pseudo_spans: list[TokenSpan]

    @property
    def duration_ms(self) -> int:
        return self.frames.shape[0] * self.frame_period_ms


@dataclass
class CorpusConfig:
    vocab_size: int = 32
    feat_dim: int = 32
    noise_sigma: float = 0.1
    frame_period_ms: int = 80
    token_duration_range_ms: tuple[int, int] = (80, 640)
    tokens_per_utt_range: tuple[int, int] = (5, 40)
    mix_target_range_ms: tuple[int, int] = (2000, 20000)
    max_duration_ms: int = 300_000
    rng_seed: int = 0
    # token ids drawn from [token_range). Defaults to the whole vocabulary;
    # a disjoint subrange acts as a second "language".
    token_range: tuple[int, int] | None = None

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        for lo, hi in (self.token_duration_range_ms, self.tokens_per_utt_range,
                       self.mix_target_range_ms):
            if lo > hi:
                raise ValueError(f"empty range ({lo}, {hi})")


def prototype_vectors(cfg: CorpusConfig) -> np.ndarray:
    """Per-vocab-entry feature prototypes, a pure function of the corpus seed."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 0xF0]))
    protos = rng.standard_normal((cfg.vocab_size, cfg.feat_dim))
    return (protos / np.linalg.norm(protos, axis=1, keepdims=True)).astype(np.float32)


def gen_utterance(cfg: CorpusConfig, rng: np.random.Generator, utt_id: str = "utt",
                  protos: np.ndarray | None = None) -> Utterance:
    """Draw token count, ids, and frame-rounded durations; gold spans tile
    [0, total) contiguously and pseudo spans start equal to gold."""
    if protos is None:
        protos = prototype_vectors(cfg)
    lo, hi = cfg.tokens_per_utt_range
    n = int(rng.integers(lo, hi + 1))
    t0, t1 = cfg.token_range if cfg.token_range is not None else (0, cfg.vocab_size)
    tokens = [int(t) for t in rng.integers(t0, t1, size=n)]
    dlo, dhi = cfg.token_duration_range_ms
    # whole-frame durations so gold boundaries sit exactly on grid lines
    flo = max(1, -(-dlo // cfg.frame_period_ms))
    fhi = max(flo, dhi // cfg.frame_period_ms)
    dur_frames = rng.integers(flo, fhi + 1, size=n)

    spans = []
    cursor = 0
    frame_tokens = []
    for tok, df in zip(tokens, dur_frames):
        ms = int(df) * cfg.frame_period_ms
        spans.append(TokenSpan(tok, cursor, cursor + ms))
        frame_tokens += [tok] * int(df)
        cursor += ms

    frames = protos[frame_tokens].astype(np.float64)
    if cfg.noise_sigma > 0:
        frames = frames + rng.normal(0.0, cfg.noise_sigma, size=frames.shape)
    return Utterance(utt_id, frames.astype(np.float32), cfg.frame_period_ms,
                     tokens, spans, list(spans))


def corrupt_labels(u: Utterance, bias_ms: int, jitter_sigma_ms: float,
                   rng: np.random.Generator) -> Utterance:
    """Simulated pseudo-label noise: shift every gold boundary by bias plus
    rounded Gaussian jitter, then repair ordering/length/extent."""
    frame = u.frame_period_ms
    total = u.duration_ms
    pseudo = []
    prev_start = 0
    for s in u.gold_spans:
        j1 = round(rng.normal(0.0, jitter_sigma_ms)) if jitter_sigma_ms > 0 else 0
        j2 = round(rng.normal(0.0, jitter_sigma_ms)) if jitter_sigma_ms > 0 else 0
        start = int(np.clip(s.start_ms + bias_ms + j1, 0, total - frame))
        start = max(start, prev_start)  # keep starts sorted
        end = int(np.clip(s.end_ms + bias_ms + j2, start + frame, total))
        pseudo.append(TokenSpan(s.token_id, start, end))
        prev_start = start
    return replace(u, pseudo_spans=pseudo)


def mix_long_form(pool: list[Utterance], target_ms: int, rng: np.random.Generator,
                  max_duration_ms: int = 300_000, utt_id: str = "mix") -> Utterance:
    """Concatenate randomly drawn pool members until total >= target_ms (or the
    next draw would exceed max_duration_ms). Spans shift by the running offset."""
    if not pool:
        raise MixError("empty pool")
    feat_dim = pool[0].frames.shape[1]
    period = pool[0].frame_period_ms
    for u in pool:
        if u.frames.shape[1] != feat_dim:
            raise MixError(f"feat_dim mismatch: {u.frames.shape[1]} vs {feat_dim}")
        if u.frame_period_ms != period:
            raise MixError(f"frame period mismatch: {u.frame_period_ms} vs {period}")

    frames = []
    tokens: list[int] = []
    gold: list[TokenSpan] = []
    pseudo: list[TokenSpan] = []
    offset = 0
    while offset < target_ms:
        u = pool[int(rng.integers(len(pool)))]
        if offset + u.duration_ms > max_duration_ms and offset > 0:
            break
        frames.append(u.frames)
        tokens += u.tokens
        gold += [TokenSpan(s.token_id, s.start_ms + offset, s.end_ms + offset) for s in u.gold_spans]
        pseudo += [TokenSpan(s.token_id, s.start_ms + offset, s.end_ms + offset) for s in u.pseudo_spans]
        offset += u.duration_ms
    return Utterance(utt_id, np.concatenate(frames, axis=0), period, tokens, gold, pseudo)


# ---------------------------------------------------------------------------
# feature files and manifests
# ---------------------------------------------------------------------------

_FEAT_MAGIC = b"SFA1"


def write_features(path, frames: np.ndarray) -> None:
    """Binary little-endian: magic "SFA1", u32 version=1, u32 num_frames,
    u32 feat_dim, then frame-major float32 payload."""
    frames = np.ascontiguousarray(frames, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_FEAT_MAGIC)
        f.write(struct.pack("<III", 1, frames.shape[0], frames.shape[1]))
        f.write(frames.tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _FEAT_MAGIC:
        raise IOError(f"{path}: bad feature magic {blob[:4]!r}")
    version, num_frames, feat_dim = struct.unpack_from("<III", blob, 4)
    if version != 1:
        raise IOError(f"{path}: unsupported feature version {version}")
    need = 16 + 4 * num_frames * feat_dim
    if len(blob) < need:
        raise IOError(f"{path}: truncated feature file ({len(blob)} < {need} bytes)")
    return np.frombuffer(blob, dtype="<f4", count=num_frames * feat_dim,
                         offset=16).reshape(num_frames, feat_dim).copy()


def _spans_to_json(spans):
    return [[s.token_id, s.start_ms, s.end_ms] for s in spans]


def _spans_from_json(rows):
    return [TokenSpan(int(t), int(a), int(b)) for t, a, b in rows]


def write_manifest(path, utterances: list[Utterance], feat_dir=None) -> None:
    """JSONL manifest; one record per utterance, features in sibling .feat files."""
    path = Path(path)
    feat_dir = Path(feat_dir) if feat_dir is not None else path.parent
    feat_dir.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for u in utterances:
            feat_path = feat_dir / f"{u.id}.feat"
            write_features(feat_path, u.frames)
            rec = {
                "id": u.id,
                "feat_path": str(feat_path),
                "num_frames": int(u.frames.shape[0]),
                "frame_period_ms": u.frame_period_ms,
                "tokens": u.tokens,
                "gold": _spans_to_json(u.gold_spans),
                "pseudo": _spans_to_json(u.pseudo_spans),
            }
            f.write(json.dumps(rec) + "\n")
    tmp.replace(path)


def read_manifest(path) -> list[Utterance]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                frames = read_features(rec["feat_path"])
                if frames.shape[0] != rec["num_frames"]:
                    raise IOError(f"{rec['feat_path']}: frame count mismatch")
                u = Utterance(rec["id"], frames, int(rec["frame_period_ms"]),
                              [int(t) for t in rec["tokens"]],
                              _spans_from_json(rec["gold"]),
                              _spans_from_json(rec["pseudo"]))
            except (KeyError, ValueError, TypeError) as e:
                raise ManifestError(f"{path}: line {lineno}: {e}") from e
            out.append(u)
    return out
