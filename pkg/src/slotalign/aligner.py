"""Slot-filling forced aligner: frames and a slotted transcript run through a
causal transformer; a timestamp head scores every text position against the
discrete time grid. Labels are non-shifted, so the row at a slot scores the
index that belongs in that slot, and inference is a single forward pass.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .corpus import Utterance
from .slotting import (IGNORE, START, SlotSequence, build_slot_sequence,
                       dynamic_insertion_mask)
from .timegrid import TimeGrid, to_milliseconds


class CapacityError(ValueError):
    """Sequence longer than the model's position table."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


@dataclass
class AlignerConfig:
    feat_dim: int = 32
    model_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    text_vocab_size: int = 32
    step_ms: int = 40
    max_duration_ms: int = 30_000
    max_seq_len: int = 1024

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.step_ms, self.max_duration_ms)

    @property
    def time_id(self) -> int:
        # TIME is the last id of the extended vocabulary
        return self.text_vocab_size

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in (
            "feat_dim", "model_dim", "n_layers", "n_heads", "text_vocab_size",
            "step_ms", "max_duration_ms", "max_seq_len")}

    @classmethod
    def from_json(cls, d: dict) -> "AlignerConfig":
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass
class AlignmentResult:
    # one (token_index, start_ms, end_ms) per requested token, sorted by token index
    entries: list[tuple[int, int, int]]
    elapsed_ms: float
    forward_passes: int
    audio_duration_ms: int


def init_model(cfg: AlignerConfig, seed: int = 0, dtype=np.float32) -> nn.Params:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA1]))
    d = cfg.model_dim
    p = nn.Params()
    # content scales are matched to the unit-amplitude position codes (norm
    # ~ sqrt(d/2)); with default 1/sqrt(fan_in) bounds the position signal
    # drowns out frame and token content and the model learns a position-only
    # prior instead of reading the audio
    content_scale = np.sqrt(3.0 * d / 2.0)
    p["frame_proj.w"] = nn.init_uniform((cfg.feat_dim, d), cfg.feat_dim, rng, dtype,
                                        scale=float(np.sqrt(3.0 * cfg.feat_dim / 2.0)))
    p["frame_proj.prev_w"] = nn.init_uniform((cfg.feat_dim, d), cfg.feat_dim, rng, dtype,
                                             scale=float(np.sqrt(3.0 * cfg.feat_dim / 2.0)))
    p["frame_proj.b"] = nn.init_zeros(d, dtype)
    p["tok_emb"] = nn.init_uniform((cfg.text_vocab_size + 1, d), d, rng, dtype,
                                   scale=float(content_scale))
    p["pos_emb"] = nn.init_sinusoidal(cfg.max_seq_len, d, dtype)
    for i in range(cfg.n_layers):
        nn.init_block(p, i, d, rng, dtype, identity_values=True)
    p["ln_f.g"] = nn.init_ones(d, dtype)
    p["ln_f.b"] = nn.init_zeros(d, dtype)
    p["head.w"] = nn.init_uniform((d, cfg.grid.num_classes), d, rng, dtype)
    p["head.b"] = nn.init_zeros(cfg.grid.num_classes, dtype)
    return p


def forward(params: nn.Params, cfg: AlignerConfig, frames: np.ndarray,
            seq: SlotSequence) -> nn.Tensor:
    """Logits [len(seq) x num_classes] over the text-part positions."""
    F = frames.shape[0]
    L = len(seq)
    if F == 0:
        raise ValueError("empty audio")
    if F + L > cfg.max_seq_len:
        raise CapacityError(f"sequence length {F + L} exceeds max_seq_len {cfg.max_seq_len}")
    dtype = params["tok_emb"].data.dtype
    f32 = frames.astype(dtype)
    prev = np.vstack([np.zeros((1, frames.shape[1]), dtype=dtype), f32[:-1]])
    # kernel-2 causal frontend: each frame also sees its predecessor so the
    # stack can detect token transitions instead of inferring them from
    # attention centroids
    fx = (nn.Tensor(f32) @ params["frame_proj.w"]
          + nn.Tensor(prev) @ params["frame_proj.prev_w"]
          + params["frame_proj.b"])
    ids = np.asarray(seq.input_ids, dtype=np.int64)
    tx = nn.embedding(params["tok_emb"], ids)
    if seq.slot_kinds:
        # content-marked slots: each slot also embeds its owner token, so the
        # attention query for "where does this token start/end" does not have
        # to be fetched across positions first
        owner_ids = np.zeros(L, dtype=np.int64)
        mask = np.zeros((L, 1), dtype=dtype)
        for pos, kind, _ in seq.slot_kinds:
            token_pos = pos - 1 if kind == START else pos - 2
            owner_ids[pos] = seq.input_ids[token_pos]
            mask[pos] = 1.0
        tx = tx + nn.embedding(params["tok_emb"], owner_ids).mul_const(mask)
    # positions restart at the text boundary: frame f uses code f, text
    # position p uses code p, so a slot's code depends only on its ordinal
    # (not on the variable frame count) and frame codes stay in a small range
    x = nn.concat_rows(fx + params["pos_emb"].rows(0, F),
                       tx + params["pos_emb"].rows(0, L))
    for i in range(cfg.n_layers):
        x = nn.causal_attention_block(x, params, i, cfg.n_heads)
    x = nn.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    text = x.rows(F, F + L)
    return text @ params["head.w"] + params["head.b"]


def loss(params: nn.Params, cfg: AlignerConfig, u: Utterance, seq: SlotSequence) -> nn.Tensor:
    """Mean cross-entropy over the slot positions of one utterance."""
    logits = forward(params, cfg, u.frames, seq)
    return nn.masked_cross_entropy(logits, np.asarray(seq.labels), IGNORE)


def predict_slots(params: nn.Params, cfg: AlignerConfig, frames: np.ndarray,
                  seq: SlotSequence, frame_period_ms: int = 80,
                  mask_beyond_audio: bool = True) -> AlignmentResult:
    """Non-autoregressive decode: one forward pass, argmax per slot (ties to the
    smallest index), indices mapped back to milliseconds."""
    grid = cfg.grid
    audio_ms = frames.shape[0] * frame_period_ms
    if not seq.slot_positions:
        return AlignmentResult([], 0.0, 0, audio_ms)
    t0 = time.perf_counter()
    logits = forward(params, cfg, frames, seq).data
    if mask_beyond_audio:
        limit = min(grid.num_classes, math.ceil(audio_ms / grid.step_ms) + 1)
        logits = logits.copy()
        logits[:, limit:] = -np.inf
    per_token: dict[int, list[int]] = {}
    for pos, kind, owner in seq.slot_kinds:
        idx = int(np.argmax(logits[pos]))  # np.argmax already ties to smallest
        ms = to_milliseconds(idx, grid)
        per_token.setdefault(owner, [0, 0])[0 if kind == START else 1] = ms
    elapsed_ms = (time.perf_counter() - t0) * 1000.0
    entries = [(tok, se[0], se[1]) for tok, se in sorted(per_token.items())]
    return AlignmentResult(entries, elapsed_ms, 1, audio_ms)


def save_model(path, params: nn.Params, cfg: AlignerConfig, kind: str = "slot_aligner") -> None:
    path = Path(path)
    nn.save_checkpoint(path, params)
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump({"kind": kind, "config": cfg.to_json()}, f)
        f.write("\n")


def load_model(path) -> tuple[nn.Params, AlignerConfig, str]:
    params = nn.load_checkpoint(path)
    with open(str(path) + ".json", encoding="utf-8") as f:
        meta = json.load(f)
    return params, AlignerConfig.from_json(meta["config"]), meta.get("kind", "slot_aligner")


@dataclass
class TrainSchedule:
    steps: int = 2000
    batch_size: int = 8
    peak_lr: float = 3e-4
    warmup_steps: int = 1000
    p_dynamic: float = 0.5
    p_token: float = 0.5
    seed: int = 0
    log_every: int = 50


def train(params: nn.Params, cfg: AlignerConfig, corpus: list[Utterance],
          schedule: TrainSchedule, log=None) -> list[tuple[int, float, float]]:
    """Train on pseudo spans with fresh per-epoch dynamic slot masks; batches
    are length-bucketed. Returns the (step, loss, lr) trace."""
    if not corpus:
        raise ValueError("empty corpus")
    rng = np.random.default_rng(np.random.SeedSequence([schedule.seed, 0x7A]))
    state = nn.OptimizerState(peak_lr=schedule.peak_lr, warmup_steps=schedule.warmup_steps)
    grid = cfg.grid
    trace: list[tuple[int, float, float]] = []
    step = 0
    while step < schedule.steps:
        # one epoch: fresh masks, rebuild sequences, bucket by length
        built = []
        for u in corpus:
            mask = dynamic_insertion_mask(len(u.tokens), rng,
                                          schedule.p_dynamic, schedule.p_token)
            if not any(mask):
                continue  # no loss positions; skip this sample this epoch
            seq = build_slot_sequence(u.tokens, u.pseudo_spans, mask, grid, cfg.time_id)
            built.append((u.frames.shape[0] + len(seq), u, seq))
        built.sort(key=lambda t: t[0])
        batches = [built[i:i + schedule.batch_size]
                   for i in range(0, len(built), schedule.batch_size)]
        order = rng.permutation(len(batches))
        for bi in order:
            if step >= schedule.steps:
                break
            batch = batches[bi]
            params.zero_grad()
            total = 0.0
            for _, u, seq in batch:
                ls = loss(params, cfg, u, seq)
                total += float(ls.data)
                ls.scale(1.0 / len(batch)).backward()
            mean_loss = total / len(batch)
            if not math.isfinite(mean_loss):
                raise TrainingError(f"non-finite loss at step {step}")
            lr = nn.adam_step(params, state)
            step += 1
            every = schedule.log_every
            if (every > 0 and step % every == 0) or step == schedule.steps:
                trace.append((step, mean_loss, lr))
                if log is not None:
                    log(step, mean_loss, lr)
    return trace
