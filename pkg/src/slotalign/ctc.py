"""CTC baseline: a bidirectional frame classifier trained with the standard
blank-extended forward recursion, plus Viterbi forced alignment.

All dynamic programming runs in log space over the blank-extended label
(blank, l1, blank, l2, ..., blank); the blank id is the last class.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .corpus import TokenSpan, Utterance

NEG_INF = -np.inf


class InfeasibleAlignment(ValueError):
    """Too few frames to emit the label sequence."""


def _extend(labels: list[int], blank: int) -> np.ndarray:
    ext = [blank]
    for l in labels:
        ext += [l, blank]
    return np.asarray(ext, dtype=np.int64)


def min_frames(labels: list[int]) -> int:
    """Fewest frames that can emit `labels` under CTC (repeats need a blank)."""
    return len(labels) + sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def _check_feasible(T: int, labels: list[int]) -> None:
    need = min_frames(labels)
    if T < need:
        raise InfeasibleAlignment(f"{T} frames cannot emit {len(labels)} labels (need >= {need})")


def _skip_allowed(ext: np.ndarray, blank: int) -> np.ndarray:
    """skip[s]: transition s-2 -> s is legal (non-blank, no same-label repeat)."""
    S = len(ext)
    skip = np.zeros(S, dtype=bool)
    for s in range(2, S):
        skip[s] = ext[s] != blank and ext[s] != ext[s - 2]
    return skip


def ctc_loss_and_grad(log_probs: np.ndarray, labels: list[int],
                      blank: int | None = None) -> tuple[float, np.ndarray]:
    """-log total path probability and its gradient w.r.t. log_probs.

    Gradient uses alpha-beta occupancies: d(-logP)/dlogp[t,k] is minus the
    expected emission count of class k at frame t.
    """
    T, C = log_probs.shape
    if blank is None:
        blank = C - 1
    _check_feasible(T, labels)
    ext = _extend(labels, blank)
    S = len(ext)
    skip = _skip_allowed(ext, blank)
    lp = log_probs[:, ext]  # [T, S]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, 0]
    if S > 1:
        alpha[0, 1] = lp[0, 1]
    for t in range(1, T):
        stay = alpha[t - 1]
        step = np.concatenate(([NEG_INF], alpha[t - 1, :-1]))
        jump = np.concatenate(([NEG_INF, NEG_INF], alpha[t - 1, :-2]))
        jump[~skip] = NEG_INF
        alpha[t] = np.logaddexp(np.logaddexp(stay, step), jump) + lp[t]

    log_p = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2] if S > 1 else NEG_INF)

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = lp[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = lp[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        stay = beta[t + 1]
        step = np.concatenate((beta[t + 1, 1:], [NEG_INF]))
        jump = np.concatenate((beta[t + 1, 2:], [NEG_INF, NEG_INF]))
        jump[~np.concatenate((skip[2:], [False, False]))] = NEG_INF
        beta[t] = np.logaddexp(np.logaddexp(stay, step), jump) + lp[t]

    # occupancy gamma(t,s) = alpha*beta / (p_t(ext_s) * P); fold duplicates of
    # the same class within a frame in log space
    grad = np.zeros_like(log_probs)
    with np.errstate(invalid="ignore"):
        occ = np.exp(alpha + beta - lp - log_p)  # [T, S]
    occ = np.nan_to_num(occ, nan=0.0, posinf=0.0, neginf=0.0)
    for s in range(S):
        grad[:, ext[s]] -= occ[:, s]
    return float(-log_p), grad


def ctc_loss(log_probs: np.ndarray, labels: list[int], blank: int | None = None) -> float:
    return ctc_loss_and_grad(log_probs, labels, blank)[0]


def ctc_loss_node(log_probs: nn.Tensor, labels: list[int],
                  blank: int | None = None) -> nn.Tensor:
    """Autodiff wrapper: scalar loss tensor with the analytic gradient."""
    value, grad = ctc_loss_and_grad(log_probs.data, labels, blank)
    out = nn.Tensor(np.asarray(value, dtype=log_probs.data.dtype))
    out.requires_grad = log_probs.requires_grad
    out._parents = (log_probs,)

    def bwd(g):
        if log_probs.requires_grad:
            log_probs._accum(grad.astype(log_probs.data.dtype) * g)
    out._backward = bwd
    return out


def ctc_forced_align(log_probs: np.ndarray, labels: list[int], frame_period_ms: int,
                     blank: int | None = None) -> list[TokenSpan]:
    """Viterbi over the blank-extended label; each token's span covers its
    occupied frames. Blank frames between tokens belong to neither."""
    T, C = log_probs.shape
    if blank is None:
        blank = C - 1
    _check_feasible(T, labels)
    ext = _extend(labels, blank)
    S = len(ext)
    skip = _skip_allowed(ext, blank)
    lp = log_probs[:, ext]

    delta = np.full((T, S), NEG_INF)
    back = np.zeros((T, S), dtype=np.int64)
    delta[0, 0] = lp[0, 0]
    if S > 1:
        delta[0, 1] = lp[0, 1]
    back[0, :] = np.arange(S)
    for t in range(1, T):
        cand = np.full((3, S), NEG_INF)
        cand[0] = delta[t - 1]
        cand[1, 1:] = delta[t - 1, :-1]
        cand[2, 2:] = delta[t - 1, :-2]
        cand[2, ~skip] = NEG_INF
        choice = cand.argmax(axis=0)
        delta[t] = cand[choice, np.arange(S)] + lp[t]
        back[t] = np.arange(S) - choice

    s = S - 1
    if S > 1 and delta[T - 1, S - 2] > delta[T - 1, S - 1]:
        s = S - 2
    if not np.isfinite(delta[T - 1, s]):
        raise InfeasibleAlignment("no feasible Viterbi path")
    path = np.zeros(T, dtype=np.int64)
    for t in range(T - 1, -1, -1):
        path[t] = s
        s = back[t, s]

    spans = []
    for i in range(len(labels)):
        s_tok = 2 * i + 1
        frames = np.flatnonzero(path == s_tok)
        first, last = int(frames[0]), int(frames[-1])
        spans.append(TokenSpan(labels[i], first * frame_period_ms,
                               (last + 1) * frame_period_ms))
    return spans


def viterbi_log_prob(log_probs: np.ndarray, labels: list[int],
                     blank: int | None = None) -> float:
    """Log probability of the best single path (<= total path probability)."""
    T, C = log_probs.shape
    if blank is None:
        blank = C - 1
    _check_feasible(T, labels)
    ext = _extend(labels, blank)
    S = len(ext)
    skip = _skip_allowed(ext, blank)
    lp = log_probs[:, ext]
    delta = np.full(S, NEG_INF)
    delta[0] = lp[0, 0]
    if S > 1:
        delta[1] = lp[0, 1]
    for t in range(1, T):
        cand = np.full((3, S), NEG_INF)
        cand[0] = delta
        cand[1, 1:] = delta[:-1]
        cand[2, 2:] = delta[:-2]
        cand[2, ~skip] = NEG_INF
        delta = cand.max(axis=0) + lp[t]
    return float(max(delta[S - 1], delta[S - 2] if S > 1 else NEG_INF))


# ---------------------------------------------------------------------------
# the trainable frame classifier
# ---------------------------------------------------------------------------

@dataclass
class CtcConfig:
    feat_dim: int = 32
    model_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 32
    max_frames: int = 1024

    @property
    def blank(self) -> int:
        return self.vocab_size

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in (
            "feat_dim", "model_dim", "n_layers", "n_heads", "vocab_size", "max_frames")}

    @classmethod
    def from_json(cls, d: dict) -> "CtcConfig":
        return cls(**{k: int(v) for k, v in d.items()})


def init_ctc_model(cfg: CtcConfig, seed: int = 0, dtype=np.float32) -> nn.Params:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC7]))
    d = cfg.model_dim
    p = nn.Params()
    p["frame_proj.w"] = nn.init_uniform((cfg.feat_dim, d), cfg.feat_dim, rng, dtype)
    p["frame_proj.b"] = nn.init_zeros(d, dtype)
    p["pos_emb"] = nn.init_uniform((cfg.max_frames, d), d, rng, dtype)
    for i in range(cfg.n_layers):
        nn.init_block(p, i, d, rng, dtype)
    p["ln_f.g"] = nn.init_ones(d, dtype)
    p["ln_f.b"] = nn.init_zeros(d, dtype)
    p["head.w"] = nn.init_uniform((d, cfg.vocab_size + 1), d, rng, dtype)
    p["head.b"] = nn.init_zeros(cfg.vocab_size + 1, dtype)
    return p


def ctc_forward(params: nn.Params, cfg: CtcConfig, frames: np.ndarray) -> nn.Tensor:
    """Per-frame log posteriors over vocab + blank; full (non-causal) context."""
    T = frames.shape[0]
    if T > cfg.max_frames:
        raise ValueError(f"{T} frames exceeds max_frames {cfg.max_frames}")
    dtype = params["head.w"].data.dtype
    x = nn.Tensor(frames.astype(dtype)) @ params["frame_proj.w"] + params["frame_proj.b"]
    x = x + params["pos_emb"].rows(0, T)
    for i in range(cfg.n_layers):
        x = nn.causal_attention_block(x, params, i, cfg.n_heads, causal=False)
    x = nn.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    return nn.log_softmax(x @ params["head.w"] + params["head.b"])


def train_ctc(params: nn.Params, cfg: CtcConfig, corpus: list[Utterance],
              schedule, log=None) -> list[tuple[int, float, float]]:
    """Same optimizer contract as the aligner's train loop, with the CTC loss
    on transcripts only (timestamps never consulted)."""
    if not corpus:
        raise ValueError("empty corpus")
    from .aligner import TrainingError  # shared failure type
    rng = np.random.default_rng(np.random.SeedSequence([schedule.seed, 0xC7C]))
    state = nn.OptimizerState(peak_lr=schedule.peak_lr, warmup_steps=schedule.warmup_steps)
    usable = [u for u in corpus if u.frames.shape[0] >= min_frames(u.tokens)]
    trace: list[tuple[int, float, float]] = []
    step = 0
    while step < schedule.steps:
        order = rng.permutation(len(usable))
        ordered = [usable[i] for i in order]
        ordered.sort(key=lambda u: u.frames.shape[0])
        batches = [ordered[i:i + schedule.batch_size]
                   for i in range(0, len(ordered), schedule.batch_size)]
        bo = rng.permutation(len(batches))
        for bi in bo:
            if step >= schedule.steps:
                break
            batch = batches[bi]
            params.zero_grad()
            total = 0.0
            for u in batch:
                lp = ctc_forward(params, cfg, u.frames)
                # normalize by label length so long samples don't dominate
                ls = ctc_loss_node(lp, u.tokens, cfg.blank).scale(1.0 / max(1, len(u.tokens)))
                total += float(ls.data)
                ls.scale(1.0 / len(batch)).backward()
            mean_loss = total / len(batch)
            if not math.isfinite(mean_loss):
                raise TrainingError(f"non-finite CTC loss at step {step}")
            lr = nn.adam_step(params, state)
            step += 1
            if step % schedule.log_every == 0 or step == schedule.steps:
                trace.append((step, mean_loss, lr))
                if log is not None:
                    log(step, mean_loss, lr)
    return trace


def save_ctc_model(path, params: nn.Params, cfg: CtcConfig) -> None:
    nn.save_checkpoint(path, params)
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump({"kind": "ctc_baseline", "config": cfg.to_json()}, f)
        f.write("\n")


def load_ctc_model(path) -> tuple[nn.Params, CtcConfig]:
    params = nn.load_checkpoint(path)
    with open(str(path) + ".json", encoding="utf-8") as f:
        meta = json.load(f)
    if meta.get("kind") != "ctc_baseline":
        raise IOError(f"{path}: checkpoint is not a CTC baseline")
    return params, CtcConfig.from_json(meta["config"])
