"""Slot-augmented sequences: interleave timestamp slots into a transcript.

A slotted token contributes three positions: the token itself, a start slot
and an end slot (both the same special TIME id). Labels sit at the slot
positions themselves (no next-token shift); everything else is IGNORE.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .timegrid import TimeGrid, discretize

# Label sentinel for positions excluded from the loss. Outside [0, num_classes)
# for every grid, so masking is unambiguous.
IGNORE = -1

START = "start"
END = "end"


class SlotRequestError(ValueError):
    """Bad slot insertion request (duplicate or out-of-range token index)."""


@dataclass
class SlotSequence:
    """Slotted input ids, aligned labels, and bookkeeping for routing predictions."""

    input_ids: list[int]
    labels: list[int]
    slot_positions: list[int]
    # (position, "start"|"end", owning token index), one per slot, in order
    slot_kinds: list[tuple[int, str, int]] = field(default_factory=list)
    time_id: int = -1

    def __len__(self) -> int:
        return len(self.input_ids)


def validate(seq: SlotSequence) -> None:
    """Check the structural invariants; raises AssertionError on violation."""
    assert len(seq.labels) == len(seq.input_ids)
    slots = set(seq.slot_positions)
    assert seq.slot_positions == sorted(slots), "slot positions must be sorted and unique"
    for p, tok in enumerate(seq.input_ids):
        if p in slots:
            assert tok == seq.time_id
        else:
            assert seq.labels[p] == IGNORE
    assert len(seq.slot_kinds) == len(seq.slot_positions)
    for (p, kind, _), pos in zip(seq.slot_kinds, seq.slot_positions):
        assert p == pos and kind in (START, END)
    # start/end slots come in adjacent (start, end) pairs
    for i in range(0, len(seq.slot_kinds), 2):
        ps, ks, owner_s = seq.slot_kinds[i]
        pe, ke, owner_e = seq.slot_kinds[i + 1]
        assert ks == START and ke == END and owner_s == owner_e and pe == ps + 1


def build_slot_sequence(tokens, spans, mask, grid: TimeGrid, time_id: int) -> SlotSequence:
    """Interleave TIME slot pairs after each masked-in token, labeling slots with
    the discretized span boundaries."""
    if not (len(tokens) == len(spans) == len(mask)):
        raise ValueError("tokens, spans and mask must be the same length")
    input_ids: list[int] = []
    labels: list[int] = []
    positions: list[int] = []
    kinds: list[tuple[int, str, int]] = []
    for i, (tok, span) in enumerate(zip(tokens, spans)):
        input_ids.append(tok)
        labels.append(IGNORE)
        if mask[i]:
            p = len(input_ids)
            input_ids += [time_id, time_id]
            labels += [discretize(span.start_ms, grid), discretize(span.end_ms, grid)]
            positions += [p, p + 1]
            kinds += [(p, START, i), (p + 1, END, i)]
    return SlotSequence(input_ids, labels, positions, kinds, time_id)


def build_inference_sequence(tokens, requested_token_indices, time_id: int) -> SlotSequence:
    """Slot pairs only after the requested tokens; labels all IGNORE."""
    requested = list(requested_token_indices)
    if len(set(requested)) != len(requested):
        raise SlotRequestError(f"duplicate token indices in request: {requested}")
    for i in requested:
        if not 0 <= i < len(tokens):
            raise SlotRequestError(f"token index {i} outside [0, {len(tokens)})")
    want = set(requested)
    input_ids: list[int] = []
    labels: list[int] = []
    positions: list[int] = []
    kinds: list[tuple[int, str, int]] = []
    for i, tok in enumerate(tokens):
        input_ids.append(tok)
        labels.append(IGNORE)
        if i in want:
            p = len(input_ids)
            input_ids += [time_id, time_id]
            labels += [IGNORE, IGNORE]
            positions += [p, p + 1]
            kinds += [(p, START, i), (p + 1, END, i)]
    return SlotSequence(input_ids, labels, positions, kinds, time_id)


def dynamic_insertion_mask(n_tokens: int, rng: np.random.Generator,
                           p_dynamic: float = 0.5, p_token: float = 0.5) -> list[bool]:
    """Per-sample randomized slot omission.

    One sample-level draw decides whether to randomize at all; if not, every
    token gets its slot pair. Otherwise each token keeps its pair with
    probability p_token.
    """
    if not (0.0 <= p_dynamic <= 1.0 and 0.0 <= p_token <= 1.0):
        raise ValueError(f"probabilities must be in [0,1]: {p_dynamic}, {p_token}")
    if rng.random() >= p_dynamic:
        return [True] * n_tokens
    return [bool(rng.random() < p_token) for _ in range(n_tokens)]


def recover_tokens_and_mask(seq: SlotSequence) -> tuple[list[int], list[bool]]:
    """Invert build_slot_sequence: original token list plus insertion mask."""
    slots = set(seq.slot_positions)
    tokens = [tok for p, tok in enumerate(seq.input_ids) if p not in slots]
    mask = [False] * len(tokens)
    for _, kind, owner in seq.slot_kinds:
        if kind == START:
            mask[owner] = True
    return tokens, mask
