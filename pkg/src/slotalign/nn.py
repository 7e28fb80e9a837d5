"""Minimal neural substrate on numpy: a tape-based reverse-mode autodiff over
dense tensors, a pre-norm causal transformer block, masked softmax
cross-entropy, and Adam with linear warmup.

Everything runs in a caller-chosen dtype: float32 for training, float64 for
gradient-check fidelity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


# ---------------------------------------------------------------------------
# autodiff tape
# ---------------------------------------------------------------------------

class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode sweep seeded with d(self)/d(self) = 1."""
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- primitive ops ------------------------------------------------------

    def __add__(self, other):
        out = _node(self.data + other.data, (self, other))

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))
        out._backward = bwd
        return out

    def __matmul__(self, other):
        out = _node(self.data @ other.data, (self, other))

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g @ np.swapaxes(other.data, -1, -2), self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(np.swapaxes(self.data, -1, -2) @ g, other.data.shape))
        out._backward = bwd
        return out

    def mul_const(self, c: np.ndarray):
        """Elementwise multiply by a constant (non-differentiated) array."""
        out = _node(self.data * c, (self,))

        def bwd(g):
            self._accum(g * c)

        out._backward = bwd
        return out

    def scale(self, c: float):
        out = _node(self.data * c, (self,))

        def bwd(g):
            if self.requires_grad:
                self._accum(g * c)
        out._backward = bwd
        return out

    def reshape(self, *shape):
        out = _node(self.data.reshape(*shape), (self,))

        def bwd(g):
            if self.requires_grad:
                self._accum(g.reshape(self.data.shape))
        out._backward = bwd
        return out

    def transpose(self, *axes):
        out = _node(self.data.transpose(*axes), (self,))
        inv = np.argsort(axes)

        def bwd(g):
            if self.requires_grad:
                self._accum(g.transpose(*inv))
        out._backward = bwd
        return out

    def rows(self, start: int, stop: int):
        """Slice leading-axis rows [start:stop]."""
        out = _node(self.data[start:stop], (self,))

        def bwd(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                full[start:stop] = g
                self._accum(full)
        out._backward = bwd
        return out

    def gelu(self):
        # tanh approximation; smooth everywhere, which keeps finite-difference
        # checks clean
        x = self.data
        c = np.sqrt(2.0 / np.pi).astype(x.dtype) if x.dtype == np.float32 else np.sqrt(2.0 / np.pi)
        inner = c * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        out = _node(0.5 * x * (1.0 + t), (self,))

        def bwd(g):
            if self.requires_grad:
                dinner = c * (1.0 + 3 * 0.044715 * x ** 2)
                dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
                self._accum(g * dy)
        out._backward = bwd
        return out


def _node(data, parents):
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents)
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    out = _node(np.concatenate([a.data, b.data], axis=0), (a, b))
    na = a.data.shape[0]

    def bwd(g):
        if a.requires_grad:
            a._accum(g[:na])
        if b.requires_grad:
            b._accum(g[na:])
    out._backward = bwd
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather; backward scatter-adds into the table."""
    out = _node(table.data[ids], (table,))

    def bwd(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)
    out._backward = bwd
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalization over the last axis."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _node(xhat * gain.data + bias.data, (x, gain, bias))
    d = x.data.shape[-1]

    def bwd(g):
        if gain.requires_grad:
            gain._accum((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            # standard layernorm backward
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            x._accum(dx)
    out._backward = bwd
    return out


def masked_softmax(scores: Tensor, additive_mask: np.ndarray) -> Tensor:
    """Row softmax of scores + additive_mask (mask entries are 0 or -inf)."""
    z = scores.data + additive_mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = _node(p, (scores,))

    def bwd(g):
        if scores.requires_grad:
            dot = (g * p).sum(axis=-1, keepdims=True)
            scores._accum(p * (g - dot))
    out._backward = bwd
    return out


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log softmax over the last axis."""
    m = x.data.max(axis=-1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = _node(z - lse, (x,))

    def bwd(g):
        if x.requires_grad:
            x._accum(g - np.exp(out.data) * g.sum(axis=-1, keepdims=True))
    out._backward = bwd
    return out


IGNORE = -1


def masked_cross_entropy(logits: Tensor, labels: np.ndarray, ignore: int = IGNORE) -> Tensor:
    """Mean of -log softmax(logits[p])[labels[p]] over positions where
    labels != ignore. Raises EmptyLossError if every label is ignored."""
    keep = np.flatnonzero(labels != ignore)
    if keep.size == 0:
        raise EmptyLossError("all labels ignored")
    sub = logits.data[keep]
    m = sub.max(axis=-1, keepdims=True)
    lse = m.squeeze(-1) + np.log(np.exp(sub - m).sum(axis=-1))
    picked = sub[np.arange(keep.size), labels[keep]]
    loss = (lse - picked).mean()
    out = _node(np.asarray(loss, dtype=logits.data.dtype), (logits,))

    def bwd(g):
        if logits.requires_grad:
            grad = np.zeros_like(logits.data)
            p = np.exp(sub - lse[:, None])
            p[np.arange(keep.size), labels[keep]] -= 1.0
            grad[keep] = p * (g / keep.size)
            logits._accum(grad)
    out._backward = bwd
    return out


class EmptyLossError(ValueError):
    """Sample contributes no loss positions; caller should skip it."""


# ---------------------------------------------------------------------------
# parameters and initialization
# ---------------------------------------------------------------------------

class Params(dict):
    """Named parameter tensors. Plain dict[str, Tensor] with helpers."""

    def zero_grad(self):
        for t in self.values():
            t.grad = None

    def astype(self, dtype) -> "Params":
        out = Params()
        for k, t in self.items():
            out[k] = Tensor(t.data.astype(dtype), requires_grad=True)
        return out

    def n_params(self) -> int:
        return sum(t.data.size for t in self.values())


def init_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32,
                 scale: float = 1.0) -> Tensor:
    bound = scale / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def init_zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def init_ones(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)




def sinusoidal_table(n: int, d: int, dtype=np.float32, base: float | None = None) -> np.ndarray:
    """Sinusoidal position codes; dot products of rows peak at equal positions,
    which lets a linear head read a position pointer directly.  The frequency
    base is tied to the table size so the wavelength spectrum covers the
    positions actually used (a fixed large base leaves most dimensions nearly
    constant over short sequences, which starves attention of position
    resolution)."""
    if base is None:
        base = float(n) / 2.0
    pos = np.arange(n)[:, None].astype(np.float64)
    dim = np.arange(0, d, 2)[None, :].astype(np.float64)
    angle = pos / np.power(base, dim / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    return table.astype(dtype)


def init_sinusoidal(n: int, d: int, dtype=np.float32, base: float | None = None) -> Tensor:
    return Tensor(sinusoidal_table(n, d, dtype, base), requires_grad=True)


# ---------------------------------------------------------------------------
# transformer block
# ---------------------------------------------------------------------------

def block_param_names(i: int) -> list[str]:
    p = f"block{i}."
    return [p + n for n in ("ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo",
                            "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2")]


def init_block(params: Params, i: int, d: int, rng: np.random.Generator, dtype=np.float32,
               identity_values: bool = False):
    p = f"block{i}."
    params[p + "ln1.g"] = init_ones(d, dtype)
    params[p + "ln1.b"] = init_zeros(d, dtype)
    for name in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
        params[p + name] = init_uniform((d, d), d, rng, dtype)
    if identity_values:
        # start the value/output path as a (scaled) identity so attention
        # initially relays its inputs -- in particular position codes --
        # unscrambled to the residual stream
        params[p + "attn.wv"] = Tensor(np.eye(d, dtype=dtype), requires_grad=True)
        params[p + "attn.wo"] = Tensor(0.5 * np.eye(d, dtype=dtype), requires_grad=True)
    params[p + "ln2.g"] = init_ones(d, dtype)
    params[p + "ln2.b"] = init_zeros(d, dtype)
    params[p + "mlp.w1"] = init_uniform((d, 4 * d), d, rng, dtype)
    params[p + "mlp.b1"] = init_zeros(4 * d, dtype)
    params[p + "mlp.w2"] = init_uniform((4 * d, d), 4 * d, rng, dtype)
    params[p + "mlp.b2"] = init_zeros(d, dtype)


def _causal_mask(T: int, dtype) -> np.ndarray:
    m = np.zeros((T, T), dtype=dtype)
    m[np.triu_indices(T, k=1)] = -np.inf
    return m


_MASK_CACHE: dict[tuple[int, str], np.ndarray] = {}


def causal_mask(T: int, dtype) -> np.ndarray:
    key = (T, np.dtype(dtype).name)
    if key not in _MASK_CACHE:
        _MASK_CACHE[key] = _causal_mask(T, dtype)
    return _MASK_CACHE[key]


def causal_attention_block(x: Tensor, params: Params, i: int, n_heads: int,
                           causal: bool = True) -> Tensor:
    """Pre-norm block: LN -> masked multi-head attention -> residual ->
    LN -> GELU MLP -> residual. With causal=True (the default), output at
    position p depends only on inputs 0..p; causal=False gives full context."""
    if not np.isfinite(x.data).all():
        raise NumericError("non-finite block input")
    T, d = x.data.shape
    if d % n_heads:
        raise ValueError(f"model dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    p = f"block{i}."

    h = layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
    q = (h @ params[p + "attn.wq"]).reshape(T, n_heads, dh).transpose(1, 0, 2)
    k = (h @ params[p + "attn.wk"]).reshape(T, n_heads, dh).transpose(1, 0, 2)
    v = (h @ params[p + "attn.wv"]).reshape(T, n_heads, dh).transpose(1, 0, 2)
    scores = (q @ k.transpose(0, 2, 1)).scale(1.0 / np.sqrt(dh))
    mask = causal_mask(T, x.data.dtype) if causal else np.zeros((T, T), dtype=x.data.dtype)
    att = masked_softmax(scores, mask)
    ctx = (att @ v).transpose(1, 0, 2).reshape(T, d)
    x = x + ctx @ params[p + "attn.wo"]

    h = layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
    h = (h @ params[p + "mlp.w1"] + params[p + "mlp.b1"]).gelu()
    return x + (h @ params[p + "mlp.w2"] + params[p + "mlp.b2"])


# ---------------------------------------------------------------------------
# Adam with linear warmup
# ---------------------------------------------------------------------------

def warmup_lr(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear ramp to peak_lr over warmup_steps, constant afterwards."""
    if warmup_steps <= 0:
        return peak_lr
    return peak_lr * min(1.0, step / warmup_steps)


@dataclass
class OptimizerState:
    peak_lr: float = 3e-4
    warmup_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Params, state: OptimizerState) -> float:
    """One Adam update from the gradients stored on `params`. Returns the lr used."""
    state.step += 1
    lr = warmup_lr(state.step, state.peak_lr, state.warmup_steps)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in params:
        g = params[name].grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name} at step {state.step}")
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return lr


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"SFAW"


def save_checkpoint(path, params: Params, version: int = 1) -> None:
    """Little-endian container: magic, version, tensor count, then per tensor
    name length/name/rank/dims and a float32 payload. Names sorted for
    byte-stable output."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", version, len(params)))
        for name in sorted(params):
            data = params[name].data.astype("<f4")
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path) -> Params:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise IOError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    off = 12
    params = Params()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims).copy()
        off += 4 * n
        params[name] = Tensor(data, requires_grad=True)
    if off != len(blob):
        raise IOError(f"{path}: trailing bytes in checkpoint")
    return params
