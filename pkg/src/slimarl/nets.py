"""Minimal differentiable networks in float64 numpy.

One hidden body (affine+ReLU, or a 3-gate gated-recurrent cell) feeding an
action-logit head and an optional scalar value head. Forward passes cache
activations; ``backward`` consumes a cache and accumulates analytic gradients
into a flat gradient vector. Caches are invalidated by optimizer steps.

The "embedding" of a forward pass is the final hidden activation, which is
also what downstream structure/role losses consume.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import NonFiniteGradError, ShapeError, StaleCacheError

EMBEDDING_TAPS = ("final_hidden",)


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description. ``action_dim == 0`` means a critic-only net."""

    input_dim: int
    hidden_dim: int
    action_dim: int
    recurrent: bool = False
    has_value_head: bool = False
    embedding_tap: str = "final_hidden"

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ShapeError(
                f"dims must be >= 1, got input_dim={self.input_dim} "
                f"hidden_dim={self.hidden_dim}"
            )
        if self.action_dim < 0:
            raise ShapeError(f"action_dim must be >= 0, got {self.action_dim}")
        if self.action_dim == 0 and not self.has_value_head:
            raise ShapeError("a network needs an action head or a value head")
        if self.embedding_tap not in EMBEDDING_TAPS:
            raise ShapeError(f"unknown embedding tap {self.embedding_tap!r}")

    @classmethod
    def actor(cls, input_dim, hidden_dim, action_dim, recurrent=False):
        return cls(input_dim, hidden_dim, action_dim, recurrent=recurrent)

    @classmethod
    def critic(cls, input_dim, hidden_dim, recurrent=False):
        return cls(input_dim, hidden_dim, 0, recurrent=recurrent, has_value_head=True)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "action_dim": self.action_dim,
            "recurrent": self.recurrent,
            "has_value_head": self.has_value_head,
            "embedding_tap": self.embedding_tap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


def layer_defs(spec: NetworkSpec):
    """(name, shape, fan_in) triples in the canonical flat-vector order.

    Convention: one bias per gate and per affine layer; gate matrices act on
    the concatenation [x, h], so their fan_in is input_dim + hidden_dim.
    """
    d, h, a = spec.input_dim, spec.hidden_dim, spec.action_dim
    defs = []
    if spec.recurrent:
        # Gates stacked z|r|c along the output axis so one matmul serves all
        # three; per-gate param count is still (d+h)*h + h.
        defs.append(("wx", (d, 3 * h), d + h))
        defs.append(("wh", (h, 3 * h), d + h))
        defs.append(("b", (3 * h,), d + h))
    else:
        defs.append(("w_in", (d, h), d))
        defs.append(("b_in", (h,), d))
    if a > 0:
        defs.append(("w_out", (h, a), h))
        defs.append(("b_out", (a,), h))
    if spec.has_value_head:
        defs.append(("w_val", (h, 1), h))
        defs.append(("b_val", (1,), h))
    return defs


def param_count(spec: NetworkSpec) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in layer_defs(spec))


@dataclass
class ParamStore:
    """Flat parameter vector plus gradient and Adam moment slots."""

    values: np.ndarray
    grads: np.ndarray
    moment1: np.ndarray
    moment2: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros(cls, n: int) -> "ParamStore":
        return cls(
            values=np.zeros(n),
            grads=np.zeros(n),
            moment1=np.zeros(n),
            moment2=np.zeros(n),
        )

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grads(self):
        self.grads[:] = 0.0


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> ParamStore:
    """Uniform init in +-1/sqrt(fan_in) for every tensor, drawn in layout order."""
    store = ParamStore.zeros(param_count(spec))
    off = 0
    for _, shape, fan_in in layer_defs(spec):
        n = int(np.prod(shape))
        bound = 1.0 / np.sqrt(fan_in)
        store.values[off : off + n] = rng.uniform(-bound, bound, size=n)
        off += n
    return store


def init_affine(d_in: int, d_out: int, rng: np.random.Generator) -> ParamStore:
    store = ParamStore.zeros(d_in * d_out + d_out)
    bound = 1.0 / np.sqrt(d_in)
    store.values[:] = rng.uniform(-bound, bound, size=store.size)
    return store


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_temp(logits: np.ndarray, tau: float) -> np.ndarray:
    """Temperature softmax over the last axis, max-shifted for stability."""
    if not (np.isscalar(tau) or np.ndim(tau) == 0) or not tau > 0:
        raise ValueError(f"temperature must be a positive scalar, got {tau!r}")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    z = logits / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class ForwardResult:
    """Per-step outputs of a forward pass.

    ``logits`` has shape (..., action_dim) or is None for critic-only nets,
    ``embedding`` is the final hidden activation (..., hidden_dim), ``value``
    is (...,) when the spec has a value head. ``cache`` feeds ``backward``.
    """

    logits: Optional[np.ndarray]
    embedding: np.ndarray
    value: Optional[np.ndarray]
    cache: Optional["_Cache"]
    final_hidden: Optional[np.ndarray] = None


@dataclass
class _Cache:
    kind: str
    version: int
    lead_shape: tuple
    arrays: dict = field(default_factory=dict)


class Network:
    """A spec plus a ParamStore, with named views into the flat vectors."""

    def __init__(self, spec: NetworkSpec, store: Optional[ParamStore] = None,
                 rng: Optional[np.random.Generator] = None):
        self.spec = spec
        if store is None:
            store = init_params(spec, rng or np.random.default_rng(0))
        if store.size != param_count(spec):
            raise ShapeError(
                f"store has {store.size} params, spec needs {param_count(spec)}"
            )
        self.store = store
        self.w = {}
        self.g = {}
        off = 0
        for name, shape, _ in layer_defs(spec):
            n = int(np.prod(shape))
            self.w[name] = store.values[off : off + n].reshape(shape)
            self.g[name] = store.grads[off : off + n].reshape(shape)
            off += n

    # -- forward ---------------------------------------------------------

    def _check_input(self, x, seq: bool):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.spec.input_dim:
            raise ShapeError(
                f"input feature dim {x.shape[-1]} != spec input_dim "
                f"{self.spec.input_dim} (input shape {x.shape})"
            )
        if seq and x.ndim not in (2, 3):
            raise ShapeError(f"sequence input must be (T,D) or (B,T,D), got {x.shape}")
        return x

    def _heads(self, h2d):
        logits = h2d @ self.w["w_out"] + self.w["b_out"] if self.spec.action_dim else None
        value = (h2d @ self.w["w_val"] + self.w["b_val"])[:, 0] if self.spec.has_value_head else None
        return logits, value

    def forward(self, x: np.ndarray, h0: Optional[np.ndarray] = None) -> ForwardResult:
        """Full forward pass with cache.

        Non-recurrent: ``x`` is (..., input_dim); leading axes are flattened
        internally and restored on the outputs. Recurrent: ``x`` is (T, D) or
        (B, T, D) and ``h0`` defaults to zeros of shape (hidden_dim,) / (B, H).
        """
        if self.spec.recurrent:
            return self._forward_gru(x, h0)
        x = self._check_input(x, seq=False)
        lead = x.shape[:-1]
        x2d = x.reshape(-1, self.spec.input_dim)
        pre = x2d @ self.w["w_in"] + self.w["b_in"]
        hid = np.maximum(pre, 0.0)
        logits, value = self._heads(hid)
        cache = _Cache("ff", self.store.step_count, lead,
                       {"x": x2d, "pre": pre, "hid": hid})
        return ForwardResult(
            logits=None if logits is None else logits.reshape(*lead, -1),
            embedding=hid.reshape(*lead, -1),
            value=None if value is None else value.reshape(lead),
            cache=cache,
            final_hidden=None,
        )

    def _gru_cell(self, xt, h):
        """One fused gate step: returns (z, r, c, h_next)."""
        h_dim = self.spec.hidden_dim
        gx = xt @ self.w["wx"] + self.w["b"]
        gh = h @ self.w["wh"][:, : 2 * h_dim]
        z = _sigmoid(gx[:, :h_dim] + gh[:, :h_dim])
        r = _sigmoid(gx[:, h_dim : 2 * h_dim] + gh[:, h_dim:])
        c = np.tanh(gx[:, 2 * h_dim :] + (r * h) @ self.w["wh"][:, 2 * h_dim :])
        return z, r, c, (1.0 - z) * h + z * c

    def _forward_gru(self, x, h0):
        x = self._check_input(x, seq=True)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        b, t, _ = x.shape
        h_dim = self.spec.hidden_dim
        if h0 is None:
            h = np.zeros((b, h_dim))
        else:
            h = np.asarray(h0, dtype=np.float64)
            if h.ndim == 1:
                h = np.broadcast_to(h, (b, h_dim)).copy()
            if h.shape != (b, h_dim):
                raise ShapeError(f"initial hidden shape {h.shape} != ({b},{h_dim})")
            h = h.copy()
        zs = np.empty((b, t, h_dim))
        rs = np.empty((b, t, h_dim))
        cs = np.empty((b, t, h_dim))
        h_prev = np.empty((b, t, h_dim))
        h_seq = np.empty((b, t, h_dim))
        for step in range(t):
            h_prev[:, step] = h
            z, r, c, h = self._gru_cell(x[:, step, :], h)
            zs[:, step], rs[:, step], cs[:, step], h_seq[:, step] = z, r, c, h
        flat_h = h_seq.reshape(b * t, h_dim)
        logits, value = self._heads(flat_h)
        lead = (t,) if squeeze else (b, t)
        cache = _Cache("gru", self.store.step_count, (b, t),
                       {"x": x, "h_prev": h_prev, "z": zs, "r": rs, "c": cs,
                        "h_seq": h_seq, "squeeze": squeeze})
        return ForwardResult(
            logits=None if logits is None else logits.reshape(*lead, -1),
            embedding=h_seq.reshape(*lead, -1) if not squeeze else h_seq[0],
            value=None if value is None else value.reshape(lead),
            cache=cache,
            final_hidden=h[0] if squeeze else h,
        )

    def forward_step(self, x: np.ndarray, h_prev: np.ndarray) -> ForwardResult:
        """One recurrent cell step over a batch, with a cache.

        ``x`` is (B, input_dim) and ``h_prev`` (B, hidden_dim); rows are
        independent. Backward through this cache differentiates the single
        step only (``h_prev`` is treated as a constant input), which is what
        truncated backprop-through-time consumes.
        """
        if not self.spec.recurrent:
            raise ShapeError("forward_step is for recurrent nets; use forward")
        x = self._check_input(x, seq=False)
        if x.ndim != 2:
            raise ShapeError(f"forward_step input must be (B,D), got {x.shape}")
        h_prev = np.asarray(h_prev, dtype=np.float64)
        if h_prev.shape != (x.shape[0], self.spec.hidden_dim):
            raise ShapeError(
                f"h_prev shape {h_prev.shape} != ({x.shape[0]},{self.spec.hidden_dim})")
        z, r, c, h = self._gru_cell(x, h_prev)
        logits, value = self._heads(h)
        cache = _Cache("gru_step", self.store.step_count, (x.shape[0],),
                       {"x": x, "h_prev": h_prev, "z": z, "r": r, "c": c, "h": h})
        return ForwardResult(logits=logits, embedding=h, value=value,
                             cache=cache, final_hidden=h)

    def step(self, x: np.ndarray, h: Optional[np.ndarray] = None):
        """Single-timestep inference without a cache.

        Returns (logits, embedding, value, h_next); ``h_next`` is None for
        non-recurrent nets. ``x`` is (input_dim,) or (B, input_dim).
        """
        x = self._check_input(x, seq=False)
        single = x.ndim == 1
        x2d = x[None] if single else x
        if self.spec.recurrent:
            b = x2d.shape[0]
            if h is None:
                h = np.zeros((b, self.spec.hidden_dim))
            h2d = h[None] if h.ndim == 1 else h
            if h2d.shape[0] != b:
                h2d = np.broadcast_to(h2d, (b, self.spec.hidden_dim))
            _, _, _, hid = self._gru_cell(x2d, h2d)
            h_next = hid
        else:
            hid = np.maximum(x2d @ self.w["w_in"] + self.w["b_in"], 0.0)
            h_next = None
        logits, value = self._heads(hid)
        if single:
            logits = None if logits is None else logits[0]
            value = None if value is None else value[0]
            hid_out = hid[0]
            h_next = None if h_next is None else h_next[0]
        else:
            hid_out = hid
        return logits, hid_out, value, h_next

    # -- backward --------------------------------------------------------

    def backward(self, cache: _Cache, dlogits=None, dembedding=None, dvalue=None):
        """Accumulate dLoss/dparams into the store's grads; returns dLoss/dx.

        Upstream gradients must match the shapes produced by the forward pass
        that created ``cache``. Any subset of the three heads may be given.
        """
        if cache.version != self.store.step_count:
            raise StaleCacheError(
                "forward cache predates the last optimizer step; rerun forward"
            )
        if cache.kind == "ff":
            return self._backward_ff(cache, dlogits, dembedding, dvalue)
        if cache.kind == "gru_step":
            return self._backward_gru_step(cache, dlogits, dembedding, dvalue)
        return self._backward_gru(cache, dlogits, dembedding, dvalue)

    def _head_backward(self, hid2d, n, dlogits, dembedding, dvalue, lead):
        dh = np.zeros((n, self.spec.hidden_dim))
        if dlogits is not None:
            dlo = np.asarray(dlogits, dtype=np.float64).reshape(n, -1)
            self.g["w_out"] += hid2d.T @ dlo
            self.g["b_out"] += dlo.sum(axis=0)
            dh += dlo @ self.w["w_out"].T
        if dvalue is not None:
            dv = np.asarray(dvalue, dtype=np.float64).reshape(n, 1)
            self.g["w_val"] += hid2d.T @ dv
            self.g["b_val"] += dv.sum(axis=0)
            dh += dv @ self.w["w_val"].T
        if dembedding is not None:
            dh += np.asarray(dembedding, dtype=np.float64).reshape(n, -1)
        return dh

    def _backward_ff(self, cache, dlogits, dembedding, dvalue):
        x2d, pre, hid = cache.arrays["x"], cache.arrays["pre"], cache.arrays["hid"]
        n = x2d.shape[0]
        dh = self._head_backward(hid, n, dlogits, dembedding, dvalue, cache.lead_shape)
        dpre = dh * (pre > 0.0)
        self.g["w_in"] += x2d.T @ dpre
        self.g["b_in"] += dpre.sum(axis=0)
        dx = dpre @ self.w["w_in"].T
        return dx.reshape(*cache.lead_shape, self.spec.input_dim)

    def _cell_backward(self, dh, z, r, c, hp, xt):
        """Backward through one gate step; accumulates grads, returns (dx, dh_prev)."""
        h_dim = self.spec.hidden_dim
        wh_zr = self.w["wh"][:, : 2 * h_dim]
        wh_c = self.w["wh"][:, 2 * h_dim :]
        dz = dh * (c - hp)
        dhp = dh * (1.0 - z)
        dc_pre = dh * z * (1.0 - c * c)
        drh = dc_pre @ wh_c.T
        dr = drh * hp
        dhp += drh * r
        d_gates = np.empty((dh.shape[0], 3 * h_dim))
        d_gates[:, :h_dim] = dz * z * (1.0 - z)
        d_gates[:, h_dim : 2 * h_dim] = dr * r * (1.0 - r)
        d_gates[:, 2 * h_dim :] = dc_pre
        self.g["wx"] += xt.T @ d_gates
        self.g["b"] += d_gates.sum(axis=0)
        self.g["wh"][:, : 2 * h_dim] += hp.T @ d_gates[:, : 2 * h_dim]
        self.g["wh"][:, 2 * h_dim :] += (r * hp).T @ dc_pre
        dhp += d_gates[:, : 2 * h_dim] @ wh_zr.T
        dx = d_gates @ self.w["wx"].T
        return dx, dhp

    def _backward_gru_step(self, cache, dlogits, dembedding, dvalue):
        a = cache.arrays
        b = a["x"].shape[0]
        dh = self._head_backward(a["h"], b, dlogits, dembedding, dvalue, None)
        dx, _ = self._cell_backward(dh, a["z"], a["r"], a["c"], a["h_prev"], a["x"])
        return dx

    def _backward_gru(self, cache, dlogits, dembedding, dvalue):
        a = cache.arrays
        x, h_prev, zs, rs, cs, h_seq = (
            a["x"], a["h_prev"], a["z"], a["r"], a["c"], a["h_seq"])
        b, t, h_dim = h_seq.shape
        dh_step = self._head_backward(
            h_seq.reshape(b * t, h_dim), b * t, dlogits, dembedding, dvalue, None
        ).reshape(b, t, h_dim)
        dx = np.zeros_like(x)
        dh = np.zeros((b, h_dim))
        for step in range(t - 1, -1, -1):
            dh = dh + dh_step[:, step]
            dx[:, step], dh = self._cell_backward(
                dh, zs[:, step], rs[:, step], cs[:, step], h_prev[:, step], x[:, step])
        if a["squeeze"]:
            return dx[0]
        return dx


class AffineMap:
    """A learned affine map y = x W + b with the same cache/backward contract.

    Used for observation aligners; parameters live in a ParamStore so the
    shared Adam step applies.
    """

    def __init__(self, d_in: int, d_out: int, store: Optional[ParamStore] = None,
                 rng: Optional[np.random.Generator] = None):
        self.d_in, self.d_out = d_in, d_out
        if store is None:
            store = init_affine(d_in, d_out, rng or np.random.default_rng(0))
        if store.size != d_in * d_out + d_out:
            raise ShapeError(f"affine store size {store.size} != {d_in*d_out+d_out}")
        self.store = store
        self.w = store.values[: d_in * d_out].reshape(d_in, d_out)
        self.b = store.values[d_in * d_out :]
        self.gw = store.grads[: d_in * d_out].reshape(d_in, d_out)
        self.gb = store.grads[d_in * d_out :]

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"affine input dim {x.shape[-1]} != {self.d_in}")
        lead = x.shape[:-1]
        x2d = x.reshape(-1, self.d_in)
        y = x2d @ self.w + self.b
        cache = _Cache("affine", self.store.step_count, lead, {"x": x2d})
        return y.reshape(*lead, self.d_out), cache

    def backward(self, cache: _Cache, dy: np.ndarray):
        if cache.version != self.store.step_count:
            raise StaleCacheError("affine cache predates the last optimizer step")
        x2d = cache.arrays["x"]
        dy2d = np.asarray(dy, dtype=np.float64).reshape(-1, self.d_out)
        self.gw += x2d.T @ dy2d
        self.gb += dy2d.sum(axis=0)
        dx = dy2d @ self.w.T
        return dx.reshape(*cache.lead_shape, self.d_in)


# -- spec-surface wrappers and the optimizer ------------------------------


def actor_forward(spec: NetworkSpec, store: ParamStore, obs_seq: np.ndarray,
                  initial_hidden: Optional[np.ndarray] = None) -> ForwardResult:
    """Per-step logits/embedding for an observation sequence (T, input_dim)."""
    if spec.action_dim < 1:
        raise ShapeError("actor_forward needs a spec with an action head")
    net = Network(spec, store)
    if spec.recurrent:
        return net.forward(obs_seq, h0=initial_hidden)
    obs_seq = np.asarray(obs_seq, dtype=np.float64)
    if obs_seq.ndim != 2:
        raise ShapeError(f"obs_seq must be (T, input_dim), got {obs_seq.shape}")
    return net.forward(obs_seq)


def critic_forward(spec: NetworkSpec, store: ParamStore, state: np.ndarray) -> float:
    """Scalar value estimate for one joint state."""
    if not spec.has_value_head:
        raise ShapeError("critic_forward needs a spec with a value head")
    state = np.asarray(state, dtype=np.float64)
    if state.ndim != 1:
        raise ShapeError(f"state must be a vector, got shape {state.shape}")
    net = Network(spec, store)
    _, _, value, _ = net.step(state)
    return float(value)


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected adaptive-moment update; rejects non-finite gradients."""
    g = store.grads
    if not np.all(np.isfinite(g)):
        bad = int(np.sum(~np.isfinite(g)))
        raise NonFiniteGradError(f"{bad} non-finite gradient entries; step aborted")
    store.step_count += 1
    t = store.step_count
    store.moment1 *= beta1
    store.moment1 += (1.0 - beta1) * g
    store.moment2 *= beta2
    store.moment2 += (1.0 - beta2) * g * g
    m_hat = store.moment1 / (1.0 - beta1 ** t)
    v_hat = store.moment2 / (1.0 - beta2 ** t)
    store.values -= lr * m_hat / (np.sqrt(v_hat) + eps)
