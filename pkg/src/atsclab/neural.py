"""Small function approximators with hand-derived exact gradients.

A network is a set of named input branches (fully connected + ReLU),
an optional core (single LSTM step, FC+ReLU, or pass-through) and a
softmax or linear head. Everything runs in float64 on plain numpy so
runs are bit-reproducible; backward() is exact reverse-mode
differentiation of forward(), verified against finite differences in
the test suite.

Backpropagation through time is truncated at the start of whatever
step-cache sequence is handed to backward(); a cache whose recurrent
input was freshly zeroed (episode start) cuts the time chain there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CORE_KINDS = ("lstm", "fc", "none")
HEAD_KINDS = ("softmax", "linear")


class DimensionError(ValueError):
    """Raised when an input group does not match its declared size."""


class NonFiniteGradientError(FloatingPointError):
    """Raised when gradients stop being finite (training divergence)."""


@dataclass(frozen=True)
class GroupSpec:
    """One named input branch. units == 0 means pass-through (no layer)."""

    name: str
    input_dim: int
    units: int


@dataclass(frozen=True)
class LayerSpec:
    groups: tuple[GroupSpec, ...]
    core: str
    core_units: int
    head: str
    head_dim: int

    def __post_init__(self):
        if self.core not in CORE_KINDS:
            raise ValueError(f"unknown core kind {self.core!r}")
        if self.head not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.head!r}")
        if not self.groups:
            raise ValueError("at least one input group is required")
        for g in self.groups:
            if g.input_dim < 1 or g.units < 0:
                raise ValueError(f"bad sizes in group {g.name!r}")
        if self.core != "none" and self.core_units < 1:
            raise ValueError("core_units must be >= 1")
        if self.head_dim < 1:
            raise ValueError("head_dim must be >= 1")

    @property
    def feature_dim(self) -> int:
        """Width of the concatenated branch outputs (the core input)."""
        return sum(g.units if g.units else g.input_dim for g in self.groups)

    @property
    def head_in_dim(self) -> int:
        return self.core_units if self.core != "none" else self.feature_dim


@dataclass
class NetParams:
    """Named parameter arrays plus RMSprop mean-square accumulators."""

    values: dict[str, np.ndarray]
    ms: dict[str, np.ndarray]
    version: int = 0

    def copy(self) -> "NetParams":
        return NetParams(
            values={k: v.copy() for k, v in self.values.items()},
            ms={k: v.copy() for k, v in self.ms.items()},
            version=self.version,
        )


@dataclass
class RecurrentState:
    h: np.ndarray
    c: np.ndarray


@dataclass
class StepCache:
    """Everything forward() computed that backward() needs for one step."""

    inputs: dict[str, np.ndarray]
    branch_pre: dict[str, np.ndarray]
    features: np.ndarray
    carried: bool
    h_prev: np.ndarray | None
    c_prev: np.ndarray | None
    gates: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None
    c: np.ndarray | None
    tanh_c: np.ndarray | None
    core_pre: np.ndarray | None
    core_out: np.ndarray
    out: np.ndarray


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x)
    e = np.exp(z)
    return e / e.sum()


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def orthogonal_init(rows: int, cols: int, gain: float, rng: np.random.Generator) -> np.ndarray:
    """Matrix whose smaller-dimension Gram product is gain^2 * identity."""
    if rows < 1 or cols < 1:
        raise ValueError("orthogonal_init needs rows, cols >= 1")
    flat = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q[:rows, :cols])


def init_params(spec: LayerSpec, rng: np.random.Generator, forget_bias: float = 1.0) -> NetParams:
    """Orthogonally initialized weights, zero biases (LSTM forget gate biased open)."""
    values: dict[str, np.ndarray] = {}
    relu_gain = np.sqrt(2.0)
    for g in spec.groups:
        if g.units:
            values[f"{g.name}_W"] = orthogonal_init(g.units, g.input_dim, relu_gain, rng)
            values[f"{g.name}_b"] = np.zeros(g.units)
    d = spec.feature_dim
    if spec.core == "lstm":
        h = spec.core_units
        values["lstm_Wx"] = orthogonal_init(4 * h, d, 1.0, rng)
        values["lstm_Wh"] = orthogonal_init(4 * h, h, 1.0, rng)
        b = np.zeros(4 * h)
        b[h : 2 * h] = forget_bias
        values["lstm_b"] = b
    elif spec.core == "fc":
        values["core_W"] = orthogonal_init(spec.core_units, d, relu_gain, rng)
        values["core_b"] = np.zeros(spec.core_units)
    values["head_W"] = orthogonal_init(spec.head_dim, spec.head_in_dim, 1.0, rng)
    values["head_b"] = np.zeros(spec.head_dim)
    ms = {k: np.zeros_like(v) for k, v in values.items()}
    return NetParams(values=values, ms=ms)


def zero_state(spec: LayerSpec) -> RecurrentState:
    return RecurrentState(h=np.zeros(spec.core_units), c=np.zeros(spec.core_units))


def forward(
    params: NetParams,
    spec: LayerSpec,
    inputs: dict[str, np.ndarray],
    rec: RecurrentState | None,
    want_cache: bool = False,
):
    """One step through branches -> core -> head.

    rec is the incoming recurrent state; None means a fresh episode
    (zeros, and gradients will not flow past this step). Returns
    (output, new_rec, cache). new_rec is None for non-LSTM cores.
    """
    p = params.values
    feats = []
    branch_pre: dict[str, np.ndarray] = {}
    kept_inputs: dict[str, np.ndarray] = {}
    for g in spec.groups:
        if g.name not in inputs:
            raise DimensionError(f"missing input group {g.name!r}")
        x = np.asarray(inputs[g.name], dtype=float)
        if x.shape != (g.input_dim,):
            raise DimensionError(
                f"group {g.name!r} expects shape ({g.input_dim},), got {x.shape}"
            )
        kept_inputs[g.name] = x
        if g.units:
            z = p[f"{g.name}_W"] @ x + p[f"{g.name}_b"]
            branch_pre[g.name] = z
            feats.append(np.maximum(z, 0.0))
        else:
            feats.append(x)
    features = np.concatenate(feats)

    h_prev = c_prev = gates = c = tanh_c = core_pre = None
    new_rec = None
    carried = rec is not None
    if spec.core == "lstm":
        hsz = spec.core_units
        h_prev = rec.h if carried else np.zeros(hsz)
        c_prev = rec.c if carried else np.zeros(hsz)
        z = p["lstm_Wx"] @ features + p["lstm_Wh"] @ h_prev + p["lstm_b"]
        gi = sigmoid(z[0:hsz])
        gf = sigmoid(z[hsz : 2 * hsz])
        go = sigmoid(z[2 * hsz : 3 * hsz])
        gg = np.tanh(z[3 * hsz : 4 * hsz])
        c = gf * c_prev + gi * gg
        tanh_c = np.tanh(c)
        core_out = go * tanh_c
        gates = (gi, gf, go, gg)
        new_rec = RecurrentState(h=core_out, c=c)
    elif spec.core == "fc":
        core_pre = p["core_W"] @ features + p["core_b"]
        core_out = np.maximum(core_pre, 0.0)
    else:
        core_out = features

    y = p["head_W"] @ core_out + p["head_b"]
    out = softmax(y) if spec.head == "softmax" else y

    cache = None
    if want_cache:
        cache = StepCache(
            inputs=kept_inputs,
            branch_pre=branch_pre,
            features=features,
            carried=carried,
            h_prev=h_prev,
            c_prev=c_prev,
            gates=gates,
            c=c,
            tanh_c=tanh_c,
            core_pre=core_pre,
            core_out=core_out,
            out=out,
        )
    return out, new_rec, cache


def backward(
    params: NetParams,
    spec: LayerSpec,
    caches: list[StepCache],
    d_outputs: list[np.ndarray],
) -> dict[str, np.ndarray]:
    """Gradients of sum_t <d_outputs[t], output_t> w.r.t. every parameter.

    caches must be the chronological step caches of one forward pass
    sequence; time gradients stop at caches[0] and at any step whose
    recurrent input was freshly reset (cache.carried is False).
    """
    if len(caches) != len(d_outputs):
        raise ValueError("caches and d_outputs must align")
    p = params.values
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    hsz = spec.core_units
    dh_next = np.zeros(hsz) if spec.core == "lstm" else None
    dc_next = np.zeros(hsz) if spec.core == "lstm" else None

    for cache, dout in zip(reversed(caches), reversed(d_outputs)):
        dout = np.asarray(dout, dtype=float)
        if spec.head == "softmax":
            pi = cache.out
            dy = pi * (dout - np.dot(pi, dout))
        else:
            dy = dout
        grads["head_W"] += np.outer(dy, cache.core_out)
        grads["head_b"] += dy
        dcore = p["head_W"].T @ dy

        if spec.core == "lstm":
            gi, gf, go, gg = cache.gates
            dh = dcore + dh_next
            do = dh * cache.tanh_c
            dc = dc_next + dh * go * (1.0 - cache.tanh_c**2)
            di = dc * gg
            dg = dc * gi
            df = dc * cache.c_prev
            dz = np.concatenate(
                [
                    di * gi * (1.0 - gi),
                    df * gf * (1.0 - gf),
                    do * go * (1.0 - go),
                    dg * (1.0 - gg**2),
                ]
            )
            grads["lstm_Wx"] += np.outer(dz, cache.features)
            grads["lstm_Wh"] += np.outer(dz, cache.h_prev)
            grads["lstm_b"] += dz
            dx = p["lstm_Wx"].T @ dz
            if cache.carried:
                dh_next = p["lstm_Wh"].T @ dz
                dc_next = dc * gf
            else:
                dh_next = np.zeros(hsz)
                dc_next = np.zeros(hsz)
        elif spec.core == "fc":
            dz = dcore * (cache.core_pre > 0)
            grads["core_W"] += np.outer(dz, cache.features)
            grads["core_b"] += dz
            dx = p["core_W"].T @ dz
        else:
            dx = dcore

        offset = 0
        for g in spec.groups:
            width = g.units if g.units else g.input_dim
            seg = dx[offset : offset + width]
            offset += width
            if g.units:
                dzg = seg * (cache.branch_pre[g.name] > 0)
                grads[f"{g.name}_W"] += np.outer(dzg, cache.inputs[g.name])
                grads[f"{g.name}_b"] += dzg
    return grads


def global_norm(grads: dict[str, np.ndarray]) -> float:
    # fixed key order so the float accumulation is reproducible no matter
    # how the dict was built (fresh init vs restored checkpoint)
    return float(np.sqrt(sum(float(np.sum(grads[k] * grads[k])) for k in sorted(grads))))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = 40.0) -> dict[str, np.ndarray]:
    """Scale all arrays so the global L2 norm is at most max_norm."""
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise NonFiniteGradientError(f"gradient norm is {norm}")
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads


def rmsprop_update(
    params: NetParams,
    grads: dict[str, np.ndarray],
    lr: float,
    decay: float = 0.99,
    eps: float = 1e-5,
) -> NetParams:
    """In-place RMSprop step: v <- decay*v + (1-decay)*g^2; p -= lr*g/(sqrt(v)+eps)."""
    for k, g in grads.items():
        v = params.ms[k]
        v *= decay
        v += (1.0 - decay) * g * g
        params.values[k] -= lr * g / (np.sqrt(v) + eps)
    params.version += 1
    return params


def sgd_update(params: NetParams, grads: dict[str, np.ndarray], lr: float) -> NetParams:
    """Plain gradient step p -= lr*g (used by the Q-learning agents)."""
    for k, g in grads.items():
        params.values[k] -= lr * g
    params.version += 1
    return params


def params_to_doc(params: NetParams) -> dict:
    """JSON-compatible document: name -> shape + flat float64 data."""
    return {
        "format": "atsclab-net-v1",
        "version": params.version,
        "params": {
            k: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]}
            for k, v in params.values.items()
        },
        "opt_ms": {
            k: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]}
            for k, v in params.ms.items()
        },
    }


def params_from_doc(doc: dict) -> NetParams:
    if doc.get("format") != "atsclab-net-v1":
        raise ValueError(f"unsupported network document format {doc.get('format')!r}")

    def load(entry):
        return np.array(entry["data"], dtype=float).reshape(entry["shape"])

    return NetParams(
        values={k: load(v) for k, v in doc["params"].items()},
        ms={k: load(v) for k, v in doc["opt_ms"].items()},
        version=int(doc["version"]),
    )
