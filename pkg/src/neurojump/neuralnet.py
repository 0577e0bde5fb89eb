"""Shared encoder with per-horizon heads emitting jump-diffusion parameters.

Layout of one head's raw outputs: ``[mu, sigma, lam, *jump]`` with jump raws
``[p, mu1, mu2, tau1, tau2]`` (Gaussian mixture) or ``[eta, beta_up,
beta_down]`` (double exponential).

Monotone features (entropy, DET and optionally a momentum feature) bypass
the free encoder and enter every head only through a linear path whose
risk-relevant entries are sign-fixed and nonnegative.  Entropy raises the
sigma and lambda raws, DET lowers them, momentum raises the drift; all
output transforms are nondecreasing, so the orderings hold exactly for any
parameter values that satisfy the masks.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .density import ParamBatch
from .errors import DomainError, PersistenceError, ShapeError, StateError

SIGMA_FLOOR = 1e-5
TAU_FLOOR = 1e-4
JUMP_NAMES = {"gmm": ("p", "mu1", "mu2", "tau1", "tau2"), "dexp": ("eta", "beta_up", "beta_down")}
MAGIC = b"NJNET\x00"
FORMAT_VERSION = 1


def softplus(x):
    # exact identity above 40, where log1p(exp(x)) rounds to x
    return np.where(x > 40.0, x, np.log1p(np.exp(np.minimum(x, 40.0))))


def logistic(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def inverse_softplus(y):
    return float(np.log(np.expm1(y)))


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    entropy_idx: int
    det_idx: int
    momentum_idx: Optional[int] = None
    encoder_layers: tuple = (64, 64)
    head_hidden: int = 32
    horizons: tuple = ("1d", "5d")
    lam_bounds: tuple = (0.5, 1.5)
    out_scales: tuple = (0.01, 0.0224)
    dropout_rate: float = 0.0
    jump_family: str = "gmm"

    def __post_init__(self):
        object.__setattr__(self, "encoder_layers", tuple(int(v) for v in self.encoder_layers))
        object.__setattr__(self, "horizons", tuple(self.horizons))
        object.__setattr__(self, "lam_bounds", tuple(float(v) for v in self.lam_bounds))
        object.__setattr__(self, "out_scales", tuple(float(v) for v in self.out_scales))
        if self.input_dim < 1 or self.head_hidden < 1 or any(v < 1 for v in self.encoder_layers):
            raise ShapeError("layer sizes must be >= 1")
        if not self.encoder_layers:
            raise ShapeError("need at least one encoder layer")
        mono = self.monotone_indices
        if len(set(mono)) != len(mono) or any(not 0 <= i < self.input_dim for i in mono):
            raise ShapeError("monotone feature indices must be distinct and < input_dim")
        if len(mono) >= self.input_dim:
            raise ShapeError("need at least one free input feature")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise DomainError("dropout_rate must lie in [0, 1)")
        if self.jump_family not in JUMP_NAMES:
            raise DomainError(f"unknown jump family {self.jump_family!r}")
        if not (len(self.horizons) == len(self.lam_bounds) == len(self.out_scales)) or not self.horizons:
            raise ShapeError("horizons, lam_bounds and out_scales must have equal nonzero length")
        if any(b <= 0 for b in self.lam_bounds) or any(s <= 0 for s in self.out_scales):
            raise DomainError("lam_bounds and out_scales must be positive")

    @property
    def monotone_indices(self):
        idx = [self.entropy_idx, self.det_idx]
        if self.momentum_idx is not None:
            idx.append(self.momentum_idx)
        return tuple(idx)

    @property
    def free_indices(self):
        mono = set(self.monotone_indices)
        return tuple(i for i in range(self.input_dim) if i not in mono)

    @property
    def n_out(self):
        return 3 + len(JUMP_NAMES[self.jump_family])

    def to_dict(self):
        return asdict(self)


@dataclass
class HeadOutput:
    params: dict  # horizon -> ParamBatch
    raw: dict  # horizon -> (n, n_out) raw activations

    def horizon_params(self, h, i=0):
        return self.params[h].row(i, h)


def _mono_layout(spec):
    """Sign and constraint mask of the monotone path, shape (n_mono, n_out)."""
    n_mono = len(spec.monotone_indices)
    sign = np.ones((n_mono, spec.n_out))
    mask = np.zeros((n_mono, spec.n_out), dtype=bool)
    mask[0, 1:3] = True  # entropy -> sigma, lam (increasing)
    mask[1, 1:3] = True  # DET -> sigma, lam (decreasing)
    sign[1, 1:3] = -1.0
    if spec.momentum_idx is not None:
        mask[2, 0] = True  # momentum -> drift (increasing)
    return sign, mask


class NetworkState:
    """Weights, constraint masks and forward cache of the network."""

    def __init__(self, spec: NetworkSpec, params: dict, seed: int):
        self.spec = spec
        self.params = params
        self.seed = int(seed)
        self.training = False
        self._rng = np.random.default_rng(self.seed)
        self._cache = None
        sign, mask = _mono_layout(spec)
        self.signs = {f"head{k}.mono": sign for k in range(len(spec.horizons))}
        self.masks = {f"head{k}.mono": mask for k in range(len(spec.horizons))}

    # -- parameter bookkeeping ---------------------------------------------

    @property
    def names(self):
        return list(self.params.keys())

    def copy(self):
        other = NetworkState(self.spec, {k: v.copy() for k, v in self.params.items()}, self.seed)
        other.training = self.training
        other._rng = np.random.default_rng(self.seed)
        other._rng.bit_generator.state = self._rng.bit_generator.state
        return other

    def flat(self):
        return np.concatenate([v.ravel() for v in self.params.values()])

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=float)
        pos = 0
        for k, v in self.params.items():
            self.params[k] = vec[pos : pos + v.size].reshape(v.shape).copy()
            pos += v.size
        if pos != vec.size:
            raise ShapeError("flat vector length mismatch")

    def flat_grad(self, grads):
        return np.concatenate([grads[k].ravel() for k in self.params])

    def n_params(self):
        return sum(v.size for v in self.params.values())

    def violations(self):
        return int(sum(np.count_nonzero(self.params[k][m] < 0) for k, m in self.masks.items()))

    def reseed_dropout(self, seed):
        self._rng = np.random.default_rng(seed)

    # -- forward / backward ------------------------------------------------

    def forward(self, x, keep_cache=True) -> HeadOutput:
        spec = self.spec
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != spec.input_dim:
            raise ShapeError(f"expected input of width {spec.input_dim}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DomainError("non-finite network input")
        p = self.params
        xf = x[:, spec.free_indices]
        xm = x[:, spec.monotone_indices]
        drop = self.training and spec.dropout_rate > 0.0
        keep = 1.0 - spec.dropout_rate
        acts = [xf]
        pre = []
        dmasks = []
        h = xf
        for i in range(len(spec.encoder_layers)):
            z = h @ p[f"enc{i}.W"] + p[f"enc{i}.b"]
            h = np.maximum(z, 0.0)
            if drop:
                dm = (self._rng.random(h.shape) < keep) / keep
                h = h * dm
            else:
                dm = None
            pre.append(z)
            dmasks.append(dm)
            acts.append(h)
        out_params, out_raw, head_cache = {}, {}, []
        for k, hz in enumerate(spec.horizons):
            a = h @ p[f"head{k}.W1"] + p[f"head{k}.b1"]
            g = np.maximum(a, 0.0)
            weff = self.signs[f"head{k}.mono"] * p[f"head{k}.mono"]
            raw = g @ p[f"head{k}.W2"] + p[f"head{k}.b2"] + xm @ weff
            vals = self._transform(raw, k)
            out_raw[hz] = raw
            out_params[hz] = ParamBatch(spec.jump_family, vals[:, 0], vals[:, 1], vals[:, 2], vals[:, 3:])
            head_cache.append((a, g, raw))
        if keep_cache:
            self._cache = {"xm": xm, "acts": acts, "pre": pre, "dmasks": dmasks, "heads": head_cache}
        return HeadOutput(out_params, out_raw)

    def _transform(self, raw, k):
        spec = self.spec
        scale = spec.out_scales[k]
        out = np.empty_like(raw)
        out[:, 0] = scale * raw[:, 0]
        out[:, 1] = scale * softplus(raw[:, 1]) + SIGMA_FLOOR
        out[:, 2] = spec.lam_bounds[k] * logistic(raw[:, 2])
        if spec.jump_family == "gmm":
            out[:, 3] = logistic(raw[:, 3])
            out[:, 4:6] = scale * raw[:, 4:6]
            out[:, 6:8] = scale * softplus(raw[:, 6:8]) + TAU_FLOOR
        else:
            out[:, 3] = logistic(raw[:, 3])
            out[:, 4:6] = scale * softplus(raw[:, 4:6]) + TAU_FLOOR
        return out

    def _transform_grad(self, raw, k):
        """Elementwise derivative of the output transform."""
        spec = self.spec
        scale = spec.out_scales[k]
        d = np.empty_like(raw)
        d[:, 0] = scale
        d[:, 1] = scale * logistic(raw[:, 1])
        s = logistic(raw[:, 2])
        d[:, 2] = spec.lam_bounds[k] * s * (1.0 - s)
        s = logistic(raw[:, 3])
        d[:, 3] = s * (1.0 - s)
        if spec.jump_family == "gmm":
            d[:, 4:6] = scale
            d[:, 6:8] = scale * logistic(raw[:, 6:8])
        else:
            d[:, 4:6] = scale * logistic(raw[:, 4:6])
        return d

    def backward(self, upstream: dict) -> dict:
        """Gradients of ``sum_i sum_h <upstream[h][i], params_h(x_i)>``.

        ``upstream[h]`` is an (n, n_out) array of derivatives with respect to
        the transformed parameters ``[mu, sigma, lam, *jump]``.  Gradients of
        masked weights are returned unprojected.
        """
        if self._cache is None:
            raise StateError("backward called without a cached forward pass")
        spec, p, c = self.spec, self.params, self._cache
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        h = c["acts"][-1]
        dh = np.zeros_like(h)
        for k, hz in enumerate(spec.horizons):
            up = upstream.get(hz)
            if up is None:
                continue
            a, g, raw = c["heads"][k]
            draw = np.asarray(up, dtype=float) * self._transform_grad(raw, k)
            grads[f"head{k}.W2"] = g.T @ draw
            grads[f"head{k}.b2"] = draw.sum(axis=0)
            grads[f"head{k}.mono"] = self.signs[f"head{k}.mono"] * (c["xm"].T @ draw)
            dg = draw @ p[f"head{k}.W2"].T
            da = dg * (a > 0)
            grads[f"head{k}.W1"] = h.T @ da
            grads[f"head{k}.b1"] = da.sum(axis=0)
            dh += da @ p[f"head{k}.W1"].T
        for i in reversed(range(len(spec.encoder_layers))):
            if c["dmasks"][i] is not None:
                dh = dh * c["dmasks"][i]
            dz = dh * (c["pre"][i] > 0)
            grads[f"enc{i}.W"] = c["acts"][i].T @ dz
            grads[f"enc{i}.b"] = dz.sum(axis=0)
            if i > 0:
                dh = dz @ p[f"enc{i}.W"].T
        return grads

    # -- constraints -------------------------------------------------------

    def project_constraints(self):
        for k, m in self.masks.items():
            w = self.params[k]
            w[m] = np.maximum(w[m], 0.0)
        return self


def init_network(spec: NetworkSpec, seed: int) -> NetworkState:
    """Fan-in uniform initialization; outputs start near sensible values."""
    rng = np.random.default_rng(seed)

    def uniform(fan_in, shape, gain=1.0):
        bound = gain / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params = {}
    width = len(spec.free_indices)
    for i, size in enumerate(spec.encoder_layers):
        params[f"enc{i}.W"] = uniform(width, (width, size))
        params[f"enc{i}.b"] = np.zeros(size)
        width = size
    n_mono = len(spec.monotone_indices)
    sign, mask = _mono_layout(spec)
    for k in range(len(spec.horizons)):
        params[f"head{k}.W1"] = uniform(width, (width, spec.head_hidden))
        params[f"head{k}.b1"] = np.zeros(spec.head_hidden)
        params[f"head{k}.W2"] = uniform(spec.head_hidden, (spec.head_hidden, spec.n_out), gain=0.1)
        b2 = np.zeros(spec.n_out)
        b2[1] = inverse_softplus(0.8)
        b2[2] = np.log(0.02 / 0.98)
        if spec.jump_family == "gmm":
            b2[4:6] = (-2.0, 2.0)
            b2[6:8] = inverse_softplus(1.5)
        else:
            b2[4:6] = inverse_softplus(2.0)
        params[f"head{k}.b2"] = b2
        mono = uniform(n_mono, (n_mono, spec.n_out), gain=0.1)
        mono[mask] = np.abs(mono[mask])
        params[f"head{k}.mono"] = mono
    return NetworkState(spec, params, seed)


def forward(state: NetworkState, x) -> HeadOutput:
    return state.forward(x)


def backward(state: NetworkState, upstream: dict) -> dict:
    return state.backward(upstream)


def project_constraints(state: NetworkState) -> NetworkState:
    return state.project_constraints()


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save(state: NetworkState) -> bytes:
    """Serialize to the versioned, checksummed binary format."""
    blocks = [(k, v) for k, v in state.params.items()]
    blocks += [(f"mask:{k}", m.astype(float)) for k, m in state.masks.items()]
    header = {
        "spec": state.spec.to_dict(),
        "seed": state.seed,
        "blocks": [[k, list(v.shape)] for k, v in blocks],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hb)), hb, struct.pack("<I", zlib.crc32(hb))]
    for _, v in blocks:
        data = np.ascontiguousarray(v, dtype="<f8").tobytes()
        out.append(data)
        out.append(struct.pack("<I", zlib.crc32(data)))
    return b"".join(out)


def load(data: bytes, expected_spec: Optional[NetworkSpec] = None, input_dim: Optional[int] = None) -> NetworkState:
    """Inverse of :func:`save`; validates version, checksums and dimensions."""
    if data[: len(MAGIC)] != MAGIC:
        raise PersistenceError("not a network file (bad magic)")
    pos = len(MAGIC)
    try:
        version, hlen = struct.unpack_from("<II", data, pos)
    except struct.error as exc:
        raise PersistenceError("truncated header") from exc
    if version != FORMAT_VERSION:
        raise PersistenceError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    pos += 8
    hb = data[pos : pos + hlen]
    pos += hlen
    if len(data) < pos + 4 or struct.unpack_from("<I", data, pos)[0] != zlib.crc32(hb):
        raise PersistenceError("header checksum mismatch")
    pos += 4
    header = json.loads(hb.decode("utf-8"))
    spec = NetworkSpec(**header["spec"])
    if expected_spec is not None and spec != expected_spec:
        raise PersistenceError("network spec mismatch")
    if input_dim is not None and spec.input_dim != input_dim:
        raise PersistenceError(f"input_dim mismatch: file has {spec.input_dim}, expected {input_dim}")
    params, masks = {}, {}
    for name, shape in header["blocks"]:
        nbytes = 8 * int(np.prod(shape))
        chunk = data[pos : pos + nbytes]
        pos += nbytes
        if len(chunk) != nbytes or len(data) < pos + 4:
            raise PersistenceError("truncated parameter block")
        if struct.unpack_from("<I", data, pos)[0] != zlib.crc32(chunk):
            raise PersistenceError(f"checksum mismatch in block {name}")
        pos += 4
        arr = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(float)
        if name.startswith("mask:"):
            masks[name[5:]] = arr.astype(bool)
        else:
            params[name] = arr
    if pos != len(data):
        raise PersistenceError("trailing bytes after last block")
    state = NetworkState(spec, params, header["seed"])
    for k, m in masks.items():
        if k not in state.masks or not np.array_equal(state.masks[k], m):
            raise PersistenceError(f"constraint mask {k} does not match the spec")
    return state
