"""FiLM-conditioned MLP generator ``f(z, c) -> trajectory`` with exact backprop.

Network layout (all batched over rows)::

    x = concat(input, context_features)
    for each hidden block k:
        u = tanh(x @ W_k + b_k)
        x = gamma_k(c) * u + beta_k(c)        # FiLM
    out = x @ W_head + b_head                  # (B, H * D_out)

``gamma_k`` and ``beta_k`` are two-layer tanh perceptrons of the context
features. The trajectory generator adds the robot position to every step and
then overwrites step 0 with the context's current state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import CheckpointError, CheckpointVersionError, DimensionError
from .trajectory import Context, Trajectory

CHECKPOINT_MAGIC = "IMLE-CKPT"
CHECKPOINT_VERSION = "v1"
_FAR = 50.0  # padding offset (m) for absent obstacles


@dataclass(frozen=True)
class GeneratorDims:
    latent_dim: int = 16
    hidden: tuple = (64, 64)
    film_hidden: int = 32
    horizon: int = 20
    out_dim: int = 2
    state_dim: int = 2
    goal_dim: int = 2
    n_obstacles: int = 1
    history: int = 1
    position_scale: float = 4.0
    dt: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.state_dim < 2:
            raise DimensionError("state_dim must be >= 2 (x, y first)")
        if self.out_dim < self.state_dim:
            raise DimensionError("out_dim must cover the state channels")
        if not self.hidden:
            raise DimensionError("at least one hidden block is required")
        if self.horizon < 2 or self.latent_dim < 1 or self.film_hidden < 1:
            raise DimensionError(f"invalid dims {self}")
        if not self.position_scale > 0:
            raise DimensionError("position_scale must be positive")

    @property
    def context_dim(self) -> int:
        return (self.state_dim - 2) + self.goal_dim + 2 * self.n_obstacles * self.history

    @property
    def input_dim(self) -> int:
        return self.latent_dim

    @property
    def output_size(self) -> int:
        return self.horizon * self.out_dim

    def header_fields(self) -> str:
        parts = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            parts.append(f"{f.name}={v}")
        return " ".join(parts)

    @classmethod
    def from_header_fields(cls, tokens: Sequence[str]) -> "GeneratorDims":
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for tok in tokens:
            key, _, value = tok.partition("=")
            if key not in types:
                continue
            if key == "hidden":
                kwargs[key] = tuple(int(x) for x in value.split(","))
            elif key in ("position_scale", "dt"):
                kwargs[key] = float(value)
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


def param_shapes(in_dim: int, context_dim: int, hidden, film_hidden: int, out_size: int) -> list:
    """Ordered ``(name, shape)`` list; this order is the checkpoint order."""
    shapes = []
    prev = in_dim + context_dim
    for k, width in enumerate(hidden):
        shapes += [(f"W{k}", (prev, width)), (f"b{k}", (width,))]
        prev = width
    shapes += [("W_head", (prev, out_size)), ("b_head", (out_size,))]
    for k, width in enumerate(hidden):
        for head in ("gamma", "beta"):
            shapes += [
                (f"{head}{k}_W1", (context_dim, film_hidden)),
                (f"{head}{k}_b1", (film_hidden,)),
                (f"{head}{k}_W2", (film_hidden, width)),
                (f"{head}{k}_b2", (width,)),
            ]
    return shapes


@dataclass(eq=False)
class NetworkParams:
    """Named weight arrays of a FiLM MLP, in declaration order."""

    dims: object
    arrays: dict = field(default_factory=dict)

    @property
    def n_blocks(self) -> int:
        return len(self.dims.hidden)

    @property
    def in_dim(self) -> int:
        return self.dims.input_dim

    def shapes(self) -> list:
        d = self.dims
        return param_shapes(d.input_dim, d.context_dim, d.hidden, d.film_hidden, d.output_size)

    def names(self) -> list:
        return [name for name, _ in self.shapes()]

    def size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.shapes())

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.arrays[n].ravel() for n in self.names()])

    def with_flat(self, flat) -> "NetworkParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size():
            raise DimensionError(f"expected {self.size()} parameters, got {flat.size}")
        arrays, i = {}, 0
        for name, shape in self.shapes():
            n = int(np.prod(shape))
            arrays[name] = flat[i : i + n].reshape(shape).copy()
            i += n
        return type(self)(self.dims, arrays)

    def copy(self) -> "NetworkParams":
        return type(self)(self.dims, {k: v.copy() for k, v in self.arrays.items()})

    def check(self) -> None:
        for name, shape in self.shapes():
            a = self.arrays.get(name)
            if a is None or a.shape != tuple(shape):
                raise DimensionError(f"parameter {name}: expected {shape}, got {None if a is None else a.shape}")
            if not np.all(np.isfinite(a)):
                raise DimensionError(f"parameter {name} has non-finite entries")

    def equals(self, other: "NetworkParams") -> bool:
        return self.dims == other.dims and all(
            np.array_equal(self.arrays[n], other.arrays[n]) for n in self.names()
        )


class GeneratorParams(NetworkParams):
    pass


def _init_arrays(shapes, rng) -> dict:
    arrays = {}
    for name, shape in shapes:
        if name.endswith("_W2"):
            arr = np.zeros(shape)
        elif name.startswith("gamma") and name.endswith("_b2"):
            arr = np.ones(shape)
        elif len(shape) == 2:
            arr = rng.standard_normal(shape) / math.sqrt(shape[0])
        else:
            arr = np.zeros(shape)
        # float32-representable so checkpoints round-trip exactly
        arrays[name] = arr.astype(np.float32).astype(np.float64)
    return arrays


def init_params(dims: GeneratorDims, seed: int = 0) -> GeneratorParams:
    """Fan-in scaled Gaussian weights; FiLM heads start as the identity."""
    rng = np.random.default_rng(seed)
    p = GeneratorParams(dims)
    p.arrays = _init_arrays(p.shapes(), rng)
    return p


def film(x, gamma, beta) -> np.ndarray:
    """Feature-wise affine modulation ``gamma * x + beta``."""
    x, gamma, beta = (np.asarray(a, dtype=np.float64) for a in (x, gamma, beta))
    if x.shape != gamma.shape or x.shape != beta.shape:
        raise DimensionError(f"film shapes differ: {x.shape}, {gamma.shape}, {beta.shape}")
    return gamma * x + beta


# context encoding ---------------------------------------------------------

def context_features(c: Context, dims) -> np.ndarray:
    """Context as a vector expressed relative to the robot position, divided by the scale.

    The ``n_obstacles`` nearest obstacles are kept (last ``history``
    positions, padded by repeating the oldest); missing obstacles are
    placed far away.
    """
    scale = dims.position_scale
    if c.current_state.size != dims.state_dim:
        raise DimensionError(f"context state has {c.current_state.size} dims, model expects {dims.state_dim}")
    if c.goal.size != dims.goal_dim:
        raise DimensionError(f"context goal has {c.goal.size} dims, model expects {dims.goal_dim}")
    pos = c.current_state[:2]
    goal = c.goal.copy()
    goal[: min(2, goal.size)] -= pos[: min(2, goal.size)]
    parts = [c.current_state[2:] / scale, goal / scale]
    o, p = dims.n_obstacles, dims.history
    if o and p:
        hist = c.obstacle_history
        block = np.empty((o, p, 2))
        if hist.shape[0] and hist.shape[1]:
            rel = hist - pos
            order = np.argsort(np.linalg.norm(rel[:, -1], axis=1), kind="stable")[:o]
            rel = rel[order]
            if rel.shape[1] >= p:
                rel = rel[:, -p:]
            else:
                rel = np.concatenate([np.repeat(rel[:, :1], p - rel.shape[1], axis=1), rel], axis=1)
            block[: rel.shape[0]] = rel
            block[rel.shape[0] :] = (0.0, _FAR)
        else:
            block[:] = (0.0, _FAR)
        parts.append(np.clip(block.ravel() / scale, -_FAR, _FAR))
    return np.concatenate(parts)


def _as_batch(z, contexts, dims):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    Z = np.atleast_2d(z)
    if Z.shape[1] != dims.latent_dim:
        raise DimensionError(f"latent has {Z.shape[1]} dims, model expects {dims.latent_dim}")
    if isinstance(contexts, Context):
        contexts = [contexts] * Z.shape[0]
    contexts = list(contexts)
    if len(contexts) != Z.shape[0]:
        raise DimensionError("one context per latent code required")
    return single, Z, contexts


def encode_contexts(contexts: Sequence[Context], dims):
    """Feature matrix and current-state matrix for a list of contexts (memoized by identity)."""
    feats, states, seen = [], [], {}
    for c in contexts:
        key = id(c)
        if key not in seen:
            seen[key] = (context_features(c, dims), c.current_state)
        f, s = seen[key]
        feats.append(f)
        states.append(s)
    return np.array(feats).reshape(len(contexts), dims.context_dim), np.array(states)


# core network -------------------------------------------------------------

def _film_head(params, prefix, C):
    a = params.arrays
    s = np.tanh(C @ a[prefix + "_W1"] + a[prefix + "_b1"])
    return s, s @ a[prefix + "_W2"] + a[prefix + "_b2"]


def network_forward(params: NetworkParams, X: np.ndarray, C: np.ndarray, cache: bool = False):
    """Raw head output ``(B, out_size)`` for inputs ``X`` and context features ``C``."""
    a = params.arrays
    h = np.concatenate([X, C], axis=1)
    saved = []
    for k in range(params.n_blocks):
        u = np.tanh(h @ a[f"W{k}"] + a[f"b{k}"])
        sg, g = _film_head(params, f"gamma{k}", C)
        sb, b = _film_head(params, f"beta{k}", C)
        if cache:
            saved.append((h, u, sg, g, sb))
        h = g * u + b
    out = h @ a["W_head"] + a["b_head"]
    if cache:
        return out, (saved, h, C)
    return out


def network_backward(params: NetworkParams, cached, dout: np.ndarray) -> dict:
    """Parameter gradients given the upstream gradient of the head output."""
    a = params.arrays
    saved, h_last, C = cached
    grads = {"W_head": h_last.T @ dout, "b_head": dout.sum(axis=0)}
    dh = dout @ a["W_head"].T
    for k in reversed(range(params.n_blocks)):
        h_in, u, sg, g, sb = saved[k]
        for prefix, s, dmod in ((f"gamma{k}", sg, dh * u), (f"beta{k}", sb, dh)):
            grads[prefix + "_W2"] = s.T @ dmod
            grads[prefix + "_b2"] = dmod.sum(axis=0)
            dpre = (dmod @ a[prefix + "_W2"].T) * (1.0 - s * s)
            grads[prefix + "_W1"] = C.T @ dpre
            grads[prefix + "_b1"] = dpre.sum(axis=0)
        da = dh * g * (1.0 - u * u)
        grads[f"W{k}"] = h_in.T @ da
        grads[f"b{k}"] = da.sum(axis=0)
        if k:
            dh = da @ a[f"W{k}"].T
    return grads


# trajectory generator -----------------------------------------------------

def _to_trajectories(params: GeneratorParams, out: np.ndarray, states: np.ndarray) -> np.ndarray:
    d = params.dims
    traj = out.reshape(-1, d.horizon, d.out_dim).copy()
    traj[:, :, :2] += states[:, None, :2]
    traj[:, 0, : d.state_dim] = states
    return traj


def forward_batch(params: GeneratorParams, Z: np.ndarray, C: np.ndarray, states: np.ndarray) -> np.ndarray:
    """``(B, H, D_out)`` trajectories from latents, context features and current states."""
    return _to_trajectories(params, network_forward(params, Z, C), states)


def forward(params: GeneratorParams, z, c):
    """Generate trajectories.

    ``z`` is one latent code (returns a :class:`Trajectory`) or a ``(B, latent)``
    batch with one context or a list of ``B`` contexts (returns ``(B, H, D)``).
    """
    single, Z, contexts = _as_batch(z, c, params.dims)
    C, states = encode_contexts(contexts, params.dims)
    traj = forward_batch(params, Z, C, states)
    if single:
        return Trajectory.from_values(traj[0], params.dims.state_dim, params.dims.dt)
    return traj


def backward(params: GeneratorParams, z, c, upstream) -> dict:
    """Gradients of ``sum(upstream * forward(params, z, c))`` w.r.t. every parameter.

    Batched inputs sum the per-sample gradients. The overwritten first state
    receives no gradient.
    """
    single, Z, contexts = _as_batch(z, c, params.dims)
    d = params.dims
    G = np.asarray(upstream, dtype=np.float64).reshape(-1, d.horizon, d.out_dim)
    if G.shape[0] != Z.shape[0]:
        raise DimensionError(f"upstream gradient shape {np.shape(upstream)} does not match output")
    C, _ = encode_contexts(contexts, d)
    return backward_batch(params, Z, C, G)


def backward_batch(params: GeneratorParams, Z, C, G) -> dict:
    d = params.dims
    G = G.copy()
    G[:, 0, : d.state_dim] = 0.0
    _, cached = network_forward(params, Z, C, cache=True)
    return network_backward(params, cached, G.reshape(G.shape[0], -1))


def forward_and_backward(params: GeneratorParams, Z, C, states, grad_fn):
    """Forward pass, then gradients of a loss whose output-gradient is ``grad_fn(traj)``."""
    d = params.dims
    out, cached = network_forward(params, Z, C, cache=True)
    traj = _to_trajectories(params, out, states)
    loss, G = grad_fn(traj)
    G = np.array(G, dtype=np.float64)
    G[:, 0, : d.state_dim] = 0.0
    return loss, traj, network_backward(params, cached, G.reshape(G.shape[0], -1))


# checkpoints --------------------------------------------------------------

def _write_checkpoint(params: NetworkParams, path, magic: str) -> None:
    params.check()
    header = f"{magic} {CHECKPOINT_VERSION} {params.dims.header_fields()}\n".encode("ascii")
    body = params.flatten().astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def _read_checkpoint(path, magic: str, dims_cls, params_cls):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointVersionError(f"{path}: missing checkpoint header")
    try:
        tokens = raw[:nl].decode("ascii").split()
    except UnicodeDecodeError:
        raise CheckpointVersionError(f"{path}: header is not ASCII") from None
    if len(tokens) < 2 or tokens[0] != magic:
        raise CheckpointVersionError(f"{path}: expected a {magic} checkpoint")
    if tokens[1] != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {tokens[1]!r}")
    try:
        dims = dims_cls.from_header_fields(tokens[2:])
    except (ValueError, DimensionError) as exc:
        raise CheckpointError(f"{path}: bad dims in header: {exc}") from exc
    params = params_cls(dims)
    body = raw[nl + 1 :]
    if len(body) != 4 * params.size():
        raise CheckpointError(
            f"{path}: expected {4 * params.size()} bytes of parameters for the declared dims, got {len(body)}"
        )
    flat = np.frombuffer(body, dtype="<f4").astype(np.float64)
    return params.with_flat(flat)


def save_checkpoint(params: GeneratorParams, path) -> None:
    """Header line then little-endian float32 parameters in declaration order."""
    _write_checkpoint(params, path, CHECKPOINT_MAGIC)


def load_checkpoint(path) -> GeneratorParams:
    return _read_checkpoint(path, CHECKPOINT_MAGIC, GeneratorDims, GeneratorParams)


def round_to_float32(params: NetworkParams) -> NetworkParams:
    out = params.copy()
    for k, v in out.arrays.items():
        out.arrays[k] = v.astype(np.float32).astype(np.float64)
    return out
