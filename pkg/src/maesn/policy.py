"""Latent-conditioned Gaussian MLP policy and its parameter records.

The policy is ``pi(a | s, z)``: a ReLU MLP on ``[s; z]`` gives the action
mean, and a state-independent log-std vector gives the spread. ``z`` is drawn
once per episode from ``N(mu, sigma)``. With ``latent_dim == 0`` the same code
is an ordinary Gaussian MLP policy.

Forward functions work on :class:`~maesn.ad.Tensor` so the same code serves
rollouts (under ``no_grad``) and differentiable surrogates. Parameters may be
shared (``W`` of shape ``(in, out)``) or stacked per task (``(N, in, out)``);
inputs are ``(N, rows, dim)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ad
from .ad import Tensor

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
CHECKPOINT_FORMAT = "maesn-params"
CHECKPOINT_VERSION = 1

PolicyParams = dict  # name -> ndarray: w0, b0, ..., w{L}, b{L}, log_std


@dataclass(frozen=True)
class GaussianMLPPolicy:
    """Architecture only; parameters live in a separate ``PolicyParams`` dict."""

    state_dim: int
    action_dim: int
    latent_dim: int = 2
    hidden_sizes: tuple[int, ...] = (100, 100)

    @property
    def input_dim(self) -> int:
        return self.state_dim + self.latent_dim

    @property
    def n_layers(self) -> int:
        return len(self.hidden_sizes) + 1

    def param_names(self) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names += [f"w{i}", f"b{i}"]
        return names + ["log_std"]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        sizes = [self.input_dim, *self.hidden_sizes, self.action_dim]
        shapes = {}
        for i in range(self.n_layers):
            shapes[f"w{i}"] = (sizes[i], sizes[i + 1])
            shapes[f"b{i}"] = (sizes[i + 1],)
        shapes["log_std"] = (self.action_dim,)
        return shapes

    def init_params(self, rng: np.random.Generator, init_log_std: float = 0.0,
                    hidden_gain: float = 1.0, output_gain: float = 0.01) -> PolicyParams:
        """Uniform fan-in init; small output head so initial means are near 0."""
        params = {}
        for name, shape in self.param_shapes().items():
            if name.startswith("w"):
                gain = output_gain if name == f"w{self.n_layers - 1}" else hidden_gain
                limit = gain * math.sqrt(3.0 / shape[0])
                params[name] = rng.uniform(-limit, limit, size=shape)
            elif name.startswith("b"):
                params[name] = np.zeros(shape)
            else:
                params[name] = np.full(shape, float(init_log_std))
        return params

    def zero_params(self) -> PolicyParams:
        return {k: np.zeros(s) for k, s in self.param_shapes().items()}

    def check_params(self, params) -> None:
        for name, shape in self.param_shapes().items():
            if name not in params:
                raise KeyError(f"policy params missing {name!r}")
            got = tuple(np.shape(_val(params[name])))
            if got != shape and got[1:] != shape:
                raise ad.ShapeError(f"param {name}: expected {shape} (or stacked), got {got}")

    # -- graph functions ---------------------------------------------------

    def mean(self, params: dict[str, Tensor], states, latents=None) -> Tensor:
        """Action mean for inputs ``states (N, R, ds)`` and ``latents (N, R, dz)``."""
        states = ad.constant(states)
        if states.shape[-1] != self.state_dim:
            raise ad.ShapeError(
                f"state width {states.shape[-1]} does not match policy state_dim {self.state_dim}")
        if self.latent_dim:
            if latents is None:
                raise ValueError("policy expects a latent input")
            latents = ad.constant(latents)
            if latents.shape[-1] != self.latent_dim:
                raise ad.ShapeError(
                    f"latent width {latents.shape[-1]} does not match latent_dim {self.latent_dim}")
            h = ad.concat([states, latents])
        else:
            h = states
        for i in range(self.n_layers):
            w, b = params[f"w{i}"], params[f"b{i}"]
            h = ad.matmul(h, w) + _rowwise(b)
            if i < self.n_layers - 1:
                h = ad.relu(h)
        return h

    def log_std_rows(self, params: dict[str, Tensor], like: Tensor) -> Tensor:
        """log-std broadcast to the shape of a mean tensor ``(N, R, da)``."""
        return ad.broadcast_to(_rowwise(params["log_std"]), like.shape)

    def log_prob(self, params: dict[str, Tensor], states, latents, actions) -> Tensor:
        """Per-row diagonal Gaussian log density, shape ``(N, R)``."""
        actions = ad.constant(actions)
        mu = self.mean(params, states, latents)
        if actions.shape != mu.shape:
            raise ad.ShapeError(f"actions {actions.shape} do not match mean {mu.shape}")
        return gaussian_log_prob(actions, mu, self.log_std_rows(params, mu))


def gaussian_log_prob(x, mean, log_std) -> Tensor:
    """Sum over the last axis of diagonal Gaussian log densities."""
    zs = (ad.constant(x) - mean) * ad.exp(ad.neg(log_std))
    d = zs.shape[-1]
    return (ad.mul(-0.5, ad.sum(ad.square(zs), axis=-1)) - ad.sum(log_std, axis=-1)
            - 0.5 * d * math.log(2.0 * math.pi))


def gaussian_kl(mean_old, log_std_old, mean_new, log_std_new) -> Tensor:
    """KL(N_old || N_new) per row, summed over the last axis."""
    var_old = ad.exp(ad.mul(2.0, log_std_old))
    var_new = ad.exp(ad.mul(2.0, log_std_new))
    t = (log_std_new - log_std_old) + (var_old + ad.square(mean_old - mean_new)) / (2.0 * var_new) - 0.5
    return ad.sum(t, axis=-1)


def _rowwise(p: Tensor) -> Tensor:
    """Shared vectors stay ``(d,)``; stacked ``(N, d)`` become ``(N, 1, d)``."""
    p = ad.constant(p)
    if p.ndim == 2:
        return ad.reshape(p, (p.shape[0], 1, p.shape[1]))
    return p


def _val(x):
    return x.value if isinstance(x, Tensor) else x


def clamp_log_std(params: PolicyParams) -> PolicyParams:
    out = dict(params)
    if "log_std" in out:
        out["log_std"] = np.clip(out["log_std"], LOG_STD_MIN, LOG_STD_MAX)
    return out


# ----------------------------------------------------------------------------
# latent distribution


@dataclass
class VariationalParams:
    mu: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_sigma = np.asarray(self.log_sigma, dtype=np.float64)
        if self.mu.shape != self.log_sigma.shape:
            raise ad.ShapeError(f"mu {self.mu.shape} and log_sigma {self.log_sigma.shape} differ")

    @classmethod
    def prior(cls, latent_dim: int) -> "VariationalParams":
        return cls(np.zeros(latent_dim), np.zeros(latent_dim))

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    def copy(self) -> "VariationalParams":
        return VariationalParams(self.mu.copy(), self.log_sigma.copy())

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "log_sigma": self.log_sigma.tolist()}

    @classmethod
    def from_dict(cls, d) -> "VariationalParams":
        return cls(np.array(d["mu"], dtype=np.float64), np.array(d["log_sigma"], dtype=np.float64))


@dataclass
class StepSizes:
    """Per-parameter inner-loop step sizes; unconstrained, used as-is."""

    alpha_mu: np.ndarray
    alpha_sigma: np.ndarray
    alpha_theta: dict | None = None

    @classmethod
    def init(cls, latent_dim: int, value: float = 0.1, theta_shapes: dict | None = None,
             theta_value: float | None = None, sigma_value: float | None = None) -> "StepSizes":
        at = None
        if theta_shapes is not None:
            tv = value if theta_value is None else theta_value
            at = {k: np.full(s, tv) for k, s in theta_shapes.items()}
        sv = value if sigma_value is None else sigma_value
        return cls(np.full(latent_dim, value), np.full(latent_dim, sv), at)

    def as_dict(self) -> dict[str, np.ndarray]:
        d = {"alpha_mu": self.alpha_mu, "alpha_sigma": self.alpha_sigma}
        for k, v in (self.alpha_theta or {}).items():
            d[f"alpha_theta/{k}"] = v
        return d

    @classmethod
    def from_flat(cls, d: dict) -> "StepSizes":
        at = {k.split("/", 1)[1]: np.asarray(v, dtype=np.float64)
              for k, v in d.items() if k.startswith("alpha_theta/")}
        return cls(np.asarray(d["alpha_mu"], dtype=np.float64),
                   np.asarray(d["alpha_sigma"], dtype=np.float64), at or None)


@dataclass
class LatentSample:
    z: np.ndarray
    epsilon: np.ndarray = field(repr=False)


def reparameterize(vp: VariationalParams, epsilon) -> np.ndarray:
    return vp.mu + np.exp(vp.log_sigma) * np.asarray(epsilon, dtype=np.float64)


def sample_latent(vp: VariationalParams, rng) -> LatentSample:
    """One episode's latent: ``z = mu + exp(log_sigma) * eps``, eps ~ N(0, I)."""
    if vp.mu.size < 1:
        raise ValueError("latent_dim must be >= 1 to sample a latent")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    eps = rng.standard_normal(vp.mu.shape)
    return LatentSample(reparameterize(vp, eps), eps)


def action_dist(policy: GaussianMLPPolicy, params: PolicyParams, s, z=None):
    """Mean and std of ``pi(. | s, z)`` for a single state."""
    s = np.asarray(s, dtype=np.float64).reshape(1, 1, -1)
    zz = None if z is None else np.asarray(z, dtype=np.float64).reshape(1, 1, -1)
    with ad.no_grad():
        m = policy.mean(_const(params), s, zz)
    return m.value.reshape(-1), np.exp(np.asarray(params["log_std"]))


def log_prob(policy: GaussianMLPPolicy, params: PolicyParams, a, s, z=None) -> float:
    a = np.asarray(a, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(s))
            and (z is None or np.all(np.isfinite(z)))):
        raise ValueError("log_prob: non-finite input")
    zz = None if z is None else np.asarray(z, dtype=np.float64).reshape(1, 1, -1)
    with ad.no_grad():
        lp = policy.log_prob(_const(params), s.reshape(1, 1, -1), zz, a.reshape(1, 1, -1))
    return float(lp.value.reshape(()))


def _const(params) -> dict[str, Tensor]:
    return {k: ad.constant(v) for k, v in params.items()}


def as_tensors(params: dict, requires_grad: bool = True, prefix: str = "") -> dict[str, Tensor]:
    return {k: ad.tensor(v, requires_grad=requires_grad, name=prefix + k) for k, v in params.items()}


# ----------------------------------------------------------------------------
# checkpoint files


def save_params(path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """JSON map name -> {shape, values (row-major)}; floats round-trip exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {k: {"shape": list(np.shape(v)), "values": np.asarray(v, dtype=np.float64).ravel().tolist()}
                   for k, v in params.items()},
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported version {doc.get('version')}")
    params = {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"])
              for k, v in doc["params"].items()}
    return params, doc.get("meta", {})
