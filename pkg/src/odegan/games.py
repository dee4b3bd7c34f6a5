"""Loss pairs and velocity fields for the games studied here.

Three games are provided:

* ``ToyGame``: the scalar rotational game with losses ``0.5*eps*theta**2 - theta*phi``
  and ``theta*phi``.
* ``LinearGame``: the generic linearised dynamics built from blocks A, B, C.
* ``GanGame``: an MLP discriminator/generator pair on a 2-d mixture of
  Gaussians trained with the non-saturating loss.

The velocity field is always ``-[alpha * dl_D/dtheta, beta * dl_G/dphi]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad

LOG4 = math.log(4.0)
LOG2 = math.log(2.0)


@dataclass(frozen=True, eq=False)
class GameState:
    """Discriminator parameters ``theta`` and generator parameters ``phi``."""

    theta: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", np.array(self.theta, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "phi", np.array(self.phi, dtype=np.float64).reshape(-1))

    @property
    def n_theta(self) -> int:
        return self.theta.size

    @property
    def n_phi(self) -> int:
        return self.phi.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.theta, self.phi])

    @classmethod
    def from_flat(cls, y, n_theta: int) -> "GameState":
        y = np.asarray(y, dtype=np.float64)
        return cls(y[:n_theta], y[n_theta:])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.phi)))

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))

    def __eq__(self, other):
        if not isinstance(other, GameState):
            return NotImplemented
        return np.array_equal(self.theta, other.theta) and np.array_equal(self.phi, other.phi)

    __hash__ = None


class LossPair(NamedTuple):
    l_d: float
    l_g: float


class Batch(NamedTuple):
    x: np.ndarray
    z: np.ndarray


class Probe(NamedTuple):
    """Everything the trainer needs from one forward/backward pass."""

    losses: LossPair
    velocity: np.ndarray
    grad_d: np.ndarray
    grad_g: np.ndarray
    reg_grad: np.ndarray | None


# --------------------------------------------------------------------------- autodiff-backed games


class _GameGraph(NamedTuple):
    theta: list
    phi: list
    data: list
    l_d: ad.Expr
    l_g: ad.Expr


def _split(vec, shapes):
    out, i = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(vec[i:i + n].reshape(s))
        i += n
    return out


class _AutodiffGame:
    alpha: float = 1.0
    beta: float = 1.0

    def _graph(self, batch) -> _GameGraph:
        raise NotImplementedError

    def _bindings(self, graph: _GameGraph, state: GameState, batch) -> dict:
        b = {}
        for node, arr in zip(graph.theta, _split(state.theta, [n.shape for n in graph.theta])):
            b[node.name] = arr
        for node, arr in zip(graph.phi, _split(state.phi, [n.shape for n in graph.phi])):
            b[node.name] = arr
        return b

    def _check_state(self, state: GameState):
        if state.n_theta != self.n_theta or state.n_phi != self.n_phi:
            raise ValueError(
                f"state has segments ({state.n_theta}, {state.n_phi}), game expects ({self.n_theta}, {self.n_phi})"
            )

    def losses(self, state: GameState, batch=None) -> LossPair:
        self._check_state(state)
        g = self._graph(batch)
        l_d, l_g = ad.evaluate_many([g.l_d, g.l_g], self._bindings(g, state, batch))
        return LossPair(float(l_d), float(l_g))

    def probe(self, state: GameState, batch=None, with_reg: bool = False) -> Probe:
        self._check_state(state)
        g = self._graph(batch)
        gd = ad.grad_exprs(g.l_d, g.theta)
        gg = ad.grad_exprs(g.l_g, g.phi)
        outs = [g.l_d, g.l_g, *gd, *gg]
        if with_reg:
            outs += self._reg_exprs(g)
        vals = ad.evaluate_many(outs, self._bindings(g, state, batch))
        nd = len(gd)
        grad_d = np.concatenate([v.ravel() for v in vals[2:2 + nd]])
        grad_g = np.concatenate([v.ravel() for v in vals[2 + nd:2 + nd + len(gg)]])
        reg = None
        if with_reg:
            reg = np.concatenate([v.ravel() for v in vals[2 + nd + len(gg):]])
        for name, arr in (("dl_D/dtheta", grad_d), ("dl_G/dphi", grad_g)):
            if not np.all(np.isfinite(arr)):
                raise ad.NonFiniteError(f"non-finite gradient {name}")
        v = -np.concatenate([self.alpha * grad_d, self.beta * grad_g])
        return Probe(LossPair(float(vals[0]), float(vals[1])), v, grad_d, grad_g, reg)

    def _reg_exprs(self, g: _GameGraph):
        key = id(g)
        cache = self.__dict__.setdefault("_reg_cache", {})
        if key not in cache:
            norm = ad.grad_norm_sq_expr(g.l_g, g.phi)
            cache[key] = ad.grad_exprs(norm, g.theta)
        return cache[key]

    def velocity(self, state: GameState, batch=None) -> np.ndarray:
        return self.probe(state, batch).velocity

    def reg_grad(self, state: GameState, batch=None) -> np.ndarray:
        """Gradient over theta of ||dl_G/dphi||^2 (regulariser weight excluded)."""
        self._check_state(state)
        g = self._graph(batch)
        vals = ad.evaluate_many(self._reg_exprs(g), self._bindings(g, state, batch))
        out = np.concatenate([v.ravel() for v in vals])
        if not np.all(np.isfinite(out)):
            raise ad.NonFiniteError("non-finite regulariser gradient")
        return out

    def jacobian(self, state: GameState, batch=None) -> np.ndarray:
        """H = -dv/d(theta, phi), assembled from second derivatives of both losses."""
        self._check_state(state)
        g = self._graph(batch)
        b = self._bindings(g, state, batch)
        cols = list(g.theta) + list(g.phi)
        top = ad.mixed_hessian(g.l_d, b, g.theta, cols)
        bottom = ad.mixed_hessian(g.l_g, b, g.phi, cols)
        return np.vstack([self.alpha * top, self.beta * bottom])

    def hessian_d(self, state: GameState, batch=None) -> np.ndarray:
        self._check_state(state)
        g = self._graph(batch)
        return ad.hessian(g.l_d, self._bindings(g, state, batch), g.theta)


@dataclass(eq=False)
class ToyGame(_AutodiffGame):
    """Losses ``(0.5*eps*theta^2 - theta*phi, theta*phi)`` on scalar players."""

    epsilon: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    n_theta: int = field(default=1, init=False)
    n_phi: int = field(default=1, init=False)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        theta = ad.inp("toy.theta", (1,))
        phi = ad.inp("toy.phi", (1,))
        l_d = ad.esum(ad.sub(ad.mul(0.5 * self.epsilon, ad.square(theta)), ad.mul(theta, phi)))
        l_g = ad.esum(ad.mul(theta, phi))
        self._g = _GameGraph([theta], [phi], [], l_d, l_g)

    def _graph(self, batch) -> _GameGraph:
        return self._g

    def closed_form_velocity(self, state: GameState) -> np.ndarray:
        th, ph = state.theta[0], state.phi[0]
        return -np.array([self.alpha * (self.epsilon * th - ph), self.beta * th])

    def blocks(self) -> "LinearGameBlocks":
        # H = [[eps, -1], [1, 0]] in the [[A, B^T], [-B, C]] layout means B = -1
        return LinearGameBlocks([[self.alpha * self.epsilon]], [[-self.beta]], [[0.0]])


def toy_losses(game: ToyGame, state: GameState) -> LossPair:
    return game.losses(state)


# --------------------------------------------------------------------------- linear games


@dataclass(eq=False)
class LinearGameBlocks:
    """Blocks of the linearised dynamics d/dt [theta, phi] = -[[A, B^T], [-B, C]] [theta, phi]."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.a = np.atleast_2d(np.asarray(self.a, dtype=np.float64))
        self.b = np.atleast_2d(np.asarray(self.b, dtype=np.float64))
        self.c = np.atleast_2d(np.asarray(self.c, dtype=np.float64))
        n, m = self.a.shape[0], self.c.shape[0]
        if self.a.shape != (n, n) or self.c.shape != (m, m) or self.b.shape != (m, n):
            raise ValueError(f"inconsistent block shapes A{self.a.shape} B{self.b.shape} C{self.c.shape}")
        for arr in (self.a, self.b, self.c):
            if not np.all(np.isfinite(arr)):
                raise ValueError("blocks must be finite")

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def m(self) -> int:
        return self.c.shape[0]

    def matrix(self) -> np.ndarray:
        return np.block([[self.a, self.b.T], [-self.b, self.c]])


def linear_velocity(blocks: LinearGameBlocks, state: GameState) -> np.ndarray:
    if state.n_theta != blocks.n or state.n_phi != blocks.m:
        raise ValueError(f"state segments ({state.n_theta}, {state.n_phi}) do not match blocks ({blocks.n}, {blocks.m})")
    th, ph = state.theta, state.phi
    return -np.concatenate([blocks.a @ th + blocks.b.T @ ph, -(blocks.b @ th) + blocks.c @ ph])


@dataclass(eq=False)
class LinearGame:
    blocks: LinearGameBlocks

    @property
    def n_theta(self) -> int:
        return self.blocks.n

    @property
    def n_phi(self) -> int:
        return self.blocks.m

    def velocity(self, state: GameState, batch=None) -> np.ndarray:
        return linear_velocity(self.blocks, state)

    def jacobian(self, state: GameState = None, batch=None) -> np.ndarray:
        return self.blocks.matrix()


# --------------------------------------------------------------------------- mixture of Gaussians


def grid_means(side: int = 4, spacing: float = 1.0) -> np.ndarray:
    ticks = (np.arange(side) - (side - 1) / 2.0) * spacing
    return np.array([(x, y) for x in ticks for y in ticks], dtype=np.float64)


@dataclass(eq=False)
class MoGSpec:
    means: np.ndarray = field(default_factory=grid_means)
    std: float = 0.05

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        if self.means.shape[0] < 1 or self.means.shape[1] != 2:
            raise ValueError("need at least one 2-d mode mean")
        if not self.std > 0:
            raise ValueError("std must be positive")

    @property
    def n_modes(self) -> int:
        return self.means.shape[0]


def mog_sample(spec: MoGSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` points from the uniform-weight mixture."""
    if n < 1:
        raise ValueError("n must be at least 1")
    idx = rng.integers(0, spec.n_modes, size=n)
    return spec.means[idx] + spec.std * rng.standard_normal((n, 2))


ACTIVATIONS = ("relu", "leaky_relu", "sigmoid")
PIECEWISE_LINEAR = ("relu", "leaky_relu")


@dataclass(eq=False)
class MLPSpec:
    """Fully connected network. ``hidden`` may be empty (a linear map)."""

    input_dim: int
    output_dim: int
    hidden: Sequence[int] = (25, 25)
    activation: str = "relu"
    slope: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(w) for w in self.hidden)
        if any(w < 1 for w in self.hidden) or self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        d = self.dims
        out = []
        for i in range(len(d) - 1):
            out += [(d[i], d[i + 1]), (1, d[i + 1])]
        return out

    @property
    def n_params(self) -> int:
        return sum(r * c for r, c in self.shapes)

    def init_params(self) -> np.ndarray:
        """Fan-in scaled uniform weights, zero biases."""
        rng = np.random.default_rng(self.seed)
        parts = []
        for i, (r, c) in enumerate(self.shapes):
            if i % 2:
                parts.append(np.zeros(c))
            else:
                bound = math.sqrt(6.0 / r)
                parts.append(rng.uniform(-bound, bound, size=(r, c)).ravel())
        return np.concatenate(parts)


def _act_expr(spec: MLPSpec, h):
    if spec.activation == "relu":
        return ad.relu(h)
    if spec.activation == "leaky_relu":
        return ad.leaky_relu(h, spec.slope)
    return ad.sigmoid(h)


def _act_np(spec: MLPSpec, h):
    if spec.activation == "relu":
        return np.maximum(h, 0.0)
    if spec.activation == "leaky_relu":
        return np.where(h > 0, h, spec.slope * h)
    return 1.0 / (1.0 + np.exp(-h))


def mlp_expr(spec: MLPSpec, params: list, x: ad.Expr, ones: ad.Expr) -> ad.Expr:
    h = x
    n_layers = len(spec.dims) - 1
    for i in range(n_layers):
        w, b = params[2 * i], params[2 * i + 1]
        h = ad.add(ad.matmul(h, w), ad.matmul(ones, b))
        if i < n_layers - 1:
            h = _act_expr(spec, h)
    return h


def mlp_forward(spec: MLPSpec, flat: np.ndarray, x: np.ndarray) -> np.ndarray:
    params = _split(np.asarray(flat, dtype=np.float64), spec.shapes)
    h = np.asarray(x, dtype=np.float64)
    n_layers = len(spec.dims) - 1
    for i in range(n_layers):
        h = h @ params[2 * i] + params[2 * i + 1]
        if i < n_layers - 1:
            h = _act_np(spec, h)
    return h


@dataclass(eq=False)
class GanGame(_AutodiffGame):
    """Non-saturating GAN on a 2-d mixture of Gaussians.

    The discriminator emits a logit; the logistic function is applied inside
    the loss.
    """

    discriminator: MLPSpec = field(default_factory=lambda: MLPSpec(2, 1, seed=1))
    generator: MLPSpec = field(default_factory=lambda: MLPSpec(32, 2, seed=2))
    data: MoGSpec = field(default_factory=MoGSpec)
    latent_dim: int = 32
    batch_size: int = 512
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.discriminator.input_dim != 2 or self.discriminator.output_dim != 1:
            raise ValueError("discriminator must map 2-d points to one logit")
        if self.generator.output_dim != 2 or self.generator.input_dim != self.latent_dim:
            raise ValueError("generator must map the latent space to 2-d points")
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("alpha and beta must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self._graphs: dict[int, _GameGraph] = {}

    @property
    def n_theta(self) -> int:
        return self.discriminator.n_params

    @property
    def n_phi(self) -> int:
        return self.generator.n_params

    def init_state(self) -> GameState:
        return GameState(self.discriminator.init_params(), self.generator.init_params())

    def sample_batch(self, rng: np.random.Generator, n: int | None = None) -> Batch:
        n = self.batch_size if n is None else n
        x = mog_sample(self.data, n, rng)
        z = rng.standard_normal((n, self.latent_dim))
        return Batch(x, z)

    def _graph(self, batch) -> _GameGraph:
        if batch is None:
            raise ValueError("GanGame needs a batch (x, z)")
        x, z = batch
        n = len(x)
        if n < 1 or len(z) != n:
            raise ValueError("batches must be non-empty and of equal size")
        g = self._graphs.get(n)
        if g is None:
            g = self._graphs[n] = self._build(n)
        return g

    def _build(self, n: int) -> _GameGraph:
        theta = [ad.inp(f"d.p{i}", s) for i, s in enumerate(self.discriminator.shapes)]
        phi = [ad.inp(f"g.p{i}", s) for i, s in enumerate(self.generator.shapes)]
        x = ad.inp("x", (n, 2))
        z = ad.inp("z", (n, self.latent_dim))
        ones = ad.const(np.ones((n, 1)))
        fake = mlp_expr(self.generator, phi, z, ones)
        real_logit = mlp_expr(self.discriminator, theta, x, ones)
        fake_logit = mlp_expr(self.discriminator, theta, fake, ones)
        d_fake = ad.sigmoid(fake_logit)
        l_d = ad.sub(
            ad.neg(ad.mean(ad.log(ad.sigmoid(real_logit)))),
            ad.mean(ad.log(ad.sub(1.0, d_fake))),
        )
        l_g = ad.neg(ad.mean(ad.log(d_fake)))
        return _GameGraph(theta, phi, [x, z], l_d, l_g)

    def _bindings(self, graph, state, batch):
        b = super()._bindings(graph, state, batch)
        b["x"] = np.asarray(batch[0], dtype=np.float64)
        b["z"] = np.asarray(batch[1], dtype=np.float64)
        return b

    def generate(self, state: GameState, z: np.ndarray) -> np.ndarray:
        return mlp_forward(self.generator, state.phi, z)

    def logits(self, state: GameState, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self.discriminator, state.theta, x)[:, 0]


def gan_losses(game: GanGame, state: GameState, batch_x, batch_z) -> LossPair:
    return game.losses(state, Batch(np.asarray(batch_x), np.asarray(batch_z)))


def velocity(game, state: GameState, batch=None) -> np.ndarray:
    return game.velocity(state, batch)
