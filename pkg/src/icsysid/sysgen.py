"""Sampling and simulation of random discrete-time dynamical systems.

Three system kinds are supported: stable SISO LTI state-space systems,
Wiener-Hammerstein chains (LTI -> static nonlinearity -> LTI), and parallel
WH systems summing several independent chains. A `ClassSpec` describes a
distribution over systems; `sample_from_class` draws a concrete
`SystemInstance` and `simulate` runs it causally over an input sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigError, InputError, NumericError, ShapeError

GAIN_NORM_STEPS = 1000  # horizon of the unit impulse-response-energy scaling
ZERO_MAG_MAX = 0.97     # transfer-function zeros are sampled inside this radius
_MAX_RESAMPLE = 100


@dataclass(frozen=True)
class PoleRegion:
    """Conjugation-closed magnitude/phase region of the open unit disk."""

    mag_min: float = 0.5
    mag_max: float = 0.97
    phase_min: float = -math.pi
    phase_max: float = math.pi

    def __post_init__(self) -> None:
        if not 0.0 <= self.mag_min <= self.mag_max < 1.0:
            raise ConfigError(
                "pole magnitudes must satisfy 0 <= mag_min <= mag_max < 1, "
                f"got [{self.mag_min}, {self.mag_max}]"
            )
        if not -math.pi <= self.phase_min <= self.phase_max <= math.pi:
            raise ConfigError(
                "pole phases must satisfy -pi <= phase_min <= phase_max <= pi, "
                f"got [{self.phase_min}, {self.phase_max}]"
            )

    def upper_phase_interval(self) -> tuple[float, float]:
        """Intersection of the region (plus its mirror image) with [0, pi].

        Realness forces conjugate-paired poles, so sampling covers only the
        upper half-plane; the lower half is implied.
        """
        if self.phase_max <= 0.0:
            return -self.phase_max, -self.phase_min
        if self.phase_min >= 0.0:
            return self.phase_min, self.phase_max
        return 0.0, max(self.phase_max, -self.phase_min)


@dataclass
class LtiSystem:
    """Stable SISO state-space system  x' = A x + B u,  y = C x + D u."""

    A: np.ndarray   # (n, n)
    B: np.ndarray   # (n, 1)
    C: np.ndarray   # (1, n)
    D: np.ndarray   # (1, 1)
    poles: np.ndarray  # complex (n,), closed under conjugation
    zeros: np.ndarray  # complex (n,)
    state: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.state is None:
            self.state = np.zeros(self.A.shape[0])

    @property
    def order(self) -> int:
        return self.A.shape[0]

    def reset(self) -> None:
        self.state = np.zeros(self.order)


@dataclass
class StaticNet:
    """Memoryless scalar map z -> W2 tanh(W1 z + b1) + b2."""

    W1: np.ndarray  # (hidden, 1)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (1, hidden)
    b2: float

    @property
    def hidden_size(self) -> int:
        return self.W1.shape[0]

    def __call__(self, z: np.ndarray) -> np.ndarray:
        h = np.tanh(np.outer(z, self.W1[:, 0]) + self.b1)
        return h @ self.W2[0] + self.b2


@dataclass
class WhBlocks:
    """One Wiener-Hammerstein chain: g1 feeds the static net, which feeds g2."""

    g1: LtiSystem
    f: StaticNet
    g2: LtiSystem


@dataclass
class SystemInstance:
    """A concrete sampled system with a stateful, causal simulation rule.

    `kind` is one of "lti" (blocks: LtiSystem), "wh" (blocks: WhBlocks) or
    "pwh" (blocks: list of WhBlocks whose outputs are summed and rescaled).
    """

    kind: str
    blocks: LtiSystem | WhBlocks | list[WhBlocks]

    def lti_blocks(self):
        if self.kind == "lti":
            yield self.blocks
        elif self.kind == "wh":
            yield self.blocks.g1
            yield self.blocks.g2
        elif self.kind == "pwh":
            for branch in self.blocks:
                yield branch.g1
                yield branch.g2
        else:
            raise ConfigError(f"unknown system kind {self.kind!r}")

    def reset(self) -> None:
        for block in self.lti_blocks():
            block.reset()


@dataclass(frozen=True)
class ClassSpec:
    """A probability distribution over systems.

    kind "lti"/"wh"/"pwh" use the order bounds and pole region (plus
    hidden_size for the WH nonlinearity and n_branches for pwh); kind
    "mixture" holds weighted sub-specs in `components`.
    """

    kind: str
    order_min: int = 1
    order_max: int = 5
    pole_region: PoleRegion = field(default_factory=PoleRegion)
    hidden_size: int = 32
    n_branches: int = 2
    components: tuple[tuple["ClassSpec", float], ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("lti", "wh", "pwh", "mixture"):
            raise ConfigError(f"unknown class kind {self.kind!r}")
        if self.kind == "mixture":
            if not self.components:
                raise ConfigError("mixture spec needs at least one component")
            weights = [w for _, w in self.components]
            if any(w <= 0 for w in weights):
                raise ConfigError("mixture weights must be positive")
            if abs(sum(weights) - 1.0) > 1e-9:
                raise ConfigError(f"mixture weights must sum to 1, got {sum(weights)}")
            return
        if not 1 <= self.order_min <= self.order_max:
            raise ConfigError(
                f"order bounds must satisfy 1 <= order_min <= order_max, "
                f"got [{self.order_min}, {self.order_max}]"
            )
        if self.kind in ("wh", "pwh") and self.hidden_size < 1:
            raise ConfigError(f"hidden_size must be >= 1, got {self.hidden_size}")
        if self.kind == "pwh" and self.n_branches < 2:
            raise ConfigError(f"pwh needs n_branches >= 2, got {self.n_branches}")

    def to_dict(self) -> dict:
        if self.kind == "mixture":
            return {
                "kind": "mixture",
                "components": [
                    {"weight": w, "spec": s.to_dict()} for s, w in self.components
                ],
            }
        d = {
            "kind": self.kind,
            "order_min": self.order_min,
            "order_max": self.order_max,
            "mag_range": [self.pole_region.mag_min, self.pole_region.mag_max],
            "phase_range": [self.pole_region.phase_min, self.pole_region.phase_max],
        }
        if self.kind in ("wh", "pwh"):
            d["hidden_size"] = self.hidden_size
        if self.kind == "pwh":
            d["n_branches"] = self.n_branches
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClassSpec":
        if not isinstance(d, dict) or "kind" not in d:
            raise ConfigError(f"class spec must be an object with a 'kind' tag, got {d!r}")
        kind = d["kind"]
        if kind == "mixture":
            comps = d.get("components")
            if not isinstance(comps, list) or not comps:
                raise ConfigError("mixture spec needs a non-empty 'components' list")
            components = tuple(
                (cls.from_dict(c["spec"]), float(c["weight"])) for c in comps
            )
            return cls(kind="mixture", components=components)
        region_kwargs = {}
        if "mag_range" in d:
            region_kwargs["mag_min"], region_kwargs["mag_max"] = map(float, d["mag_range"])
        if "phase_range" in d:
            region_kwargs["phase_min"], region_kwargs["phase_max"] = map(float, d["phase_range"])
        return cls(
            kind=kind,
            order_min=int(d.get("order_min", 1)),
            order_max=int(d.get("order_max", 5)),
            pole_region=PoleRegion(**region_kwargs),
            hidden_size=int(d.get("hidden_size", 32)),
            n_branches=int(d.get("n_branches", 2)),
        )


def _conjugate_root_set(
    rng: np.random.Generator,
    count: int,
    mag_lo: float,
    mag_hi: float,
    phase_lo: float,
    phase_hi: float,
) -> np.ndarray:
    """floor(count/2) conjugate pairs, magnitude and phase uniform; for odd
    count one extra real root whose sign puts it nearest the phase interval
    (ties broken at random)."""
    roots = []
    for _ in range(count // 2):
        mag = rng.uniform(mag_lo, mag_hi)
        phase = rng.uniform(phase_lo, phase_hi)
        root = mag * np.exp(1j * phase)
        roots.extend([root, np.conj(root)])
    if count % 2:
        mag = rng.uniform(mag_lo, mag_hi)
        dist_zero, dist_pi = phase_lo, math.pi - phase_hi
        if dist_zero < dist_pi:
            sign = 1.0
        elif dist_pi < dist_zero:
            sign = -1.0
        else:
            sign = 1.0 if rng.integers(2) else -1.0
        roots.append(sign * mag + 0j)
    return np.asarray(roots, dtype=complex)


def _poly_from_roots(roots: np.ndarray) -> np.ndarray:
    """Monic polynomial coefficients (descending powers) from a conjugate-closed
    root set; imaginary residue is rounding noise and is dropped."""
    coeffs = np.ones(1, dtype=complex)
    for r in roots:
        coeffs = np.convolve(coeffs, np.array([1.0, -r]))
    return coeffs.real


def _companion_realization(num: np.ndarray, den: np.ndarray):
    """Controllable canonical form of num(z)/den(z), both monic of equal degree."""
    n = len(den) - 1
    A = np.zeros((n, n))
    A[0, :] = -den[1:]
    if n > 1:
        A[np.arange(1, n), np.arange(0, n - 1)] = 1.0
    B = np.zeros((n, 1))
    B[0, 0] = 1.0
    C = (num[1:] - num[0] * den[1:])[None, :]
    D = np.array([[num[0]]])
    return A, B, C, D


def sample_lti(
    region: PoleRegion, order_min: int, order_max: int, rng: np.random.Generator
) -> LtiSystem:
    """Draw a stable LTI system with poles in `region` and unit impulse energy.

    Order is uniform over {order_min..order_max}. The realization is scaled
    so the sum of squared Markov parameters over the first 1000 steps is 1.
    """
    if not 1 <= order_min <= order_max:
        raise ConfigError(
            f"order bounds must satisfy 1 <= order_min <= order_max, "
            f"got [{order_min}, {order_max}]"
        )
    phase_lo, phase_hi = region.upper_phase_interval()
    for _ in range(_MAX_RESAMPLE):
        order = int(rng.integers(order_min, order_max + 1))
        poles = _conjugate_root_set(rng, order, region.mag_min, region.mag_max, phase_lo, phase_hi)
        zeros = _conjugate_root_set(rng, order, 0.0, ZERO_MAG_MAX, 0.0, math.pi)
        den = _poly_from_roots(poles)
        num = _poly_from_roots(zeros)
        A, B, C, D = _companion_realization(num, den)
        impulse = np.zeros(GAIN_NORM_STEPS)
        impulse[0] = 1.0
        markov = lfilter(num, den, impulse)
        energy = float(markov @ markov)
        if not (
            np.isfinite(A).all()
            and np.isfinite(C).all()
            and math.isfinite(energy)
            and energy > 0.0
        ):
            continue
        scale = 1.0 / math.sqrt(energy)
        system = LtiSystem(A=A, B=B, C=C * scale, D=D * scale, poles=poles, zeros=zeros)
        if np.max(np.abs(np.linalg.eigvals(A))) >= 1.0:
            continue
        return system
    raise NumericError("failed to realize a finite stable LTI system after 100 attempts")


def _sample_static_net(hidden_size: int, rng: np.random.Generator) -> StaticNet:
    if hidden_size < 1:
        raise ConfigError(f"hidden_size must be >= 1, got {hidden_size}")
    W1 = rng.standard_normal((hidden_size, 1))
    b1 = rng.standard_normal(hidden_size)
    W2 = rng.standard_normal((1, hidden_size)) / math.sqrt(hidden_size)
    return StaticNet(W1=W1, b1=b1, W2=W2, b2=0.0)


def _sample_wh_blocks(spec: ClassSpec, rng: np.random.Generator) -> WhBlocks:
    g1 = sample_lti(spec.pole_region, spec.order_min, spec.order_max, rng)
    f = _sample_static_net(spec.hidden_size, rng)
    g2 = sample_lti(spec.pole_region, spec.order_min, spec.order_max, rng)
    return WhBlocks(g1=g1, f=f, g2=g2)


def sample_wh(spec: ClassSpec, rng: np.random.Generator) -> SystemInstance:
    """Draw a Wiener-Hammerstein chain with independent LTI blocks."""
    if spec.kind != "wh":
        raise ConfigError(f"sample_wh needs a 'wh' spec, got {spec.kind!r}")
    return SystemInstance(kind="wh", blocks=_sample_wh_blocks(spec, rng))


def sample_pwh(spec: ClassSpec, rng: np.random.Generator) -> SystemInstance:
    """Draw a parallel WH system of n_branches independent chains."""
    if spec.kind != "pwh":
        raise ConfigError(f"sample_pwh needs a 'pwh' spec, got {spec.kind!r}")
    branches = [_sample_wh_blocks(spec, rng) for _ in range(spec.n_branches)]
    return SystemInstance(kind="pwh", blocks=branches)


def sample_from_class(spec: ClassSpec, rng: np.random.Generator) -> SystemInstance:
    """Draw one system from the distribution described by `spec`."""
    if spec.kind == "mixture":
        weights = np.array([w for _, w in spec.components])
        idx = int(rng.choice(len(spec.components), p=weights / weights.sum()))
        return sample_from_class(spec.components[idx][0], rng)
    if spec.kind == "lti":
        block = sample_lti(spec.pole_region, spec.order_min, spec.order_max, rng)
        return SystemInstance(kind="lti", blocks=block)
    if spec.kind == "wh":
        return sample_wh(spec, rng)
    if spec.kind == "pwh":
        return sample_pwh(spec, rng)
    raise ConfigError(f"unknown class kind {spec.kind!r}")


def _run_lti(block: LtiSystem, u: np.ndarray) -> np.ndarray:
    A = block.A
    Bv = block.B[:, 0]
    Cv = block.C[0]
    d = float(block.D[0, 0])
    x = block.state
    y = np.empty(len(u))
    for k in range(len(u)):
        uk = u[k]
        y[k] = Cv @ x + d * uk
        x = A @ x + Bv * uk
    block.state = x
    return y


def _run_wh(branch: WhBlocks, u: np.ndarray) -> np.ndarray:
    return _run_lti(branch.g2, branch.f(_run_lti(branch.g1, u)))


def simulate(system: SystemInstance, u: np.ndarray) -> np.ndarray:
    """Run the causal recursion of `system` over input `u` (shape (N,) or (N, 1)).

    The internal state advances across the call; reset the system before
    reusing it on an independent sequence.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim == 2 and u.shape[1] == 1:
        u = u[:, 0]
    if u.ndim != 1:
        raise ShapeError(f"simulate expects a scalar input sequence, got shape {u.shape}")
    if not np.all(np.isfinite(u)):
        raise InputError("input sequence contains non-finite values")
    if system.kind == "lti":
        y = _run_lti(system.blocks, u)
    elif system.kind == "wh":
        y = _run_wh(system.blocks, u)
    elif system.kind == "pwh":
        y = sum(_run_wh(branch, u) for branch in system.blocks)
        y = y / math.sqrt(len(system.blocks))
    else:
        raise ConfigError(f"unknown system kind {system.kind!r}")
    if not np.all(np.isfinite(y)):
        raise NumericError("simulation produced non-finite output")
    return y
