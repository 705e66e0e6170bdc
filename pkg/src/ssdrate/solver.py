"""Constant step-size projected stochastic subgradient descent on a box.

The solver is generic: anything implementing :class:`StochasticProblem`
can be driven by :func:`run`. The problem supplies a per-slot primal
solver that returns a stochastic subgradient of its dual function.
"""
from __future__ import annotations

import abc
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

DEFAULT_MEMORY_CAP = 2_000_000  # slots kept in RAM before spilling to disk
_SAMPLE_CHUNK = 4096


class InvalidInputError(ValueError):
    """Raised for malformed arguments (bad shapes, non-finite values)."""


class ConfigurationError(ValueError):
    """Raised when a configuration cannot be used as given."""


class SamplingError(RuntimeError):
    """A problem failed to sample its state; carries the slot index."""

    def __init__(self, slot: int, cause: BaseException):
        super().__init__(f"state sampling failed at slot {slot}: {cause}")
        self.slot = slot
        self.__cause__ = cause


@dataclass(frozen=True)
class DualVector:
    values: np.ndarray
    lambda_max: float

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).reshape(-1)
        if vals.size < 1:
            raise InvalidInputError("dual vector needs at least one coordinate")
        if not (self.lambda_max > 0 and math.isfinite(self.lambda_max)):
            raise InvalidInputError(f"lambda_max must be positive, got {self.lambda_max}")
        if not np.all(np.isfinite(vals)):
            raise InvalidInputError("dual vector has non-finite entries")
        if np.any(vals < 0) or np.any(vals > self.lambda_max):
            raise InvalidInputError(f"dual vector {vals} outside [0, {self.lambda_max}]")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def dim(self) -> int:
        return self.values.size

    @classmethod
    def zeros(cls, dim: int, lambda_max: float) -> "DualVector":
        return cls(np.zeros(dim), lambda_max)


@dataclass(frozen=True)
class SolverConfig:
    step_size: float
    horizon: int
    initial_dual: DualVector
    seed: int = 0
    memory_cap: int = DEFAULT_MEMORY_CAP
    spill_dir: str | None = None

    def __post_init__(self):
        if not (self.step_size > 0 and math.isfinite(self.step_size)):
            raise ConfigurationError(f"step size must be positive, got {self.step_size}")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ConfigurationError(f"horizon must be a positive integer, got {self.horizon}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError("seed must fit in 64 bits")


@dataclass
class SubgradientSample:
    value: np.ndarray
    mean_value: np.ndarray | None = None
    slot: int = 0


@dataclass
class SlotSolution:
    """Primal solution of one slot's Lagrangian at a fixed dual vector.

    ``allocation`` is the state-independent primal variable x (averaged by
    the primal recovery bound), ``subgradient`` is s_t(x, p_t) and
    ``lagrangian`` is the attained slot objective f0(x) + <lambda, s_t>.
    ``info`` carries problem-specific scalars for the trace.
    """

    allocation: np.ndarray
    subgradient: np.ndarray
    lagrangian: float
    info: Mapping[str, float] = field(default_factory=dict)


class StochasticProblem(abc.ABC):
    """Contract between a stochastic dual problem and the solver."""

    #: names of the scalars each SlotSolution.info provides
    info_fields: tuple[str, ...] = ()

    @property
    @abc.abstractmethod
    def dim(self) -> int:
        """Number of dual coordinates K."""

    @property
    @abc.abstractmethod
    def allocation_dim(self) -> int:
        """Length of the primal allocation vector x."""

    @property
    @abc.abstractmethod
    def subgradient_bound(self) -> float:
        """Bound G with ||f_t(lambda)|| <= G for every state and lambda."""

    @abc.abstractmethod
    def sample_state(self, rng: np.random.Generator) -> Any:
        ...

    def sample_states(self, rng: np.random.Generator, count: int) -> Sequence[Any]:
        return [self.sample_state(rng) for _ in range(count)]

    @abc.abstractmethod
    def solve(self, lam: np.ndarray, state: Any) -> SlotSolution:
        ...

    @abc.abstractmethod
    def objective(self, allocation: np.ndarray) -> float:
        """Concave primal objective f0 evaluated at an allocation x."""

    def mean_subgradient(self, lam: np.ndarray) -> np.ndarray | None:
        """Exact E[f_t(lambda)] when available, else None."""
        return None

    def dual_value(self, lam: np.ndarray) -> float | None:
        """Exact g(lambda) when available, else None."""
        return None


@dataclass(frozen=True)
class SlotRecord:
    slot: int
    dual: np.ndarray
    allocation: np.ndarray
    subgradient: np.ndarray
    mean_subgradient: np.ndarray | None
    lagrangian: float
    info: dict[str, float]


class Trace:
    """Column store of one run; arrays spill to ``.npy`` memmaps past the cap."""

    def __init__(self, horizon: int, dim: int, allocation_dim: int,
                 info_fields: Sequence[str], with_means: bool,
                 memory_cap: int = DEFAULT_MEMORY_CAP, spill_dir: str | None = None):
        self.horizon = horizon
        self.dim = dim
        self.info_fields = tuple(info_fields)
        self.spill_path: Path | None = None
        if horizon > memory_cap:
            self.spill_path = Path(spill_dir or tempfile.mkdtemp(prefix="ssdrate-trace-"))
            self.spill_path.mkdir(parents=True, exist_ok=True)
        alloc = self._alloc
        self.dual = alloc("dual", (horizon, dim))
        self.subgradient = alloc("subgradient", (horizon, dim))
        self.mean_subgradient = alloc("mean_subgradient", (horizon, dim)) if with_means else None
        self.allocation = alloc("allocation", (horizon, allocation_dim))
        self.lagrangian = alloc("lagrangian", (horizon,))
        self.info = {name: alloc(f"info_{name}", (horizon,)) for name in self.info_fields}
        self.final_dual: np.ndarray | None = None

    def _alloc(self, name, shape):
        if self.spill_path is None:
            return np.zeros(shape)
        return np.lib.format.open_memmap(self.spill_path / f"{name}.npy", mode="w+",
                                         dtype=np.float64, shape=shape)

    @property
    def on_disk(self) -> bool:
        return self.spill_path is not None

    def __len__(self) -> int:
        return self.horizon

    def __getitem__(self, t: int) -> SlotRecord:
        if t < 0:
            t += self.horizon
        if not 0 <= t < self.horizon:
            raise IndexError(t)
        return SlotRecord(
            slot=t,
            dual=np.array(self.dual[t]),
            allocation=np.array(self.allocation[t]),
            subgradient=np.array(self.subgradient[t]),
            mean_subgradient=None if self.mean_subgradient is None else np.array(self.mean_subgradient[t]),
            lagrangian=float(self.lagrangian[t]),
            info={k: float(v[t]) for k, v in self.info.items()},
        )

    def __iter__(self):
        return (self[t] for t in range(self.horizon))


def project_box(raw, lambda_max: float) -> DualVector:
    raw = np.asarray(raw, dtype=float).reshape(-1)
    if not np.all(np.isfinite(raw)):
        raise InvalidInputError(f"cannot project non-finite vector {raw}")
    if not lambda_max > 0:
        raise InvalidInputError(f"lambda_max must be positive, got {lambda_max}")
    # + 0.0 folds -0.0 into 0.0
    return DualVector(np.minimum(np.maximum(raw, 0.0), lambda_max) + 0.0, lambda_max)


def ssd_step(lam: DualVector, subgrad: SubgradientSample, epsilon: float) -> DualVector:
    g = np.asarray(subgrad.value, dtype=float).reshape(-1)
    if g.size != lam.dim:
        raise InvalidInputError(f"subgradient has {g.size} coordinates, dual has {lam.dim}")
    return project_box(lam.values - epsilon * g, lam.lambda_max)


def epoch_index(t: int, epsilon: float) -> int:
    """Completed epochs n = floor(eps * t) after t slots.

    Computed as floor(t / (1/eps)) when 1/eps is integral so that epoch
    boundaries are not lost to rounding (0.1 * 30 = 3.0000000000000004).
    """
    if t < 0:
        raise InvalidInputError("slot index must be non-negative")
    inv = 1.0 / epsilon
    if abs(inv - round(inv)) < 1e-9 * max(1.0, inv):
        return int(t // round(inv))
    return math.floor(epsilon * t)


def epoch_length(epsilon: float) -> int:
    """Slots per epoch, 1/eps rounded to the nearest integer."""
    return max(1, int(round(1.0 / epsilon)))


def epoch_start(n: int, eps: float) -> int:
    """First slot t with epoch_index(t, eps) >= n."""
    if n < 0:
        raise InvalidInputError("epoch count must be non-negative")
    t = max(int(math.ceil(n / eps)) - 1, 0)
    while epoch_index(t, eps) < n:
        t += 1
    while t > 0 and epoch_index(t - 1, eps) >= n:
        t -= 1
    return t


def running_average(seq) -> np.ndarray:
    arr = np.asarray(seq, dtype=float)
    if arr.shape[0] == 0:
        raise InvalidInputError("running average of an empty sequence")
    counts = np.arange(1, arr.shape[0] + 1, dtype=float)
    return np.cumsum(arr, axis=0) / counts.reshape((-1,) + (1,) * (arr.ndim - 1))


def _state_stream(problem: StochasticProblem, rng: np.random.Generator, horizon: int):
    t = 0
    while t < horizon:
        count = min(_SAMPLE_CHUNK, horizon - t)
        try:
            states = problem.sample_states(rng, count)
        except Exception as exc:  # noqa: BLE001 - re-raised with slot context
            raise SamplingError(t, exc) from exc
        yield from states
        t += count


def state_sequence(problem: StochasticProblem, seed: int, horizon: int) -> list:
    """The exact states ``run`` sees for this seed and horizon."""
    return list(_state_stream(problem, np.random.default_rng(seed), horizon))


def run(problem: StochasticProblem, config: SolverConfig) -> Trace:
    lam0 = config.initial_dual
    if lam0.dim != problem.dim:
        raise InvalidInputError(f"initial dual has {lam0.dim} coordinates, problem has {problem.dim}")
    lam_max = lam0.lambda_max
    eps = config.step_size
    T = int(config.horizon)
    rng = np.random.default_rng(config.seed)
    probe = problem.mean_subgradient(lam0.values)
    trace = Trace(T, problem.dim, problem.allocation_dim, problem.info_fields,
                  with_means=probe is not None, memory_cap=config.memory_cap,
                  spill_dir=config.spill_dir)
    lam = np.array(lam0.values)
    for t, state in enumerate(_state_stream(problem, rng, T)):
        sol = problem.solve(lam, state)
        trace.dual[t] = lam
        trace.subgradient[t] = sol.subgradient
        trace.allocation[t] = sol.allocation
        trace.lagrangian[t] = sol.lagrangian
        for name in trace.info_fields:
            trace.info[name][t] = sol.info[name]
        if trace.mean_subgradient is not None:
            trace.mean_subgradient[t] = problem.mean_subgradient(lam)
        lam = np.minimum(np.maximum(lam - eps * sol.subgradient, 0.0), lam_max)
    trace.final_dual = lam
    return trace


class AffineNoiseProblem(StochasticProblem):
    """Synthetic K-dimensional test problem with finite-support noise.

    f_t(lambda) = A lambda - b + xi_t where xi_t is drawn uniformly from the
    rows of ``noise`` (which must average to zero). With A symmetric PSD this
    is the stochastic gradient of g(lambda) = 0.5 lambda'A lambda - b'lambda.
    There is no primal problem behind it: allocation and objective are
    placeholders, so only dual-side quantities are meaningful.
    """

    info_fields = ()

    def __init__(self, A, b, noise, bound: float | None = None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.b = np.asarray(b, dtype=float).reshape(-1)
        self.noise = np.atleast_2d(np.asarray(noise, dtype=float))
        k = self.b.size
        if self.A.shape != (k, k) or self.noise.shape[1] != k:
            raise InvalidInputError("A, b and noise dimensions disagree")
        if not np.allclose(self.noise.mean(axis=0), 0.0, atol=1e-12):
            raise InvalidInputError("noise atoms must have zero mean")
        self._bound = bound

    @property
    def dim(self) -> int:
        return self.b.size

    @property
    def allocation_dim(self) -> int:
        return self.b.size

    @property
    def subgradient_bound(self) -> float:
        if self._bound is None:
            raise ConfigurationError("bound depends on the box; pass it explicitly")
        return self._bound

    def sample_state(self, rng):
        return int(rng.integers(self.noise.shape[0]))

    def sample_states(self, rng, count):
        return rng.integers(self.noise.shape[0], size=count).tolist()

    def solve(self, lam, state):
        lam = np.asarray(lam, dtype=float)
        g = self.A @ lam - self.b + self.noise[state]
        return SlotSolution(allocation=np.array(lam), subgradient=g,
                            lagrangian=float(self.dual_value(lam) + lam @ self.noise[state]))

    def objective(self, allocation):
        return 0.0

    def mean_subgradient(self, lam):
        return self.A @ np.asarray(lam, dtype=float) - self.b

    def dual_value(self, lam):
        lam = np.asarray(lam, dtype=float)
        return float(0.5 * lam @ self.A @ lam - self.b @ lam)
