"""Low-rank adapters and the shared-adapter bank.

An adapter models a weight increment as ``scale * b @ a`` with
``a: (rank, in_dim)`` Gaussian-initialized and ``b: (out_dim, rank)``
zero-initialized, so a fresh adapter contributes nothing.  The scale is
``alpha / rank`` (configurable alpha, default 16 in the run configs).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, RankError
from .numerics import SeededRng, gaussian_matrix

# Module families of one encoder layer: query, key, value, intermediate,
# attention-output, dense (FFN output).
FAMILIES = ("Q", "K", "V", "I", "O", "D")


@dataclass
class LowRankAdapter:
    a: np.ndarray  # (rank, in_dim)
    b: np.ndarray  # (out_dim, rank)
    rank: int
    alpha: float
    dropout_p: float = 0.0

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        """Materialized increment, (out_dim x in_dim). Reporting/tests only."""
        return self.scale * (self.b @ self.a)

    def param_count(self) -> int:
        return self.a.size + self.b.size

    def copy(self) -> "LowRankAdapter":
        return LowRankAdapter(self.a.copy(), self.b.copy(), self.rank, self.alpha, self.dropout_p)


def init_adapter(
    d: int, k: int, r: int, alpha: float, rng: SeededRng, dropout_p: float = 0.0
) -> LowRankAdapter:
    """Fresh adapter for a (d x k) module.

    ``a`` entries are N(0, 1/r) so the increment magnitude stays comparable
    across ranks; ``b`` starts at zero, making delta() exactly zero.
    """
    if r < 1 or r > min(d, k):
        raise RankError(f"rank {r} invalid for a {d}x{k} module")
    a = gaussian_matrix(r, k, rng) / np.sqrt(r)
    b = np.zeros((d, r))
    return LowRankAdapter(a, b, r, float(alpha), float(dropout_p))


def gated_forward(
    w0: np.ndarray, adapter: LowRankAdapter | None, gate: float, x: np.ndarray
) -> np.ndarray:
    """w0 @ x plus the gated adapter branch, kept in factored form.

    ``x`` holds column vectors.  The adapter product is evaluated as
    b @ (a @ x) so the full (d x k) increment is never materialized.
    """
    if w0.shape[1] != x.shape[0]:
        raise DimensionError(f"input has {x.shape[0]} rows, module expects {w0.shape[1]}")
    y = w0 @ x
    if adapter is not None and gate != 0.0:
        if adapter.a.shape[1] != x.shape[0] or adapter.b.shape[0] != w0.shape[0]:
            raise DimensionError("adapter shapes do not match the module")
        y = y + (gate * adapter.scale) * (adapter.b @ (adapter.a @ x))
    return y


def apply_input_dropout(x: np.ndarray, dropout_p: float, rng: SeededRng) -> np.ndarray:
    """Inverted dropout on the adapter-branch input; training path only."""
    if dropout_p <= 0.0:
        return x
    keep = (rng.uniform(x.size).reshape(x.shape) >= dropout_p).astype(np.float64)
    return x * keep / (1.0 - dropout_p)


@dataclass
class SharedAdapterBank:
    """One adapter per module family, shared by every unselected module.

    All referencing sites hold the same object, so parameter values are
    identical across sites by construction, not by synchronization.
    """

    adapters: dict[str, LowRankAdapter] = field(default_factory=dict)

    def get(self, family: str) -> LowRankAdapter | None:
        return self.adapters.get(family)

    def ensure(
        self, family: str, d: int, k: int, r: int, alpha: float, rng: SeededRng
    ) -> LowRankAdapter:
        if family not in self.adapters:
            self.adapters[family] = init_adapter(d, k, r, alpha, rng)
        return self.adapters[family]

    def param_count(self) -> int:
        return sum(a.param_count() for a in self.adapters.values())
