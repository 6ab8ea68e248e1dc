"""Differentiable adaptation matrix lifecycle.

The selection state lives as unconstrained logits; row-wise exponential
normalization keeps the relaxed matrix on the probability simplex, so the
alternating gradient updates never need a projection.  Discretization
keeps the top k = floor(rho * N) entries per row (ties broken toward the
lower module index), and the weight-sharing attachment wires every
unselected module of a family to one shared adapter.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .adapters import FAMILIES, LowRankAdapter, SharedAdapterBank, init_adapter
from .errors import ConfigError, DataError, DivergenceError, SharingError
from .models import ModularNet, _FAMILY_INDEX
from .numerics import SeededRng


@dataclass(frozen=True)
class DamState:
    logits: np.ndarray  # (L, N) unconstrained trainable
    rho: float
    gamma_bin: np.ndarray | None = None  # (L, N) binary, absent before discretization

    @property
    def shape(self) -> tuple[int, int]:
        return self.logits.shape

    @property
    def k(self) -> int:
        return int(np.floor(self.rho * self.logits.shape[1]))

    @property
    def gamma_bar(self) -> np.ndarray:
        return gamma_from_logits(self.logits)


def init_dam(num_layers: int, num_modules: int, rho: float) -> DamState:
    """Uniform relaxed state: zero logits give gamma_bar = 1/N everywhere."""
    if num_layers < 1 or num_modules < 1:
        raise ConfigError(f"need at least one layer and module, got {num_layers}x{num_modules}")
    if int(np.floor(rho * num_modules)) < 1:
        raise ConfigError(f"rho = {rho} with N = {num_modules} selects zero modules")
    return DamState(np.zeros((num_layers, num_modules)), float(rho))


def gamma_from_logits(logits: np.ndarray) -> np.ndarray:
    """Row-wise exponential normalization with max subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def row_entropy(gamma_bar: np.ndarray) -> list[float]:
    """Shannon entropy per row (nats); 0 ln 0 counts as 0."""
    g = np.asarray(gamma_bar, dtype=np.float64)
    terms = np.where(g > 0.0, g * np.log(np.where(g > 0.0, g, 1.0)), 0.0)
    return [-float(s) for s in terms.sum(axis=1)]


def discretize(dam: DamState) -> DamState:
    """Binary selection keeping the k largest entries of each row.

    Entries tied at the k-th-largest value are resolved toward the lower
    module index, so every row ends up with exactly k ones.
    """
    gb = dam.gamma_bar
    k = dam.k
    order = np.argsort(-gb, axis=1, kind="stable")  # ties keep lower index first
    gamma_bin = np.zeros_like(gb)
    rows = np.arange(gb.shape[0])[:, None]
    gamma_bin[rows, order[:, :k]] = 1.0
    return replace(dam, gamma_bin=gamma_bin)


def bilevel_step(
    dam: DamState,
    net: ModularNet,
    train_batch: tuple[np.ndarray, np.ndarray],
    valid_batch: tuple[np.ndarray, np.ndarray],
    eta: float,
    inner_steps: int = 1,
    drop_rng: SeededRng | None = None,
    step_offset: int = 0,
    eta_dam: float | None = None,
) -> tuple[DamState, ModularNet, dict]:
    """One outer logits update followed by ``inner_steps`` adapter updates.

    The outer step descends the validation loss through the simplex map
    only (first-order approximation: the adapters are held fixed); the
    inner steps descend the training loss with the relaxed gates held
    fixed.  ``eta_dam`` defaults to ``eta``; the simplex reparameterization
    shrinks logit gradients by roughly the gate value (~1/N), so selection
    runs usually set it well above the adapter step.  Returns the updated
    state plus the losses that were computed.
    """
    from .pipeline import gd_step

    xt, yt = train_batch
    xv, yv = valid_batch
    if xt.shape[1] == 0 or xv.shape[1] == 0:
        raise DataError("bilevel_step needs non-empty train and valid batches")
    if eta_dam is None:
        eta_dam = eta

    valid_loss, grads = net.loss_and_grads(xv, yv, gates=dam.gamma_bar)
    if not np.isfinite(valid_loss):
        raise DivergenceError("validation loss is not finite", step_offset)
    gb = dam.gamma_bar
    # chain rule through row-wise softmax: d theta = gb * (dg - <dg, gb>)
    inner_prod = np.sum(grads.gates * gb, axis=1, keepdims=True)
    dlogits = gb * (grads.gates - inner_prod)
    new_dam = replace(dam, logits=gd_step(dam.logits, dlogits, eta_dam), gamma_bin=None)

    train_losses: list[float] = []
    gates = new_dam.gamma_bar
    for t in range(int(inner_steps)):
        train_loss, grads = net.loss_and_grads(xt, yt, gates=gates, drop_rng=drop_rng)
        if not np.isfinite(train_loss):
            raise DivergenceError(
                "training loss is not finite", step_offset + 1 + t, tuple(train_losses[-3:])
            )
        for adapter, da, db in grads.by_adapter.values():
            adapter.a = gd_step(adapter.a, da, eta)
            adapter.b = gd_step(adapter.b, db, eta)
        train_losses.append(train_loss)
    return new_dam, net, {"valid_loss": valid_loss, "train_losses": train_losses}


def attach_sharing(
    dam: DamState,
    net: ModularNet,
    r_s: int,
    enabled: bool,
    r_l: int,
    alpha: float,
    rng: SeededRng,
) -> tuple[ModularNet, SharedAdapterBank]:
    """Stage-2 wiring from the binary selection.

    Selected modules receive fresh own adapters of rank ``r_l``.  With
    sharing enabled, every unselected module references its family's
    single bank adapter of rank ``r_s``; otherwise unselected modules
    stay frozen (no adapter at all).
    """
    if dam.gamma_bin is None:
        raise ConfigError("attach_sharing needs a discretized DAM")
    if enabled and r_s < 1:
        raise ConfigError(f"share rank must be >= 1 when sharing is enabled, got {r_s}")
    for fam in FAMILIES:
        shapes = {net.layers[li][fam].weight.shape for li in range(net.num_layers)}
        if len(shapes) != 1:
            raise SharingError(f"family {fam} has inconsistent shapes across layers: {shapes}")

    bank = SharedAdapterBank()
    wiring: dict[tuple[int, str], LowRankAdapter | None] = {}
    for li, fam, slot in net.slots():
        out, inp = slot.weight.shape
        fi = _FAMILY_INDEX[fam]
        if dam.gamma_bin[li, fi] == 1.0:
            wiring[(li, fam)] = init_adapter(
                out, inp, r_l, alpha, rng.derive(li * len(FAMILIES) + fi)
            )
        elif enabled:
            wiring[(li, fam)] = bank.ensure(
                fam, out, inp, r_s, alpha, rng.derive(100_000 + fi)
            )
        else:
            wiring[(li, fam)] = None
    shared_ids = {id(a) for a in bank.adapters.values()}
    return net.with_adapters(wiring, shared_ids=shared_ids), bank
