"""The two toy architectures.

``TheoryNet`` is a single-hidden-layer ReLU network whose trainable
increment is gated elementwise by a binary matrix; it exists to run the
convergence and Gram-matrix experiments at desk scale.

``ModularNet`` is a micro transformer encoder: L layers, one attention
head, six linear module families per layer (Q, K, V, I, O, D), frozen
base weights, and an optional low-rank adapter per module whose
contribution is scaled by a gate.  Shapes are deliberately tiny (model
dim 8-32, sequence length 2-8) so every experiment runs in seconds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import FAMILIES, LowRankAdapter, init_adapter
from .errors import DimensionError, NormalizationError
from .numerics import SeededRng, gaussian_matrix, sign_vector

# ---------------------------------------------------------------------------
# TheoryNet
# ---------------------------------------------------------------------------


@dataclass
class TheoryNet:
    w0: np.ndarray  # (d, m) frozen; column r is the pretrained weight of unit r
    w: np.ndarray  # (d, m) trainable increment
    a: np.ndarray  # (m, 1) fixed +-1 output weights, never updated
    gamma: np.ndarray  # (d, m) binary elementwise gates

    @property
    def m(self) -> int:
        return self.w0.shape[1]

    @property
    def d(self) -> int:
        return self.w0.shape[0]

    def effective_weights(self) -> np.ndarray:
        return self.w0 + self.gamma * self.w


def init_theory_net(d: int, m: int, rng: SeededRng, gamma: np.ndarray | None = None) -> TheoryNet:
    """w0 and the increment start as independent N(0, I) draws; a is +-1."""
    w0 = gaussian_matrix(d, m, rng.derive(0))
    w = gaussian_matrix(d, m, rng.derive(1))
    a = sign_vector(m, rng.derive(2))
    if gamma is None:
        gamma = np.ones((d, m))
    if gamma.shape != (d, m):
        raise DimensionError(f"gamma must be {d}x{m}, got {gamma.shape}")
    return TheoryNet(w0, w, a, gamma.astype(np.float64))


def _check_unit_columns(x: np.ndarray) -> None:
    norms = np.sqrt(np.sum(x * x, axis=0))
    worst = float(np.max(np.abs(norms - 1.0))) if norms.size else 0.0
    if worst > 1e-8:
        raise NormalizationError(f"theory path needs unit columns, worst deviation {worst:.3e}")


def theory_forward(net: TheoryNet, x: np.ndarray) -> np.ndarray:
    """(n x 1) outputs (1/sqrt(m)) * sum_r a_r relu((w0_r + gamma_r o w_r)' x_i)."""
    if x.shape[0] != net.d:
        raise DimensionError(f"inputs have {x.shape[0]} rows, net expects {net.d}")
    _check_unit_columns(x)
    z = net.effective_weights().T @ x  # (m, n)
    out = (net.a.T @ np.maximum(z, 0.0)) / np.sqrt(net.m)
    return out.T  # (n, 1)


def theory_loss(net: TheoryNet, x: np.ndarray, y: np.ndarray) -> float:
    """Empirical risk sum_i 0.5 (f(x_i) - y_i)^2."""
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if y.shape[0] != x.shape[1]:
        raise DimensionError(f"{x.shape[1]} inputs but {y.shape[0]} labels")
    err = theory_forward(net, x) - y
    return float(0.5 * np.sum(err * err))


def theory_grad(net: TheoryNet, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the empirical risk in the trainable increment, (d x m).

    Coordinates whose gate is zero receive exactly zero gradient; the ReLU
    subgradient at zero is taken as zero (active set is z > 0).
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if y.shape[0] != x.shape[1]:
        raise DimensionError(f"{x.shape[1]} inputs but {y.shape[0]} labels")
    _check_unit_columns(x)
    z = net.effective_weights().T @ x  # (m, n)
    err = (net.a.T @ np.maximum(z, 0.0)).T / np.sqrt(net.m) - y  # (n, 1)
    mass = (z > 0.0) * (net.a * err.T)  # (m, n): a_r * e_i on active units
    return net.gamma * (x @ mass.T) / np.sqrt(net.m)


def train_theory(
    net: TheoryNet, x: np.ndarray, y: np.ndarray, eta: float, steps: int
) -> list[float]:
    """Plain gradient descent on the increment; returns ||f - y||^2 per step.

    The residual list has steps + 1 entries (before the first update and
    after every update).
    """
    from .errors import DivergenceError

    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    residuals = []
    for step in range(steps + 1):
        err = theory_forward(net, x) - y
        res = float(np.sum(err * err))
        if not np.isfinite(res):
            raise DivergenceError("theory training diverged", step, tuple(residuals[-3:]))
        residuals.append(res)
        if step == steps:
            break
        net.w = net.w - eta * theory_grad(net, x, y)
    return residuals


# ---------------------------------------------------------------------------
# ModularNet
# ---------------------------------------------------------------------------

_FAMILY_INDEX = {f: i for i, f in enumerate(FAMILIES)}


@dataclass
class ModuleSlot:
    family: str
    weight: np.ndarray  # (out, in), frozen after construction
    adapter: LowRankAdapter | None = None
    shared: bool = False  # adapter belongs to a shared bank


@dataclass
class ModularNet:
    layers: list[dict[str, ModuleSlot]]
    head: np.ndarray  # (out_dim, seq*dim), frozen readout over flattened positions
    dim: int
    seq: int
    ff_dim: int
    out_dim: int
    dropout_p: float = 0.0

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.seq * self.dim

    def slots(self):
        for li, layer in enumerate(self.layers):
            for fam in FAMILIES:
                yield li, fam, layer[fam]

    def family_shape(self, family: str) -> tuple[int, int]:
        return self.layers[0][family].weight.shape

    def with_adapters(self, wiring: dict[tuple[int, str], LowRankAdapter | None],
                      shared_ids: set[int] = frozenset()) -> "ModularNet":
        """New net sharing the frozen base weights but with fresh adapter wiring."""
        layers = []
        for li, layer in enumerate(self.layers):
            new_layer = {}
            for fam in FAMILIES:
                slot = layer[fam]
                adapter = wiring.get((li, fam))
                new_layer[fam] = ModuleSlot(
                    fam, slot.weight, adapter, shared=id(adapter) in shared_ids
                )
            layers.append(new_layer)
        return ModularNet(layers, self.head, self.dim, self.seq, self.ff_dim,
                          self.out_dim, self.dropout_p)

    def with_own_adapters(self, rank: int, alpha: float, rng: SeededRng,
                          dropout_p: float = 0.0) -> "ModularNet":
        """Every module gets its own fresh adapter (relaxation stage wiring)."""
        wiring = {}
        for li, fam, slot in self.slots():
            out, inp = slot.weight.shape
            sub = rng.derive(li * len(FAMILIES) + _FAMILY_INDEX[fam])
            wiring[(li, fam)] = init_adapter(out, inp, rank, alpha, sub, dropout_p)
        net = self.with_adapters(wiring)
        net.dropout_p = dropout_p
        return net

    def adapter_registry(self) -> dict[int, tuple[LowRankAdapter, list[tuple[int, str]]]]:
        """Unique adapters keyed by identity, with their referencing sites."""
        reg: dict[int, tuple[LowRankAdapter, list[tuple[int, str]]]] = {}
        for li, fam, slot in self.slots():
            if slot.adapter is None:
                continue
            key = id(slot.adapter)
            if key not in reg:
                reg[key] = (slot.adapter, [])
            reg[key][1].append((li, fam))
        return reg

    def trainable_param_count(self) -> int:
        return sum(ad.param_count() for ad, _ in self.adapter_registry().values())

    # -- forward / backward -------------------------------------------------

    def _gate_array(self, gates: np.ndarray | None) -> np.ndarray:
        if gates is None:
            return np.ones((self.num_layers, len(FAMILIES)))
        gates = np.asarray(gates, dtype=np.float64)
        if gates.shape != (self.num_layers, len(FAMILIES)):
            raise DimensionError(
                f"gates must be {self.num_layers}x{len(FAMILIES)}, got {gates.shape}"
            )
        return gates

    def _samples(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.shape[0] != self.input_dim:
            raise DimensionError(
                f"inputs have {x.shape[0]} rows, net expects seq*dim = {self.input_dim}"
            )
        return x.T.reshape(x.shape[1], self.seq, self.dim)

    def _linear(self, slot: ModuleSlot, gate: float, t: np.ndarray,
                cache: dict | None, drop_rng: SeededRng | None):
        y = t @ slot.weight.T
        if slot.adapter is not None and gate != 0.0:
            ad = slot.adapter
            branch_in = t
            mask = None
            if drop_rng is not None and self.dropout_p > 0.0:
                mask = (drop_rng.uniform(t.size).reshape(t.shape) >= self.dropout_p)
                branch_in = t * mask / (1.0 - self.dropout_p)
            u = branch_in @ ad.a.T
            v = u @ ad.b.T
            y = y + (gate * ad.scale) * v
        else:
            branch_in, mask, u, v = None, None, None, None
        if cache is not None:
            cache["t"] = t
            cache["branch_in"] = branch_in
            cache["mask"] = mask
            cache["u"] = u
            cache["v"] = v
        return y

    def _linear_backward(self, slot: ModuleSlot, gate: float, g: np.ndarray, cache: dict,
                         grads: "ModularGrads", site: tuple[int, str]):
        dt = g @ slot.weight
        if slot.adapter is not None and cache["u"] is not None:
            ad = slot.adapter
            c = ad.scale
            gb = g @ ad.b  # (n, s, rank)
            da = (gate * c) * np.einsum("nsr,nsi->ri", gb, cache["branch_in"])
            db = (gate * c) * np.einsum("nso,nsr->or", g, cache["u"])
            dgate = c * float(np.sum(g * cache["v"]))
            d_branch = (gate * c) * (gb @ ad.a)
            if cache["mask"] is not None:
                d_branch = d_branch * cache["mask"] / (1.0 - self.dropout_p)
            dt = dt + d_branch
            grads.accumulate(site, slot.adapter, da, db, dgate)
        return dt

    def _forward(self, x: np.ndarray, gates: np.ndarray | None,
                 need_cache: bool, drop_rng: SeededRng | None = None):
        g = self._gate_array(gates)
        t = self._samples(x)
        caches = [] if need_cache else None
        scale = 1.0 / np.sqrt(self.dim)
        for li, layer in enumerate(self.layers):
            cache = {f: {} for f in FAMILIES} if need_cache else None
            cc = (lambda f: cache[f]) if need_cache else (lambda f: None)
            gi = {f: float(g[li, _FAMILY_INDEX[f]]) for f in FAMILIES}
            q = self._linear(layer["Q"], gi["Q"], t, cc("Q"), drop_rng)
            k = self._linear(layer["K"], gi["K"], t, cc("K"), drop_rng)
            v = self._linear(layer["V"], gi["V"], t, cc("V"), drop_rng)
            scores = (q @ k.transpose(0, 2, 1)) * scale
            scores = scores - scores.max(axis=-1, keepdims=True)
            e = np.exp(scores)
            p = e / e.sum(axis=-1, keepdims=True)
            attn = p @ v
            o = self._linear(layer["O"], gi["O"], attn, cc("O"), drop_rng)
            x1 = t + o
            h = self._linear(layer["I"], gi["I"], x1, cc("I"), drop_rng)
            u = np.maximum(h, 0.0)
            f = self._linear(layer["D"], gi["D"], u, cc("D"), drop_rng)
            x2 = x1 + f
            if need_cache:
                cache["_"] = {"q": q, "k": k, "v": v, "p": p, "x1": x1, "h": h, "u": u}
                caches.append(cache)
            t = x2
        flat = t.reshape(t.shape[0], self.seq * self.dim)
        pred = flat @ self.head.T  # (n, out_dim)
        if need_cache:
            return pred, (g, caches, t.shape)
        return pred

    def forward(self, x: np.ndarray, gates: np.ndarray | None = None) -> np.ndarray:
        """Predictions for column-vector inputs x (seq*dim x n), shape (n x out)."""
        return self._forward(x, gates, need_cache=False)

    def loss(self, x: np.ndarray, y: np.ndarray, gates: np.ndarray | None = None) -> float:
        pred = self.forward(x, gates)
        err = pred - _column_labels(y, pred.shape)
        return float(0.5 * np.mean(np.sum(err * err, axis=1)))

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray,
                       gates: np.ndarray | None = None,
                       drop_rng: SeededRng | None = None):
        """Mean squared-error loss plus gradients for adapters and gates."""
        pred, (g, caches, _) = self._forward(x, gates, need_cache=True, drop_rng=drop_rng)
        y2 = _column_labels(y, pred.shape)
        err = pred - y2
        n = pred.shape[0]
        loss = float(0.5 * np.mean(np.sum(err * err, axis=1)))
        grads = ModularGrads(self.num_layers)
        dpred = err / n
        dt = (dpred @ self.head).reshape(n, self.seq, self.dim)
        scale = 1.0 / np.sqrt(self.dim)
        for li in range(self.num_layers - 1, -1, -1):
            layer = self.layers[li]
            cache = caches[li]
            core = cache["_"]
            gi = {f: float(g[li, _FAMILY_INDEX[f]]) for f in FAMILIES}
            # x2 = x1 + D(relu(I(x1)))
            du = self._linear_backward(layer["D"], gi["D"], dt, cache["D"], grads, (li, "D"))
            dh = du * (core["h"] > 0.0)
            dx1 = dt + self._linear_backward(layer["I"], gi["I"], dh, cache["I"], grads, (li, "I"))
            # x1 = x0 + O(attn)
            dattn = self._linear_backward(layer["O"], gi["O"], dx1, cache["O"], grads, (li, "O"))
            p, q, k, v = core["p"], core["q"], core["k"], core["v"]
            dp = dattn @ v.transpose(0, 2, 1)
            dv = p.transpose(0, 2, 1) @ dattn
            ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
            dq = (ds @ k) * scale
            dk = (ds.transpose(0, 2, 1) @ q) * scale
            dt = (
                dx1
                + self._linear_backward(layer["Q"], gi["Q"], dq, cache["Q"], grads, (li, "Q"))
                + self._linear_backward(layer["K"], gi["K"], dk, cache["K"], grads, (li, "K"))
                + self._linear_backward(layer["V"], gi["V"], dv, cache["V"], grads, (li, "V"))
            )
        return loss, grads


def _column_labels(y: np.ndarray, pred_shape: tuple[int, int]) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y.reshape(-1, 1)
    if y.shape != pred_shape:
        raise DimensionError(f"labels have shape {y.shape}, predictions {pred_shape}")
    return y


class ModularGrads:
    """Adapter and gate gradients from one backward pass.

    Adapter gradients accumulate by object identity, so a shared adapter
    referenced from several sites receives the sum over all of them.
    """

    def __init__(self, num_layers: int):
        self.gates = np.zeros((num_layers, len(FAMILIES)))
        self.by_adapter: dict[int, tuple[LowRankAdapter, np.ndarray, np.ndarray]] = {}
        self.by_site: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = {}

    def accumulate(self, site: tuple[int, str], adapter: LowRankAdapter,
                   da: np.ndarray, db: np.ndarray, dgate: float) -> None:
        li, fam = site
        self.gates[li, _FAMILY_INDEX[fam]] += dgate
        self.by_site[site] = (da, db)
        key = id(adapter)
        if key in self.by_adapter:
            _, acc_a, acc_b = self.by_adapter[key]
            acc_a += da
            acc_b += db
        else:
            self.by_adapter[key] = (adapter, da.copy(), db.copy())


# Content-path weights (V, I, O, D) carry std 0.7 / sqrt(fan_in): the
# residual stack then keeps activations O(1) at depth 4+, which is what
# keeps plain gradient descent on the adapter branch stable.  Score-path
# weights (Q, K) only enter the softmax, so they stay at full scale --
# damping them would collapse the attention pattern to a uniform,
# input-independent mix and make the score modules vacuous.
BASE_WEIGHT_DAMP = 0.7
_FAMILY_DAMP = {"Q": 1.4, "K": 1.4, "V": BASE_WEIGHT_DAMP, "I": BASE_WEIGHT_DAMP,
                "O": BASE_WEIGHT_DAMP, "D": BASE_WEIGHT_DAMP}


def init_modular_net(num_layers: int, dim: int, seq: int, ff_dim: int, out_dim: int,
                     rng: SeededRng) -> ModularNet:
    """Frozen random base network; no adapters attached yet."""
    shapes = {"Q": (dim, dim), "K": (dim, dim), "V": (dim, dim),
              "I": (ff_dim, dim), "O": (dim, dim), "D": (dim, ff_dim)}
    layers = []
    for li in range(num_layers):
        layer = {}
        for fam in FAMILIES:
            out, inp = shapes[fam]
            sub = rng.derive(li * len(FAMILIES) + _FAMILY_INDEX[fam])
            w = _FAMILY_DAMP[fam] * gaussian_matrix(out, inp, sub) / np.sqrt(inp)
            layer[fam] = ModuleSlot(fam, w)
        layers.append(layer)
    head = gaussian_matrix(out_dim, seq * dim, rng.derive(10_000)) / np.sqrt(seq * dim)
    return ModularNet(layers, head, dim, seq, ff_dim, out_dim)


def modular_forward(net: ModularNet, gates: np.ndarray | None, x: np.ndarray) -> np.ndarray:
    """Functional alias for net.forward(x, gates)."""
    return net.forward(x, gates)
