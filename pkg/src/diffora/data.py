"""Synthetic dataset generators, CSV in/out, and the train/valid split.

Theory-flavored datasets satisfy the convergence-theorem premises (unit
columns, no near-parallel pair, bounded labels).  The planted-module task
labels inputs with a teacher network whose adapters live on a known module
subset, giving ground truth for selection experiments.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .adapters import FAMILIES, init_adapter
from .errors import ConfigError, DataError, FeasibilityError, ParseError
from .models import BASE_WEIGHT_DAMP, ModularNet, init_modular_net, _FAMILY_INDEX
from .numerics import SeededRng, gaussian_matrix


@dataclass
class Dataset:
    x: np.ndarray  # (d, n): one column per sample
    y: np.ndarray  # (n, 1)
    descriptor: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.x.shape[1]

    @property
    def d(self) -> int:
        return self.x.shape[0]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.x[:, idx], self.y[idx], dict(self.descriptor))


@dataclass(frozen=True)
class SplitPlan:
    fraction: float
    train_idx: np.ndarray
    valid_idx: np.ndarray
    seed: int


def gen_sphere(n: int, d: int, c_label: float, rng: SeededRng) -> Dataset:
    """Unit-norm columns with no near-parallel pair; labels U[-c, c].

    Columns are resampled while any pairwise |cosine| reaches 1 - 1e-6;
    more than 100 * n attempts means d is too small for n distinct
    directions and raises a feasibility error.
    """
    if n < 1 or d < 2:
        raise ConfigError(f"gen_sphere needs n >= 1 and d >= 2, got n={n}, d={d}")
    cols = np.zeros((d, n))
    attempts = 0
    i = 0
    while i < n:
        attempts += 1
        if attempts > 100 * n:
            raise FeasibilityError(f"could not place {n} non-parallel unit vectors in d={d}")
        v = rng.normal(d)
        norm = float(np.sqrt(v @ v))
        if norm < 1e-12:
            continue
        v = v / norm
        if i > 0 and float(np.max(np.abs(v @ cols[:, :i]))) >= 1.0 - 1e-6:
            continue
        cols[:, i] = v
        i += 1
    labels = (2.0 * rng.uniform(n) - 1.0) * c_label
    ds = Dataset(cols, labels.reshape(n, 1),
                 {"generator": "sphere", "seed": rng.seed, "n": n, "d": d, "c_label": c_label})
    validate_dataset(ds, theory=True, c_label=c_label)
    return ds


def validate_dataset(ds: Dataset, theory: bool = False, c_label: float | None = None) -> None:
    if ds.x.shape[1] != ds.y.shape[0]:
        raise DataError(f"{ds.x.shape[1]} samples but {ds.y.shape[0]} labels")
    if not (np.all(np.isfinite(ds.x)) and np.all(np.isfinite(ds.y))):
        raise DataError("dataset contains non-finite values")
    if theory:
        norms = np.sqrt(np.sum(ds.x * ds.x, axis=0))
        if float(np.max(np.abs(norms - 1.0))) > 1e-8:
            raise DataError("theory dataset columns must be unit norm")
        gram = ds.x.T @ ds.x
        off = gram - np.diag(np.diag(gram))
        if off.size and float(np.max(np.abs(off))) >= 1.0 - 1e-6:
            raise DataError("theory dataset has a near-parallel column pair")
        if c_label is not None and float(np.max(np.abs(ds.y))) > c_label + 1e-12:
            raise DataError("labels exceed the configured bound")


def gen_planted(
    num_layers: int,
    num_modules: int,
    planted: list[list[int]],
    noise: float,
    n: int,
    rng: SeededRng,
    dim: int = 8,
    seq: int = 2,
    ff_dim: int = 16,
    out_dim: int = 1,
    rank: int = 2,
    alpha: float = 16.0,
    teacher_scale: float = 1.0,
    base: ModularNet | None = None,
) -> tuple[Dataset, ModularNet, np.ndarray]:
    """Planted-module regression task.

    ``planted[li]`` lists the module indices carrying nonzero teacher
    adapters in layer ``li`` (the same count per layer).  Labels are the
    teacher outputs plus ``noise`` * N(0, 1).  Returns the dataset, the
    teacher network, and the binary planted mask (L x N).

    Pass the frozen ``base`` the student will train on: the teacher is
    that same base plus planted adapters, so recovering the planted
    modules is the only way to reach the noise floor.
    """
    if num_modules != len(FAMILIES):
        raise ConfigError(f"planted task uses the {len(FAMILIES)} module families")
    if len(planted) != num_layers or any(len(p) == 0 for p in planted):
        raise ConfigError("planted set must list at least one module per layer")
    sizes = {len(p) for p in planted}
    if len(sizes) != 1:
        raise ConfigError("planted set must have the same size in every layer")
    mask = np.zeros((num_layers, num_modules))
    for li, mods in enumerate(planted):
        for j in mods:
            if not 0 <= j < num_modules:
                raise ConfigError(f"module index {j} out of range")
            mask[li, j] = 1.0

    if base is None:
        base = init_modular_net(num_layers, dim, seq, ff_dim, out_dim, rng.derive(0))
    if (base.num_layers, base.dim, base.seq) != (num_layers, dim, seq):
        raise ConfigError("base network shape does not match the planted-task request")

    x = gaussian_matrix(seq * dim, n, rng.derive(2))
    base_out = base.forward(x)
    # every planted module must leave a comparable fingerprint on the
    # labels; raw deltas of equal norm do not (score-path modules move the
    # output far less than value-path ones), so each adapter is rescaled
    # until its solo output effect has RMS exactly teacher_scale.  The
    # absolute target keeps training-gradient scales seed-independent.
    target_rms = teacher_scale

    adapter_rng = rng.derive(1)
    wiring = {}
    for li, fam, slot in base.slots():
        fi = _FAMILY_INDEX[fam]
        if mask[li, fi] == 1.0:
            out, inp = slot.weight.shape
            sub = adapter_rng.derive(li * len(FAMILIES) + fi)
            ad = init_adapter(out, inp, rank, alpha, sub)
            b_std = BASE_WEIGHT_DAMP * rank / (alpha * np.sqrt(inp))
            ad.b = b_std * gaussian_matrix(out, rank, sub)
            solo = base.with_adapters({(li, fam): ad})
            for _ in range(4):  # fixed point; effect is only near-linear in b
                effect = solo.forward(x) - base_out
                rms = float(np.sqrt(np.mean(effect * effect)))
                if rms < 1e-12:
                    raise DataError(f"planted module ({li}, {fam}) has no output effect")
                ad.b = ad.b * (target_rms / rms)
            wiring[(li, fam)] = ad
    teacher = base.with_adapters(wiring)

    labels = teacher.forward(x, gates=mask)
    if noise > 0.0:
        labels = labels + noise * rng.derive(3).normal(labels.size).reshape(labels.shape)
    ds = Dataset(x, labels, {
        "generator": "planted", "seed": rng.seed, "n": n, "layers": num_layers,
        "noise": noise, "planted": [sorted(p) for p in planted],
    })
    validate_dataset(ds)
    return ds, teacher, mask


def make_split(n: int, fraction: float, rng: SeededRng) -> SplitPlan:
    """Seeded shuffle, then a prefix/suffix cut at floor(fraction * n)."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must be in (0, 1), got {fraction}")
    cut = int(np.floor(fraction * n))
    if cut == 0 or cut == n:
        raise ConfigError(f"split of {n} samples at fraction {fraction} leaves an empty part")
    order = np.argsort(rng.uniform(n), kind="stable")
    return SplitPlan(float(fraction), order[:cut].copy(), order[cut:].copy(), rng.seed)


def export_csv(ds: Dataset, path: str, label_column: str = "y") -> None:
    """Feature columns f1..fd plus the label column, 17 significant digits.

    The provenance descriptor rides along as a single '#' comment line.
    """
    with open(path, "w", newline="") as fh:
        if ds.descriptor:
            items = ", ".join(f"{k}={ds.descriptor[k]}" for k in sorted(ds.descriptor))
            fh.write(f"# {items}\n")
        writer = csv.writer(fh)
        writer.writerow([f"f{i + 1}" for i in range(ds.d)] + [label_column])
        for j in range(ds.n):
            row = [f"{v:.17g}" for v in ds.x[:, j]] + [f"{ds.y[j, 0]:.17g}"]
            writer.writerow(row)


def ingest_csv(path: str, label_column: str, normalize: bool = False) -> Dataset:
    """Rectangular numeric CSV with a header row; '#' lines are comments."""
    rows: list[list[float]] = []
    header: list[str] | None = None
    label_pos = -1
    with open(path, newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if raw.startswith("#") or not raw.strip():
                continue
            cells = next(csv.reader([raw]))
            if header is None:
                header = [c.strip() for c in cells]
                if label_column not in header:
                    raise ParseError(f"label column {label_column!r} not in header", lineno)
                label_pos = header.index(label_column)
                continue
            if len(cells) != len(header):
                raise ParseError(
                    f"row has {len(cells)} cells, header has {len(header)}", lineno
                )
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                raise ParseError("non-numeric cell", lineno) from None
    if header is None or not rows:
        raise ParseError("file has no data rows", 1)
    table = np.array(rows, dtype=np.float64)
    y = table[:, label_pos].reshape(-1, 1)
    x = np.delete(table, label_pos, axis=1).T.copy()
    if normalize:
        norms = np.sqrt(np.sum(x * x, axis=0))
        if float(np.min(norms)) < 1e-12:
            raise DataError("cannot normalize a zero column")
        x = x / norms
    ds = Dataset(x, y, {"generator": "csv", "path": str(path), "label": label_column})
    validate_dataset(ds)
    return ds
