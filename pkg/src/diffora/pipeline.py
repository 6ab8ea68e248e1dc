"""End-to-end orchestration: relaxation, discretization, fine-tuning.

Stage 1 alternates one DAM update per round with T adapter epochs; stage 2
discretizes the DAM, wires fresh adapters (plus the shared bank) and
fine-tunes those alone.  Every piece of randomness derives from the single
config seed, so identical configs reproduce bit-identical artifacts.

Stream allocation from the root seed: 0x01 data (generation, subsample,
split), 0x02 base network, 0x03 stage-1 adapters, 0x05 stage-2 adapters
and bank, 0x08 dropout, 0x09 random-selection baselines.
"""

from __future__ import annotations

import json
import os
import struct
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .adapters import FAMILIES, LowRankAdapter, SharedAdapterBank
from .dam import DamState, bilevel_step, discretize, attach_sharing, init_dam
from .data import Dataset, gen_planted, gen_sphere, ingest_csv, make_split
from .errors import ConfigError, DataError, DimensionError, DivergenceError
from .models import ModularNet, _FAMILY_INDEX, init_modular_net
from .numerics import SeededRng

_NUM_FAMILIES = len(FAMILIES)


def gd_step(params: np.ndarray, grads: np.ndarray, eta: float, step: int = 0) -> np.ndarray:
    """Plain elementwise descent update p - eta * g."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise DimensionError(f"params {params.shape} and grads {grads.shape} differ")
    if not np.all(np.isfinite(grads)):
        raise DivergenceError("non-finite gradient", step)
    return params - eta * grads


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _default_model() -> dict:
    return {"layers": 4, "dim": 8, "seq": 4, "ff": 16, "out": 1}

def _default_data() -> dict:
    return {"kind": "planted", "samples": 96, "noise": 0.01, "planted_per_layer": 3,
            "teacher_scale": 0.6, "subsample": 1.0, "split_fraction": 0.5,
            "planted_families": ["V", "I", "O", "D"]}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    eta: float = 0.005
    eta_dam: float | None = None  # selection step; None means "same as eta"
    inner_epochs: int = 5      # adapter epochs per relaxation round (T)
    outer_epochs: int = 5      # relaxation rounds (V)
    finetune_epochs: int = 60  # stage-2 epochs (separate knob; T is reused upstream)
    rho: float = 0.5
    rank: int = 2              # r_l
    share_rank: int = 2        # r_s
    alpha: float = 2.0
    dropout: float = 0.0
    sharing: bool | str = True  # True / False / "auto" (median-entropy heuristic)
    warm_start: bool = False
    momentum: float = 0.0      # stage-2 only, ablation flag; 0 = plain descent
    architecture: str = "modular"
    model: dict = field(default_factory=_default_model)
    data: dict = field(default_factory=_default_data)
    theory: dict = field(default_factory=dict)

    def __post_init__(self):
        # normalize nested dicts so any construction path is canonical
        object.__setattr__(self, "model", {**_default_model(), **self.model})
        if self.data.get("kind", "planted") == "planted":
            object.__setattr__(self, "data", {**_default_data(), **self.data})

    def validate(self) -> "RunConfig":
        if self.eta <= 0.0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if self.eta_dam is not None and self.eta_dam < 0.0:
            raise ConfigError("eta_dam must be nonnegative")
        if self.outer_epochs < 1:
            raise ConfigError("outer_epochs must be >= 1")
        if self.inner_epochs < 0 or self.finetune_epochs < 1:
            raise ConfigError("inner_epochs must be >= 0 and finetune_epochs >= 1")
        if int(np.floor(self.rho * _NUM_FAMILIES)) < 1:
            raise ConfigError(f"rho = {self.rho} selects zero of {_NUM_FAMILIES} modules")
        if self.rank < 1 or self.share_rank < 1:
            raise ConfigError("adapter ranks must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not isinstance(self.sharing, bool) and self.sharing != "auto":
            raise ConfigError('sharing must be true, false, or "auto"')
        if self.architecture not in ("modular", "theory"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        return self

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_dict(raw: dict) -> "RunConfig":
        known = {f for f in RunConfig.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(**raw).validate()


def load_config(path: str) -> RunConfig:
    """Read a JSON config; DIFFORA_SEED in the environment overrides the seed."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    override = os.environ.get("DIFFORA_SEED")
    if override is not None:
        raw["seed"] = int(override)
    return RunConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------


@dataclass
class PreparedData:
    full: Dataset
    train: Dataset
    valid: Dataset
    teacher: ModularNet | None = None
    planted_mask: np.ndarray | None = None


def prepare_data(config: RunConfig, rng: SeededRng,
                 base: ModularNet | None = None) -> PreparedData:
    spec = config.data
    kind = spec.get("kind", "planted")
    m = config.model
    teacher = None
    mask = None
    if kind == "planted":
        if base is None:
            base = build_base_net(config)
        per_layer = int(spec.get("planted_per_layer", 3))
        explicit = spec.get("planted")
        if explicit is None:
            # default pool: content-path families; plain-descent relaxation
            # cannot surface score-path ground truth at desk scale (their
            # adapter gradients are smaller by orders of magnitude)
            pool_names = spec.get("planted_families", ["V", "I", "O", "D"])
            pool = [FAMILIES.index(f) for f in pool_names]
            pick = rng.derive(0)
            planted = [sorted(pool[i] for i in _choose(pick.derive(li), len(pool), per_layer))
                       for li in range(m["layers"])]
        else:
            planted = [list(p) for p in explicit]
        ds, teacher, mask = gen_planted(
            m["layers"], _NUM_FAMILIES, planted, float(spec.get("noise", 0.0)),
            int(spec["samples"]), rng.derive(1), dim=m["dim"], seq=m["seq"],
            ff_dim=m["ff"], out_dim=m["out"], rank=config.rank, alpha=config.alpha,
            teacher_scale=float(spec.get("teacher_scale", 1.0)), base=base,
        )
    elif kind == "sphere":
        ds = gen_sphere(int(spec["samples"]), int(spec["d"]),
                        float(spec.get("c_label", 1.0)), rng.derive(1))
    elif kind == "csv":
        ds = ingest_csv(spec["path"], spec.get("label", "y"),
                        normalize=bool(spec.get("normalize", False)))
    else:
        raise ConfigError(f"unknown data kind {kind!r}")

    sub = float(spec.get("subsample", 1.0))
    if not 0.0 < sub <= 1.0:
        raise ConfigError("subsample fraction must lie in (0, 1]")
    if sub < 1.0:
        keep = make_split(ds.n, sub, rng.derive(2)).train_idx
        ds = ds.subset(np.sort(keep))
    plan = make_split(ds.n, float(spec.get("split_fraction", 0.5)), rng.derive(3))
    return PreparedData(ds, ds.subset(plan.train_idx), ds.subset(plan.valid_idx),
                        teacher, mask)


def _choose(rng: SeededRng, n: int, k: int) -> list[int]:
    order = np.argsort(rng.uniform(n), kind="stable")
    return [int(i) for i in order[:k]]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    config: RunConfig
    stage1_valid_losses: list[float] = field(default_factory=list)
    stage1_train_losses: list[float] = field(default_factory=list)
    stage2_train_losses: list[float] = field(default_factory=list)
    stage2_valid_losses: list[float] = field(default_factory=list)
    gamma_bar: np.ndarray | None = None
    gamma_bin: np.ndarray | None = None
    wall_stage1: float = 0.0
    wall_stage2: float = 0.0
    final_train_loss: float = float("nan")
    final_valid_loss: float = float("nan")
    param_count: int = 0

    def loss_rows(self) -> list[tuple[int, float, float]]:
        """Global (step, train_loss, valid_loss) rows for the loss CSV."""
        rows = []
        step = 0
        t = max(self.config.inner_epochs, 1)
        for i, train in enumerate(self.stage1_train_losses):
            valid = self.stage1_valid_losses[min(i // t, len(self.stage1_valid_losses) - 1)]
            rows.append((step, train, valid))
            step += 1
        for train, valid in zip(self.stage2_train_losses, self.stage2_valid_losses):
            rows.append((step, train, valid))
            step += 1
        return rows


# ---------------------------------------------------------------------------
# Stage drivers
# ---------------------------------------------------------------------------


def resolve_sharing(config: RunConfig, dam: DamState) -> bool:
    """Sharing flag, with "auto" enabling it for indiscriminate selections
    (median row entropy above 0.9 ln N, i.e. the relaxed weights stayed
    close to uniform)."""
    if isinstance(config.sharing, bool):
        return config.sharing
    from .dam import row_entropy

    entropies = row_entropy(dam.gamma_bar)
    return bool(np.median(entropies) > 0.9 * np.log(dam.shape[1]))


def build_base_net(config: RunConfig) -> ModularNet:
    m = config.model
    rng = SeededRng(config.seed).derive(0x02)
    return init_modular_net(m["layers"], m["dim"], m["seq"], m["ff"], m["out"], rng)


def run_stage1(config: RunConfig, data: PreparedData | None = None,
               base: ModularNet | None = None) -> tuple[DamState, ModularNet, RunReport]:
    """Continuous relaxation: V rounds of (DAM update, T adapter epochs)."""
    config.validate()
    if config.architecture != "modular":
        raise ConfigError("stage drivers run the modular architecture; "
                          "use verify-theory for the theory network")
    root = SeededRng(config.seed)
    start = time.perf_counter()
    if base is None:
        base = build_base_net(config)
    if data is None:
        data = prepare_data(config, root.derive(0x01), base=base)
    net = base.with_own_adapters(config.rank, config.alpha, root.derive(0x03),
                                 dropout_p=config.dropout)
    dam = init_dam(net.num_layers, _NUM_FAMILIES, config.rho)
    drop_rng = root.derive(0x08) if config.dropout > 0.0 else None
    report = RunReport(config=config)
    train = (data.train.x, data.train.y)
    valid = (data.valid.x, data.valid.y)
    for v in range(config.outer_epochs):
        dam, net, info = bilevel_step(
            dam, net, train, valid, config.eta, inner_steps=config.inner_epochs,
            drop_rng=drop_rng, step_offset=v * (config.inner_epochs + 1),
            eta_dam=config.eta_dam,
        )
        report.stage1_valid_losses.append(info["valid_loss"])
        report.stage1_train_losses.extend(info["train_losses"])
    report.gamma_bar = dam.gamma_bar
    report.wall_stage1 = time.perf_counter() - start
    return dam, net, report


def run_stage2(config: RunConfig, dam: DamState, data: PreparedData | None = None,
               base: ModularNet | None = None, warm_net: ModularNet | None = None,
               report: RunReport | None = None) -> tuple[ModularNet, SharedAdapterBank, RunReport]:
    """Discretize, wire adapters, and fine-tune only those parameters."""
    config.validate()
    root = SeededRng(config.seed)
    start = time.perf_counter()
    if base is None:
        base = build_base_net(config)
    if data is None:
        data = prepare_data(config, root.derive(0x01), base=base)
    if dam.gamma_bin is None:
        dam = discretize(dam)
    net, bank = attach_sharing(dam, base, config.share_rank,
                               resolve_sharing(config, dam),
                               config.rank, config.alpha, root.derive(0x05))
    net.dropout_p = config.dropout
    if config.warm_start and warm_net is not None:
        for li, fam, slot in net.slots():
            src = warm_net.layers[li][fam].adapter
            if slot.adapter is not None and not slot.shared and src is not None:
                slot.adapter.a = src.a.copy()
                slot.adapter.b = src.b.copy()
    report = report or RunReport(config=config)
    report.gamma_bar = dam.gamma_bar
    report.gamma_bin = dam.gamma_bin
    report.param_count = net.trainable_param_count()

    drop_rng = root.derive(0x08).derive(1) if config.dropout > 0.0 else None
    xt, yt = data.train.x, data.train.y
    xv, yv = data.valid.x, data.valid.y
    if xt.shape[1] == 0:
        raise DataError("stage 2 needs a non-empty training split")
    velocity: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for epoch in range(config.finetune_epochs):
        loss, grads = net.loss_and_grads(xt, yt, gates=None, drop_rng=drop_rng)
        if not np.isfinite(loss):
            raise DivergenceError("stage-2 loss is not finite", epoch,
                                  tuple(report.stage2_train_losses[-3:]))
        for key, (adapter, da, db) in grads.by_adapter.items():
            if config.momentum > 0.0:
                va, vb = velocity.get(key, (np.zeros_like(da), np.zeros_like(db)))
                va = config.momentum * va + da
                vb = config.momentum * vb + db
                velocity[key] = (va, vb)
                da, db = va, vb
            adapter.a = gd_step(adapter.a, da, config.eta, step=epoch)
            adapter.b = gd_step(adapter.b, db, config.eta, step=epoch)
        report.stage2_train_losses.append(loss)
        report.stage2_valid_losses.append(net.loss(xv, yv, gates=None))
    report.final_train_loss = net.loss(xt, yt, gates=None)
    report.final_valid_loss = net.loss(xv, yv, gates=None)
    report.wall_stage2 = time.perf_counter() - start
    return net, bank, report


def run_all(config: RunConfig) -> tuple[DamState, ModularNet, SharedAdapterBank, RunReport]:
    root = SeededRng(config.seed)
    base = build_base_net(config)
    data = prepare_data(config, root.derive(0x01), base=base)
    dam, warm_net, report = run_stage1(config, data=data, base=base)
    dam = discretize(dam)
    net, bank, report = run_stage2(config, dam, data=data, base=base,
                                   warm_net=warm_net, report=report)
    return dam, net, bank, report


# ---------------------------------------------------------------------------
# Checkpoint file ("DFRA", version 1, length-prefixed sections)
# ---------------------------------------------------------------------------

_MAGIC = b"DFRA"
_VERSION = 1


def _pack_matrix(m: np.ndarray) -> bytes:
    body = np.ascontiguousarray(m, dtype="<f8").tobytes()
    return struct.pack("<II", m.shape[0], m.shape[1]) + body


def _unpack_matrix(buf: bytes, off: int) -> tuple[np.ndarray, int]:
    rows, cols = struct.unpack_from("<II", buf, off)
    off += 8
    n = rows * cols * 8
    data = np.frombuffer(buf[off : off + n], dtype="<f8").reshape(rows, cols)
    return data.astype(np.float64), off + n


def _pack_adapter(kind: int, layer: int, fam_index: int, ad: LowRankAdapter) -> bytes:
    head = struct.pack("<BHBIdd", kind, layer, fam_index, ad.rank, ad.alpha, ad.dropout_p)
    return head + _pack_matrix(ad.a) + _pack_matrix(ad.b)


@dataclass
class Checkpoint:
    config: RunConfig
    logits: np.ndarray
    gamma_bin: np.ndarray | None
    own: dict[tuple[int, str], LowRankAdapter]
    bank: dict[str, LowRankAdapter]


def save_checkpoint(path: str, config: RunConfig, dam: DamState,
                    net: ModularNet | None = None,
                    bank: SharedAdapterBank | None = None) -> None:
    sections: list[tuple[str, bytes]] = [
        ("config", config.canonical_json().encode("utf-8")),
        ("logits", _pack_matrix(dam.logits)),
    ]
    if dam.gamma_bin is not None:
        sections.append(("gamma_bin", _pack_matrix(dam.gamma_bin)))
    if net is not None:
        shared_ids = {id(a) for a in bank.adapters.values()} if bank is not None else set()
        records = []
        for li, fam, slot in net.slots():
            if slot.adapter is not None and id(slot.adapter) not in shared_ids:
                records.append(_pack_adapter(0, li, _FAMILY_INDEX[fam], slot.adapter))
        if bank is not None:
            for fam in FAMILIES:
                if fam in bank.adapters:
                    records.append(_pack_adapter(1, 0xFFFF, _FAMILY_INDEX[fam],
                                                 bank.adapters[fam]))
        payload = struct.pack("<I", len(records)) + b"".join(records)
        sections.append(("adapters", payload))

    blob = _MAGIC + struct.pack("<H", _VERSION)
    for name, payload in sections:
        raw = name.encode("ascii")
        blob += struct.pack("<B", len(raw)) + raw + struct.pack("<Q", len(payload)) + payload
    write_bytes_atomic(path, blob)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ConfigError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != _VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    off = 6
    sections: dict[str, bytes] = {}
    while off < len(blob):
        (name_len,) = struct.unpack_from("<B", blob, off)
        off += 1
        name = blob[off : off + name_len].decode("ascii")
        off += name_len
        (size,) = struct.unpack_from("<Q", blob, off)
        off += 8
        sections[name] = blob[off : off + size]
        off += size
    if "config" not in sections or "logits" not in sections:
        raise ConfigError(f"{path} misses mandatory checkpoint sections")
    config = RunConfig.from_dict(json.loads(sections["config"].decode("utf-8")))
    logits, _ = _unpack_matrix(sections["logits"], 0)
    gamma_bin = None
    if "gamma_bin" in sections:
        gamma_bin, _ = _unpack_matrix(sections["gamma_bin"], 0)
    own: dict[tuple[int, str], LowRankAdapter] = {}
    bank: dict[str, LowRankAdapter] = {}
    if "adapters" in sections:
        buf = sections["adapters"]
        (count,) = struct.unpack_from("<I", buf, 0)
        off = 4
        for _ in range(count):
            kind, layer, fam_index, rank, alpha, dropout = struct.unpack_from("<BHBIdd", buf, off)
            off += struct.calcsize("<BHBIdd")
            a, off = _unpack_matrix(buf, off)
            b, off = _unpack_matrix(buf, off)
            adapter = LowRankAdapter(a, b, rank, alpha, dropout)
            if kind == 0:
                own[(layer, FAMILIES[fam_index])] = adapter
            else:
                bank[FAMILIES[fam_index]] = adapter
    return Checkpoint(config, logits, gamma_bin, own, bank)


# ---------------------------------------------------------------------------
# Text artifacts
# ---------------------------------------------------------------------------


def format_float(v: float) -> str:
    # repr gives the shortest digits that round-trip exactly
    return repr(float(v))


def render_report_tree(tree: dict, indent: int = 0) -> str:
    """Nested key/value structured text, two-space indentation."""
    lines = []
    pad = "  " * indent
    for key, value in tree.items():
        if isinstance(value, dict):
            lines.append(f"{pad}{key}:")
            lines.append(render_report_tree(value, indent + 1))
        elif isinstance(value, float):
            lines.append(f"{pad}{key}: {format_float(value)}")
        elif isinstance(value, (list, tuple)):
            rendered = ", ".join(
                format_float(v) if isinstance(v, float) else str(v) for v in value
            )
            lines.append(f"{pad}{key}: [{rendered}]")
        else:
            lines.append(f"{pad}{key}: {value}")
    return "\n".join(lines)


def write_report(path: str, tree: dict) -> None:
    write_text_atomic(path, render_report_tree(tree) + "\n")


def write_loss_csv(path: str, rows: list[tuple[int, float, float]]) -> None:
    lines = ["step,train_loss,valid_loss"]
    for step, train, valid in rows:
        lines.append(f"{step},{format_float(train)},{format_float(valid)}")
    write_text_atomic(path, "\n".join(lines) + "\n")


def write_dam_csv(path: str, matrix: np.ndarray) -> None:
    """L x N matrix with the module-family header (the heatmap dump format)."""
    lines = [",".join(FAMILIES)]
    for row in np.asarray(matrix, dtype=np.float64):
        lines.append(",".join(format_float(v) for v in row))
    write_text_atomic(path, "\n".join(lines) + "\n")


def write_text_atomic(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_bytes_atomic(path: str, blob: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
