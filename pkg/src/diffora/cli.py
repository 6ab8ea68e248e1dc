"""Command-line driver.

Subcommands: gen-data, relax, discretize, finetune, run-all,
verify-theory, compare, dump-dam.  Exit codes are a stable contract:
0 success, 2 usage or configuration problem, 3 divergence, 4 I/O
failure, 5 verification-assertion failure.  Every emitted file is
written to a temporary name and renamed, so artifacts are either
complete or absent.  The environment variable DIFFORA_SEED overrides
the config seed.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import pipeline
from .adapters import FAMILIES
from .dam import DamState, discretize, init_dam, row_entropy
from .data import export_csv
from .errors import (
    ConfigError,
    DataError,
    DifforaError,
    DimensionError,
    DivergenceError,
    DomainError,
    ParseError,
)
from .numerics import SeededRng
from .pipeline import (
    RunConfig,
    load_checkpoint,
    load_config,
    prepare_data,
    run_all,
    run_stage1,
    run_stage2,
    save_checkpoint,
    write_dam_csv,
    write_loss_csv,
    write_report,
    write_text_atomic,
)
from .theory import verify_theory
from . import plots

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4
EXIT_ASSERTION = 5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffora",
        description="Module-wise selective low-rank adaptation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, needs_config=True, needs_checkpoint=False):
        p = sub.add_parser(name, help=help_text)
        if needs_config:
            p.add_argument("--config", required=True, help="JSON config file")
        if needs_checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint file")
        p.add_argument("--out", default=".", help="output directory (default: cwd)")
        return p

    add("gen-data", "generate a dataset CSV from the config's data block")
    add("relax", "stage 1 only: continuous relaxation of the selection matrix")
    add("discretize", "binarize a relaxed checkpoint's selection matrix",
        needs_config=False, needs_checkpoint=True)
    add("finetune", "stage 2 only: fine-tune from a checkpoint",
        needs_config=False, needs_checkpoint=True)
    add("run-all", "full pipeline: relax, discretize, fine-tune")
    add("verify-theory", "run the numerical theory-verification battery")
    p = add("compare", "selection-strategy ablation on the planted task")
    p.add_argument("--strategies", default="diffora,random",
                   help="comma list from {diffora,random,all,none}")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds")
    p.add_argument("--rhos", default="", help="optional comma list of selection ratios")
    add("dump-dam", "export the selection matrices from a checkpoint",
        needs_config=False, needs_checkpoint=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gen-data": cmd_gen_data,
        "relax": cmd_relax,
        "discretize": cmd_discretize,
        "finetune": cmd_finetune,
        "run-all": cmd_run_all,
        "verify-theory": cmd_verify_theory,
        "compare": cmd_compare,
        "dump-dam": cmd_dump_dam,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, DataError, ParseError, DomainError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}; last finite losses {exc.last_losses}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except DifforaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _outdir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def cmd_gen_data(args) -> int:
    config = load_config(args.config)
    out = _outdir(args)
    data = prepare_data(config, SeededRng(config.seed).derive(0x01),
                        base=pipeline.build_base_net(config)
                        if config.data.get("kind", "planted") == "planted" else None)
    path = os.path.join(out, "dataset.csv")
    export_csv(data.full, path)
    print(f"wrote {path} ({data.full.n} samples, d={data.full.d})")
    return EXIT_OK


def cmd_relax(args) -> int:
    config = load_config(args.config)
    out = _outdir(args)
    dam, net, report = run_stage1(config)
    save_checkpoint(os.path.join(out, "checkpoint.dfra"), config, dam, net=net)
    write_dam_csv(os.path.join(out, "gamma_bar.csv"), dam.gamma_bar)
    write_loss_csv(os.path.join(out, "losses.csv"), report.loss_rows())
    plots.save_gamma_heatmap(dam.gamma_bar, os.path.join(out, "gamma_bar.png"),
                             title="relaxed module weights")
    if report.loss_rows():
        plots.save_loss_curves(report.loss_rows(), os.path.join(out, "losses.png"),
                               title="stage-1 curves")
    print(f"stage 1 done in {report.wall_stage1:.2f}s; "
          f"entropy per layer: {[round(h, 3) for h in row_entropy(dam.gamma_bar)]}")
    return EXIT_OK


def cmd_discretize(args) -> int:
    out = _outdir(args)
    ckpt = load_checkpoint(args.checkpoint)
    dam = discretize(DamState(ckpt.logits, ckpt.config.rho))
    write_dam_csv(os.path.join(out, "gamma_bin.csv"), dam.gamma_bin)
    plots.save_gamma_heatmap(dam.gamma_bin, os.path.join(out, "gamma_bin.png"),
                             title="selected modules")
    save_checkpoint(os.path.join(out, "checkpoint.dfra"), ckpt.config, dam)
    counts = dam.gamma_bin.sum(axis=1).astype(int).tolist()
    print(f"selected per layer: {counts} (k = {dam.k})")
    return EXIT_OK


def cmd_finetune(args) -> int:
    out = _outdir(args)
    ckpt = load_checkpoint(args.checkpoint)
    config = ckpt.config
    dam = DamState(ckpt.logits, config.rho, ckpt.gamma_bin)
    if dam.gamma_bin is None:
        dam = discretize(dam)
    warm_net = None
    if config.warm_start and ckpt.own:
        base = pipeline.build_base_net(config)
        warm_net = base.with_adapters(dict(ckpt.own))
    net, bank, report = run_stage2(config, dam, warm_net=warm_net)
    _write_run_artifacts(out, config, dam, net, bank, report)
    print(f"stage 2 done in {report.wall_stage2:.2f}s; "
          f"final train loss {report.final_train_loss:.6g}")
    return EXIT_OK


def _write_run_artifacts(out, config, dam, net, bank, report) -> None:
    save_checkpoint(os.path.join(out, "checkpoint.dfra"), config, dam, net=net, bank=bank)
    write_dam_csv(os.path.join(out, "gamma_bar.csv"), dam.gamma_bar)
    write_dam_csv(os.path.join(out, "gamma_bin.csv"), dam.gamma_bin)
    write_loss_csv(os.path.join(out, "losses.csv"), report.loss_rows())
    tree = {
        "run": {
            "seed": config.seed,
            "architecture": config.architecture,
            "eta": config.eta,
            "outer_epochs": config.outer_epochs,
            "inner_epochs": config.inner_epochs,
            "finetune_epochs": config.finetune_epochs,
            "rho": config.rho,
            "k": dam.k,
            "rank": config.rank,
            "share_rank": config.share_rank,
            "sharing": config.sharing,
        },
        "selection": {
            "selected_per_layer": [int(s) for s in dam.gamma_bin.sum(axis=1)],
            "row_entropy": row_entropy(dam.gamma_bar),
        },
        "losses": {
            "stage1_valid": report.stage1_valid_losses,
            "final_train": report.final_train_loss,
            "final_valid": report.final_valid_loss,
        },
        "parameters": {"trainable": report.param_count},
    }
    write_report(os.path.join(out, "report.txt"), tree)
    rows = report.loss_rows()
    if rows:
        plots.save_loss_curves(rows, os.path.join(out, "losses.png"))
    plots.save_gamma_heatmap(dam.gamma_bar, os.path.join(out, "gamma_bar.png"),
                             title="relaxed module weights")
    plots.save_gamma_heatmap(dam.gamma_bin, os.path.join(out, "gamma_bin.png"),
                             title="selected modules")


def cmd_run_all(args) -> int:
    config = load_config(args.config)
    out = _outdir(args)
    dam, net, bank, report = run_all(config)
    _write_run_artifacts(out, config, dam, net, bank, report)
    print(f"stage 1 {report.wall_stage1:.2f}s, stage 2 {report.wall_stage2:.2f}s; "
          f"final train loss {report.final_train_loss:.6g}; "
          f"trainable params {report.param_count}")
    return EXIT_OK


def cmd_verify_theory(args) -> int:
    config = load_config(args.config)
    out = _outdir(args)
    result = verify_theory(config.theory, config.seed)
    write_report(os.path.join(out, "theory_report.txt"), result.report)
    eta = result.report["training"]["eta"]
    lines = ["step,residual_gated,residual_base"]
    for i in range(max(len(result.residuals_gated), len(result.residuals_base))):
        rg = result.residuals_gated[i] if i < len(result.residuals_gated) else ""
        rb = result.residuals_base[i] if i < len(result.residuals_base) else ""
        lines.append(f"{i},{rg},{rb}")
    write_text_atomic(os.path.join(out, "residuals.csv"), "\n".join(lines) + "\n")
    plots.save_residual_curves(
        {"gated": result.residuals_gated, "ungated": result.residuals_base},
        eta, os.path.join(out, "residuals.png"),
    )
    for check in result.checks:
        state = "PASS" if check.passed else ("SKIP" if check.passed is None else "FAIL")
        print(f"[{state}] {check.name} {check.detail}")
    if result.all_pass:
        return EXIT_OK
    print(f"failed checks: {', '.join(result.failed_names())}", file=sys.stderr)
    return EXIT_ASSERTION


# ---------------------------------------------------------------------------
# Strategy comparison
# ---------------------------------------------------------------------------


def _random_selection(num_layers: int, k: int, rng: SeededRng) -> np.ndarray:
    gamma = np.zeros((num_layers, len(FAMILIES)))
    for li in range(num_layers):
        order = np.argsort(rng.derive(li).uniform(len(FAMILIES)), kind="stable")
        gamma[li, order[:k]] = 1.0
    return gamma


def _recovery_rate(selected: np.ndarray, planted_mask: np.ndarray | None) -> float | None:
    if planted_mask is None:
        return None
    per_layer = []
    for li in range(selected.shape[0]):
        planted = planted_mask[li] > 0
        if planted.sum() == 0:
            continue
        per_layer.append(float((selected[li][planted] > 0).sum() / planted.sum()))
    return float(np.mean(per_layer)) if per_layer else None


def run_comparison(config: RunConfig, strategies: list[str], num_seeds: int,
                   rhos: list[float] | None = None) -> list[dict]:
    """Final-loss/recovery table over seeds at matched parameter budgets."""
    known = {"diffora", "random", "all", "none"}
    bad = set(strategies) - known
    if bad:
        raise ConfigError(f"unknown strategies {sorted(bad)}; choose from {sorted(known)}")
    if num_seeds < 1:
        raise ConfigError("need at least one seed")
    rows = []
    for rho in rhos or [config.rho]:
        per_strategy: dict[str, dict] = {}
        for strategy in strategies:
            losses, recoveries, params = [], [], []
            for s in range(num_seeds):
                seed = config.seed + 1000 * s
                cfg = replace(config, seed=seed, rho=rho).validate()
                root = SeededRng(seed)
                base = pipeline.build_base_net(cfg)
                data = prepare_data(cfg, root.derive(0x01), base=base)
                num_layers = cfg.model["layers"]
                if strategy == "diffora":
                    dam, warm, report = run_stage1(cfg, data=data, base=base)
                    dam = discretize(dam)
                    net, bank, report = run_stage2(cfg, dam, data=data, base=base,
                                                   warm_net=warm, report=report)
                    selected = dam.gamma_bin
                elif strategy == "random":
                    dam = init_dam(num_layers, len(FAMILIES), rho)
                    gamma = _random_selection(num_layers, dam.k, root.derive(0x09))
                    dam = DamState(dam.logits, rho, gamma)
                    net, bank, report = run_stage2(cfg, dam, data=data, base=base)
                    selected = gamma
                elif strategy == "all":
                    dam = DamState(np.zeros((num_layers, len(FAMILIES))), 1.0,
                                   np.ones((num_layers, len(FAMILIES))))
                    net, bank, report = run_stage2(cfg, dam, data=data, base=base)
                    selected = dam.gamma_bin
                else:  # none: frozen base, no adapters at all
                    cfg_none = replace(cfg, sharing=False)
                    dam = DamState(np.zeros((num_layers, len(FAMILIES))), cfg.rho,
                                   np.zeros((num_layers, len(FAMILIES))))
                    net, bank, report = run_stage2(cfg_none, dam, data=data, base=base)
                    selected = dam.gamma_bin
                losses.append(report.final_train_loss)
                params.append(report.param_count)
                rec = _recovery_rate(selected, data.planted_mask)
                if rec is not None:
                    recoveries.append(rec)
            per_strategy[strategy] = {
                "strategy": strategy,
                "rho": rho,
                "k": int(selected[0].sum()),
                "mean_final_loss": float(np.mean(losses)),
                "sd_final_loss": float(np.std(losses)),
                "recovery_rate": float(np.mean(recoveries)) if recoveries else float("nan"),
                "param_count": int(params[0]),
            }
        if "diffora" in per_strategy and "random" in per_strategy:
            a = per_strategy["diffora"]["param_count"]
            b = per_strategy["random"]["param_count"]
            # selected-module costs vary with family shape (the FFN modules
            # are wider), so same-k budgets match only approximately
            if abs(a - b) > 0.1 * max(a, b):
                raise ConfigError(f"parameter budgets differ: diffora {a} vs random {b}")
        rows.extend(per_strategy[s] for s in strategies)
    return rows


def cmd_compare(args) -> int:
    config = load_config(args.config)
    out = _outdir(args)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    rhos = [float(r) for r in args.rhos.split(",") if r.strip()] or None
    rows = run_comparison(config, strategies, args.seeds, rhos)
    header = ["strategy", "rho", "k", "mean_final_loss", "sd_final_loss",
              "recovery_rate", "param_count"]
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(
            pipeline.format_float(r[h]) if isinstance(r[h], float) else str(r[h])
            for h in header
        ))
    write_text_atomic(os.path.join(out, "compare.csv"), "\n".join(lines) + "\n")
    plots.save_compare_chart(rows, os.path.join(out, "compare.png"))
    widths = [max(len(h), 14) for h in header]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for r in rows:
        cells = [f"{r[h]:.6g}" if isinstance(r[h], float) else str(r[h]) for h in header]
        print("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    return EXIT_OK


def cmd_dump_dam(args) -> int:
    out = _outdir(args)
    ckpt = load_checkpoint(args.checkpoint)
    dam = DamState(ckpt.logits, ckpt.config.rho, ckpt.gamma_bin)
    write_dam_csv(os.path.join(out, "gamma_bar.csv"), dam.gamma_bar)
    plots.save_gamma_heatmap(dam.gamma_bar, os.path.join(out, "gamma_bar.png"),
                             title="relaxed module weights")
    if dam.gamma_bin is not None:
        write_dam_csv(os.path.join(out, "gamma_bin.csv"), dam.gamma_bin)
        plots.save_gamma_heatmap(dam.gamma_bin, os.path.join(out, "gamma_bin.png"),
                                 title="selected modules")
    entropies = row_entropy(dam.gamma_bar)
    for li, h in enumerate(entropies):
        print(f"layer {li + 1}: entropy {h:.4f}")
    print(f"median entropy {np.median(entropies):.4f} "
          f"(uniform would be {np.log(len(FAMILIES)):.4f})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
