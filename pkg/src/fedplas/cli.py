"""Command-line front end.

Subcommands:
  run          one experiment from a config file
  sweep-ratio  the same experiment across malicious-client ratios
  sweep-cut    partial-aggregation experiments across cut layers
  surgery      centralized clean/backdoor training plus the 2x2
               feature-extractor x classifier recombination table

All commands take --config PATH --out DIR and an optional --seed override.
Emitted CSV files are UTF-8 with LF line endings and "." decimals, and are
byte-for-byte reproducible from (config, seed, code version); wall-clock
timing is written only when --timing is given, since measured time is the
one thing a rerun cannot reproduce. Set FEDPLAS_THREADS to train sampled
clients in parallel (results do not depend on it).
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import sys
import time
import zipfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, metrics, nn
from .configio import ConfigError, config_to_dict, parse_config
from .federation import Experiment, ExperimentConfig, RoundLog

ROUNDS_HEADER = "round,rule,malicious_fraction,ma,ba,ba_atk,loss,wall_ms"


def _fmt(value, digits: int = 6) -> str:
    if value is None:
        return ""
    if isinstance(value, float) and not np.isfinite(value):
        return ""
    return f"{value:.{digits}f}"


def write_rounds_csv(path, logs: list[RoundLog], timing: bool) -> None:
    rows = [ROUNDS_HEADER]
    for entry in logs:
        wall = _fmt(entry.wall_ms, 3) if timing else "0"
        rows.append(
            ",".join(
                [
                    str(entry.round_t),
                    entry.rule,
                    _fmt(entry.malicious_fraction),
                    _fmt(entry.ma),
                    _fmt(entry.ba),
                    _fmt(entry.ba_atk),
                    _fmt(entry.loss),
                    wall,
                ]
            )
        )
    Path(path).write_bytes(("\n".join(rows) + "\n").encode("utf-8"))


def write_summary(path, cfg: ExperimentConfig, report) -> None:
    payload = {
        "arch": cfg.arch_id,
        "rule": cfg.defense.rule,
        "rounds": cfg.rounds,
        "malicious_fraction": cfg.malicious_fraction,
        "seed": cfg.seed,
        "final_ma": report.ma,
        "final_ba": report.ba,
        "final_ba_atk": report.ba_atk,
        "final_loss": report.loss,
    }
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def save_model_archive(path, arrays: dict[str, np.ndarray]) -> None:
    """npz-compatible archive with fixed zip timestamps, so identical arrays
    produce identical bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, arrays[name], allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_model_archive(path) -> dict[str, np.ndarray]:
    with np.load(path) as bundle:
        return {name: bundle[name] for name in bundle.files}


def collect_model_arrays(exp: Experiment) -> dict[str, np.ndarray]:
    arrays = {}
    g = exp.global_model
    for idx in range(g.num_layers):
        if g.layers[idx].params is None:
            continue
        arrays[f"global.layer{idx:02d}"] = g.array(idx)
    if exp.cfg.is_flplas:
        for state in exp.clients:
            for layer in state.classifier:
                arrays[f"client{state.client_id:04d}.layer{layer.index:02d}"] = (
                    layer.params[0]
                )
    return arrays


def write_manifest(path, cfg: ExperimentConfig, outputs, started, finished=None) -> None:
    manifest = {
        "code_version": __version__,
        "seed": cfg.seed,
        "started_at": started,
        "finished_at": finished,
        "config": config_to_dict(cfg),
        "outputs": sorted(outputs),
    }
    Path(path).write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _load_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
        cfg = dataclasses.replace(
            cfg, training=dataclasses.replace(cfg.training, seed=args.seed)
        )
    return cfg


def _run_one(cfg: ExperimentConfig, out: Path, timing: bool) -> dict:
    """Run an experiment and write the standard output set into ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    outputs = ["rounds.csv", "summary.structured", "models.npz"]
    started = _now()
    write_manifest(out / "manifest.json", cfg, outputs, started)
    exp = Experiment(cfg)
    try:
        exp.run()
    finally:
        write_rounds_csv(out / "rounds.csv", exp.logs, timing)
    report = exp.final_report()
    write_summary(out / "summary.structured", cfg, report)
    save_model_archive(out / "models.npz", collect_model_arrays(exp))
    write_manifest(out / "manifest.json", cfg, outputs, started, finished=_now())
    return {
        "ma": report.ma,
        "ba": report.ba,
        "ba_atk": report.ba_atk,
        "loss": report.loss,
    }


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    final = _run_one(cfg, out, args.timing)
    print(
        f"run complete: rule={cfg.defense.rule} rounds={cfg.rounds} "
        f"ma={_fmt(final['ma'], 4)} ba={_fmt(final['ba'], 4) or 'n/a'}"
    )
    return 0


def _parse_float_list(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


def _parse_int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def cmd_sweep_ratio(args) -> int:
    cfg = _load_config(args)
    ratios = _parse_float_list(args.ratios)
    if any(not 0.0 <= r <= 1.0 for r in ratios):
        print("sweep-ratio: ratios must lie in [0, 1]", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["ratio,rule,ma,ba"]
    failed = []
    for i, ratio in enumerate(ratios):
        cell_cfg = dataclasses.replace(
            cfg, malicious_fraction=ratio, seed=cfg.seed + 1000 * i
        )
        cell_dir = out / f"cell-ratio-{ratio:.2f}"
        try:
            final = _run_one(cell_cfg, cell_dir, args.timing)
            rows.append(
                f"{ratio:.6f},{cfg.defense.rule},{_fmt(final['ma'])},{_fmt(final['ba'])}"
            )
        except Exception as exc:  # cell failure is recorded, sweep continues
            failed.append(f"ratio={ratio}: {exc}")
            rows.append(f"{ratio:.6f},{cfg.defense.rule},,")
    (out / "sweep.csv").write_bytes(("\n".join(rows) + "\n").encode("utf-8"))
    if failed:
        (out / "failed_cells.txt").write_text("\n".join(failed) + "\n", encoding="utf-8")
        print(f"sweep-ratio: {len(failed)} cell(s) failed", file=sys.stderr)
        return 1
    print(f"sweep-ratio complete: {len(ratios)} cells -> {out / 'sweep.csv'}")
    return 0


def cmd_sweep_cut(args) -> int:
    cfg = _load_config(args)
    if cfg.defense.rule != "flplas":
        print("sweep-cut: [defense] rule must be flplas", file=sys.stderr)
        return 2
    cuts = _parse_int_list(args.cuts)
    probe = nn.build_arch(cfg.arch_id, cfg.dataset.num_classes, (1, 16, 16), seed=0)
    num_layers = probe.num_layers
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["cut_layer,ma,ba,ba_atk,ba_atk_minus_ba"]
    results = []
    for cut in cuts:
        if not 0 < cut <= num_layers:
            print(
                f"sweep-cut: cut {cut} outside [1, {num_layers}] for "
                f"{cfg.arch_id}; skipped",
                file=sys.stderr,
            )
            continue
        # cells share the seed so the partition and client roles are held
        # fixed and only the cut varies
        cell_cfg = dataclasses.replace(
            cfg, defense=dataclasses.replace(cfg.defense, cut_layer=cut)
        )
        final = _run_one(cell_cfg, out / f"cell-cut-{cut:02d}", args.timing)
        diff = (
            final["ba_atk"] - final["ba"]
            if final["ba_atk"] is not None and final["ba"] is not None
            else None
        )
        rows.append(
            f"{cut},{_fmt(final['ma'])},{_fmt(final['ba'])},"
            f"{_fmt(final['ba_atk'])},{_fmt(diff)}"
        )
        results.append((cut, final["ma"], final["ba"]))
    (out / "sweep.csv").write_bytes(("\n".join(rows) + "\n").encode("utf-8"))
    results.sort()
    mas = [r[1] for r in results]
    bas = [r[2] for r in results if r[2] is not None]
    ma_monotone = all(a <= b + 1e-12 for a, b in zip(mas, mas[1:]))
    ba_monotone = all(a <= b + 1e-12 for a, b in zip(bas, bas[1:]))
    (out / "monotonicity.json").write_text(
        json.dumps(
            {"ma_non_decreasing": ma_monotone, "ba_non_decreasing": ba_monotone},
            sort_keys=True,
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    if not (ma_monotone and ba_monotone):
        print(
            "sweep-cut: monotone trade-off violated "
            f"(ma of cuts: {mas}, ba: {bas})",
            file=sys.stderr,
        )
    print(f"sweep-cut complete: {len(results)} cells -> {out / 'sweep.csv'}")
    return 0


def cmd_surgery(args) -> int:
    cfg = _load_config(args)
    if cfg.attack.kind == "none":
        print("surgery: [attack] kind must be an active attack", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    exp = Experiment(dataclasses.replace(cfg, rounds=0))
    branch_training = None
    if args.branch_lr is not None:
        branch_training = dataclasses.replace(cfg.training, learning_rate=args.branch_lr)
    table = metrics.surgery_experiment(
        exp.train,
        exp.test,
        cfg.attack,
        cfg.arch_id,
        cfg.training,
        cut_layer=cfg.resolved_cut(),
        epochs=3,
        warmup_epochs=args.warmup_epochs,
        branch_training=branch_training,
        seed=cfg.seed,
    )
    rows = ["fe,classifier,ma,ba"]
    for fe in ("clean", "backdoor"):
        for cl in ("clean", "backdoor"):
            rep = table[(fe, cl)]
            rows.append(f"{fe},{cl},{_fmt(rep.ma)},{_fmt(rep.ba)}")
    (out / "surgery.csv").write_bytes(("\n".join(rows) + "\n").encode("utf-8"))
    text = format_surgery_table(table)
    (out / "surgery.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def format_surgery_table(table) -> str:
    lines = [
        "ma/ba by feature-extractor (rows: classifier)",
        f"{'':>22}{'clean FE':>16}{'backdoor FE':>16}",
    ]
    for cl in ("clean", "backdoor"):
        cells = []
        for fe in ("clean", "backdoor"):
            rep = table[(fe, cl)]
            cells.append(f"{rep.ma:.2f}/{rep.ba:.2f}")
        lines.append(f"{cl + ' classifier':>22}{cells[0]:>16}{cells[1]:>16}")
    return "\n".join(lines) + "\n"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedplas",
        description="Desk-scale federated-learning simulator with backdoor "
        "attacks and robust aggregation defenses.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config (INI)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument(
            "--timing",
            action="store_true",
            help="record measured wall_ms (breaks byte-reproducibility of rounds.csv)",
        )

    p_run = sub.add_parser("run", help="run one experiment")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_ratio = sub.add_parser("sweep-ratio", help="sweep malicious-client ratio")
    common(p_ratio)
    p_ratio.add_argument(
        "--ratios", required=True, help="comma list, e.g. 0.0,0.3,0.6,0.9"
    )
    p_ratio.set_defaults(func=cmd_sweep_ratio)

    p_cut = sub.add_parser("sweep-cut", help="sweep the cut layer (flplas)")
    common(p_cut)
    p_cut.add_argument("--cuts", required=True, help="comma list, e.g. 4,6,8")
    p_cut.set_defaults(func=cmd_sweep_cut)

    p_sur = sub.add_parser("surgery", help="clean/backdoor model recombination table")
    common(p_sur)
    p_sur.add_argument(
        "--warmup-epochs",
        type=int,
        default=1,
        help="shared clean warm-up epochs before the clean/poisoned branches",
    )
    p_sur.add_argument(
        "--branch-lr",
        type=float,
        default=None,
        help="learning rate for the branch phase (default: same as [training])",
    )
    p_sur.set_defaults(func=cmd_surgery)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
