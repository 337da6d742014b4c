"""Command-line front end: single runs, seed/config sweeps, gradient checks."""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from pathlib import Path

import numpy as np

from .config import (
    ExperimentConfig,
    apply_overrides,
    config_to_doc,
    parse_config,
)
from .errors import VflsimError
from .data import even_bands
from .experiment import (
    build_guest,
    build_host,
    build_owner,
    build_splitnn,
    cached_run,
    data_shape,
    format_csv,
    metrics_csv_row,
    sweep,
)
from .nn import (
    LeakyRelu,
    Relu,
    cross_entropy_loss,
    finite_diff_check,
    mse_loss,
    probe_margin,
)


def _load_doc(args) -> dict:
    doc = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text())
    if args.set:
        doc = apply_overrides(doc, args.set)
    return doc


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise VflsimError(f"seeds must be integers, got {text!r}")
    if not seeds:
        raise VflsimError("empty seed list")
    return seeds


def _write(path: str | None, content: str) -> None:
    if path:
        Path(path).write_text(content)


def cmd_run(args) -> int:
    doc = _load_doc(args)
    doc.pop("sweep", None)
    seeds = _parse_seeds(args.seeds) if args.seeds else [None]
    rows = []
    results = []
    for seed in seeds:
        if seed is not None:
            doc = dict(doc, seed=seed)
        cfg = parse_config(doc)
        metrics = cached_run(cfg, args.cache_dir)
        rows.append(metrics_csv_row(cfg, metrics))
        results.append({"seed": cfg.seed, **metrics.to_dict()})
        acc = f"{metrics.accuracy:.2f}" if metrics.status == "ok" else metrics.status
        print(
            f"{cfg.strategy} seed={cfg.seed} accuracy={acc} "
            f"bytes={sum(metrics.bytes_per_guest)}"
        )
    out_csv = args.out or cfg.output.csv
    out_json = args.json or cfg.output.json
    _write(out_csv, format_csv(rows))
    if out_json:
        _write(out_json, json.dumps(results, sort_keys=True, indent=2) + "\n")
    return 0


def _sweep_grid(doc: dict) -> list[tuple[str, dict]]:
    """Cross product of the config's sweep axes; empty section means one cell."""
    axes = doc.pop("sweep", {})
    if not isinstance(axes, dict):
        raise VflsimError("sweep section must map dotted paths to value lists")
    if not axes:
        return [("base", doc)]
    keys = sorted(axes)
    cells = []
    for combo in itertools.product(*(axes[k] for k in keys)):
        overrides = [f"{k}={json.dumps(v)}" for k, v in zip(keys, combo)]
        label = ",".join(f"{k}={v}" for k, v in zip(keys, combo))
        cells.append((label, apply_overrides(doc, overrides)))
    return cells


def cmd_sweep(args) -> int:
    doc = _load_doc(args)
    grid = _sweep_grid(doc)
    seeds = _parse_seeds(args.seeds) if args.seeds else [parse_config(grid[0][1]).seed]
    configs = [(label, parse_config(cell)) for label, cell in grid]
    cells = sweep(configs, seeds, cache_dir=args.cache_dir)
    rows = [row for cell in cells for row in cell.rows]
    _write(args.out, format_csv(rows))
    summary = []
    for cell in cells:
        med = f"{cell.median:.2f}" if not np.isnan(cell.median) else "n/a"
        print(f"{cell.label}: median={med} spread={cell.two_sigma:.2f} "
              f"statuses={','.join(cell.statuses)}")
        summary.append({
            "label": cell.label,
            "seeds": cell.seeds,
            "accuracies": cell.accuracies,
            "median": cell.median,
            "two_sigma": cell.two_sigma,
            "statuses": cell.statuses,
        })
    if args.json:
        _write(args.json, json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    doc = _load_doc(args)
    doc.pop("sweep", None)
    cfg = parse_config(doc)
    rng = np.random.default_rng(cfg.seed)
    failed = False
    for name, net, supervised in _gradcheck_nets(cfg):
        if supervised:
            # deep classifier stacks: put every relu-family unit safely on
            # the linear branch so the probe has no kinks and no gradient
            # paths attenuated below finite-difference resolution
            x = rng.uniform(0.5, 1.5, size=(args.rows, net.in_dim))
            _lift_kinked_biases(net, x)
            target = rng.integers(0, net.out_dim, size=args.rows)
            loss_fn = cross_entropy_loss
        else:
            x = _probe_batch(net, rng, args.rows)
            target = rng.uniform(0.0, 1.0, size=(args.rows, net.out_dim))
            loss_fn = mse_loss
        err = finite_diff_check(net, x, target, loss_fn)
        ok = err < args.tolerance
        failed = failed or not ok
        print(f"{name}: max relative error {err:.3e} "
              f"{'ok' if ok else f'FAIL (tolerance {args.tolerance:g})'}")
    return 1 if failed else 0


def _probe_batch(net, rng: np.random.Generator, rows: int,
                 margin: float = 1e-4, attempts: int = 500) -> np.ndarray:
    """Random batch whose pre-activations all clear the kink margin.

    Central differences average the two one-sided slopes when a relu-family
    pre-activation lies within the step size of zero, so such batches are
    redrawn rather than reported as gradient errors.
    """
    for _ in range(attempts):
        x = rng.uniform(0.5, 1.5, size=(rows, net.in_dim))
        if probe_margin(net, x) > margin:
            return x
    raise VflsimError("no probe batch cleared the activation-kink margin")


def _lift_kinked_biases(net, x: np.ndarray, clearance: float = 0.5) -> None:
    """Shift relu-family biases so the probe batch stays on the linear branch."""
    a = x
    for layer in net.layers:
        z = a @ layer.w + layer.b
        if isinstance(layer.act, (Relu, LeakyRelu)):
            layer.b += clearance - z.min(axis=0)
            z = a @ layer.w + layer.b
        a = layer.act.value(z)


def _gradcheck_nets(cfg: ExperimentConfig):
    """One reduced-width instance of every architecture the config implies.

    The checker perturbs each parameter entry, so widths shrink to keep it
    fast; layer counts, activation sequences, mirroring, and the hidden-size
    rules all match what full-scale runs instantiate.
    """
    doc = config_to_doc(cfg)
    m = doc["model"]
    m["w_g"] = 2 * m["n_guests"]
    m["w_h"] = 4
    small = parse_config(doc)
    n_classes = data_shape(cfg)[1]
    bands = even_bands(4 * small.model.n_guests, small.model.n_guests)
    seed = small.seeds()[0]
    nets = []
    cols = bands.feature_sets[0]
    g = build_guest(small, 0, len(cols), cols, seed)
    nets.append(("guest.encoder", g.encoder, False))
    nets.append(("guest.decoder", g.decoder, False))
    h = build_host(small, 0, seed)
    nets.append(("host.encoder", h.encoder, False))
    nets.append(("host.decoder", h.decoder, False))
    owner = build_owner(small, n_classes, seed)
    nets.append(("owner.classifier", owner.classifier, True))
    system = build_splitnn(small, bands, n_classes, seed)
    nets.append(("splitnn.host_stack", system.host_stack, True))
    return nets


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="vflsim",
        description="Simulate vertically federated training under crash faults.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--set", action="append", metavar="PATH=VALUE",
                        help="override a config entry (dotted path)")
        sp.add_argument("--cache-dir", help="reuse results cached in this directory")

    run = sub.add_parser("run", help="run one experiment (optionally many seeds)")
    common(run)
    run.add_argument("--seeds", help="comma-separated seeds; default: config seed")
    run.add_argument("--out", help="write per-run CSV rows here")
    run.add_argument("--json", help="write per-run JSON records here")
    run.set_defaults(fn=cmd_run)

    sw = sub.add_parser("sweep", help="cross the config's sweep axes with seeds")
    common(sw)
    sw.add_argument("--seeds", help="comma-separated seeds; default: config seed")
    sw.add_argument("--out", help="write the combined CSV here")
    sw.add_argument("--json", help="write the cell summaries here")
    sw.set_defaults(fn=cmd_sweep)

    gc = sub.add_parser("gradcheck",
                        help="finite-difference check of every architecture")
    common(gc)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--rows", type=int, default=3, help="batch rows for the probe")
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except VflsimError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
