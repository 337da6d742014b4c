"""Canonical config documents for the bundled MNIST benchmark suite.

Tests and the cache-warming tool share these definitions so that both hit
the same cache entries. Everything returns plain JSON-style dicts; callers
may copy and edit them freely before parsing.
"""

from __future__ import annotations

FAULT_AXES = ("connection", "guest", "host")


def mnist_run(
    strategy: str = "dvfl",
    seed: int = 1,
    n_hosts: int = 4,
    faults: dict | None = None,
    comm_period: int = 1,
    labeled: int | None = None,
) -> dict:
    """One benchmark run on MNIST with the standard shapes (G=4, W_g=320,
    W_h=160) and training lengths. Limited-label runs train the supervised
    stage for 160 epochs instead of 60."""
    training: dict = {"comm_period": comm_period}
    if labeled is not None:
        training["labeled_count"] = labeled
        training["owner_epochs"] = 160
        training["splitnn_epochs"] = 160
    return {
        "strategy": strategy,
        "seed": seed,
        "dataset": {"kind": "mnist"},
        "model": {"n_guests": 4, "n_hosts": n_hosts, "w_g": 320, "w_h": 160},
        "training": training,
        "faults": dict(faults or {}),
    }


def one_axis_fault(axis: str, down: float, up: float) -> dict:
    if axis not in FAULT_AXES:
        raise ValueError(f"unknown fault axis {axis!r}")
    return {f"{axis}_down": down, f"{axis}_up": up}


SEEDS = (1, 2, 3)


def benchmark_suite() -> list[tuple[str, dict]]:
    """Ordered (label, config-doc) pairs covering the full benchmark grid.

    Ordering puts the headline fault-free cells first so a partially warmed
    cache is still useful.
    """
    runs: list[tuple[str, dict]] = []

    def add(label: str, **kw) -> None:
        for seed in SEEDS:
            runs.append((f"{label} seed={seed}", mnist_run(seed=seed, **kw)))

    add("dvfl fault-free", strategy="dvfl")
    add("splitnn fault-free", strategy="splitnn-skip")
    for axis in FAULT_AXES:
        add(f"dvfl {axis} 0.3/0.1", strategy="dvfl",
            faults=one_axis_fault(axis, 0.3, 0.1))
    add("splitnn-skip connection 0.3/0.1", strategy="splitnn-skip",
        faults=one_axis_fault("connection", 0.3, 0.1))
    for h in (1, 4):
        add(f"dvfl hosts={h} connection 0.6/0.5", strategy="dvfl", n_hosts=h,
            faults=one_axis_fault("connection", 0.6, 0.5))
    add("dvfl K=20", strategy="dvfl", comm_period=20)
    for labeled in (128, 1024):
        add(f"dvfl labeled={labeled}", strategy="dvfl", labeled=labeled)
        add(f"splitnn labeled={labeled}", strategy="splitnn-skip",
            labeled=labeled)
    add("splitnn-wait connection 0.3", strategy="splitnn-wait",
        faults={"connection_down": 0.3})
    return runs
