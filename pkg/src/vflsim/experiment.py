"""Experiment driver: builds parties, schedules training, accounts costs.

Training runs in three sequential phases for the decoupled strategy (guests,
then hosts off their replay buffers, then the owner on frozen encodings),
which is observationally equivalent to the parallel protocol because no
phase feeds back into an earlier one. The baseline strategy trains
end-to-end. Both share the fault model, the data pipeline, deterministic
seeding, and the metrics/CSV surface.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import Guest, Host, Owner, encode_entity, owner_train_epoch, predict
from .config import ExperimentConfig, config_to_doc, derive_seed
from .data import (
    BatchPlan,
    Dataset,
    IntersectionSpec,
    VerticalPartitionSpec,
    build_intersection_split,
    even_bands,
    load_csv,
    load_mnist,
    make_batches,
    make_blob_data,
)
from .errors import ConfigError
from .faults import LinkState
from .nn import (
    Activation,
    Adam,
    LeakyRelu,
    Mlp,
    SgdMomentum,
    activation_from_name,
    init_mlp,
)
from .splitnn import (
    SplitGuest,
    SplitNnSystem,
    TimeoutPolicy,
    run_splitnn_epoch,
    splitnn_predict,
)

MNIST_TRAIN_SAMPLES = 60000

# seed-stream tags; every consumer of randomness gets its own lane
_GUEST_STREAM, _HOST_STREAM, _OWNER_STREAM = 0, 1, 2
_PLAN_GUEST, _PLAN_OWNER, _INTERSECTION = 10, 11, 12
_VAL_SPLIT, _TEST_SPLIT, _PLAN_SPLITNN = 13, 14, 15


# ---------------------------------------------------------------------------
# metrics


@dataclass
class RunMetrics:
    """Everything a single run reports.

    bytes_per_guest bills successful register writes (or delivered baseline
    activations); scheduled_bytes_per_guest is the fault-independent figure
    the communication schedule implies, which for the decoupled strategy
    equals the closed-form cost exactly. wall_clock_sec never enters the
    CSV so rows stay byte-reproducible.
    """

    strategy: str
    accuracy: float
    status: str  # "ok", "halted", "cold-start"
    halt_epoch: int | None
    final_losses: dict[str, float]
    fault_events: dict[str, int]
    bytes_per_guest: list[int]
    scheduled_bytes_per_guest: list[int]
    wall_clock_sec: float

    @property
    def halted(self) -> bool:
        return self.status == "halted"

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "accuracy": self.accuracy,
            "status": self.status,
            "halt_epoch": self.halt_epoch,
            "final_losses": self.final_losses,
            "fault_events": self.fault_events,
            "bytes_per_guest": self.bytes_per_guest,
            "scheduled_bytes_per_guest": self.scheduled_bytes_per_guest,
            "wall_clock_sec": self.wall_clock_sec,
        }

    @staticmethod
    def from_dict(d: dict) -> "RunMetrics":
        return RunMetrics(
            strategy=d["strategy"],
            accuracy=float(d["accuracy"]),
            status=d["status"],
            halt_epoch=d["halt_epoch"],
            final_losses={k: float(v) for k, v in d["final_losses"].items()},
            fault_events={k: int(v) for k, v in d["fault_events"].items()},
            bytes_per_guest=[int(b) for b in d["bytes_per_guest"]],
            scheduled_bytes_per_guest=[
                int(b) for b in d["scheduled_bytes_per_guest"]
            ],
            wall_clock_sec=float(d["wall_clock_sec"]),
        )


CSV_COLUMNS = [
    "strategy", "n_guests", "n_hosts", "k", "labeled",
    "connection_down", "connection_up", "guest_down", "guest_up",
    "host_down", "host_up", "seed", "accuracy", "bytes", "halted", "status",
]


def metrics_csv_row(cfg: ExperimentConfig, m: RunMetrics) -> list[str]:
    f = cfg.faults
    tr = cfg.training
    acc = m.status if m.status != "ok" else repr(float(m.accuracy))
    return [
        cfg.strategy,
        str(cfg.model.n_guests),
        str(cfg.model.n_hosts),
        str(tr.comm_period),
        "" if tr.labeled_count is None else str(tr.labeled_count),
        repr(float(f.connection_down)),
        repr(float(f.connection_up)),
        repr(float(f.guest_down)),
        repr(float(f.guest_up)),
        repr(float(f.host_down)),
        repr(float(f.host_up)),
        str(cfg.seed),
        acc,
        str(sum(m.bytes_per_guest)),
        "true" if m.halted else "false",
        m.status,
    ]


def format_csv(rows: list[list[str]], header: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(CSV_COLUMNS)
    writer.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class PreparedData:
    train: Dataset
    test: Dataset
    bands: VerticalPartitionSpec
    aligned: Dataset  # labeled rows shared by all parties
    guest_ids: list[np.ndarray]  # per-guest local training entities
    n_classes: int


def _canonical_labels(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset, int]:
    """Remap labels onto 0..C-1 so losses can index class logits directly."""
    classes = np.unique(np.concatenate([train.labels, test.labels]))
    lookup = {int(c): i for i, c in enumerate(classes)}
    if all(lookup[int(c)] == int(c) for c in classes):
        return train, test, classes.size
    remap = np.vectorize(lambda v: lookup[int(v)])
    train = Dataset(train.features, remap(train.labels), train.entity_ids)
    test = Dataset(test.features, remap(test.labels), test.entity_ids)
    return train, test, classes.size


def _split_train_test(d: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    n_test = max(1, int(round(len(d) * fraction)))
    if n_test >= len(d):
        raise ConfigError("test fraction leaves no training rows")
    rng = np.random.default_rng(np.random.SeedSequence([seed, len(d)]))
    order = rng.permutation(d.entity_ids)
    return d.take(order[n_test:]), d.take(order[:n_test])


def load_experiment_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = cfg.dataset
    _, data_seed, _ = cfg.seeds()
    if ds.kind == "mnist":
        return load_mnist(ds.resolved_dir())
    if ds.kind == "csv":
        full = load_csv(ds.path, label_column=ds.label_column, header=ds.header)
        if full.labels is None:
            raise ConfigError("csv dataset needs a label column for training")
        return _split_train_test(
            full, ds.test_fraction, derive_seed(data_seed, _TEST_SPLIT)
        )
    return make_blob_data(
        ds.n_samples, ds.n_features, ds.n_classes,
        seed=derive_seed(data_seed, _TEST_SPLIT),
        test_fraction=ds.test_fraction,
    )


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    train, test = load_experiment_data(cfg)
    if train.labels is None or test.labels is None:
        raise ConfigError("training requires labeled train and test data")
    train, test, n_classes = _canonical_labels(train, test)

    g = cfg.model.n_guests
    bands = even_bands(train.n_features, g)
    _, data_seed, _ = cfg.seeds()

    labeled = cfg.training.labeled_count
    if labeled is None:
        aligned = train
        guest_ids = [train.entity_ids for _ in range(g)]
    else:
        aligned, windows = build_intersection_split(
            train,
            IntersectionSpec(labeled, g, derive_seed(data_seed, _INTERSECTION)),
        )
        guest_ids = [
            np.concatenate([aligned.entity_ids, w.entity_ids]) for w in windows
        ]
    return PreparedData(train, test, bands, aligned, guest_ids, n_classes)


def data_shape(cfg: ExperimentConfig) -> tuple[int, int]:
    """(n_features, n_classes) without materializing the data when avoidable."""
    ds = cfg.dataset
    if ds.kind == "mnist":
        return 784, 10
    if ds.kind == "blobs":
        return ds.n_features, ds.n_classes
    train, test = load_experiment_data(cfg)
    classes = np.unique(np.concatenate([train.labels, test.labels]))
    return train.n_features, classes.size


# ---------------------------------------------------------------------------
# architectures (widths follow the shared parameterization: W_g is the full
# split-layer width, W_h one host's output width)


def _acts(name: str, slope: float, count: int) -> list[Activation]:
    return [activation_from_name(name, slope) for _ in range(count)]


def guest_dims(kind: str, d_i: int, n_guests: int, w_g: int) -> list[int]:
    k = w_g // n_guests
    if kind == "mnist":
        hidden = max(1, round(400 / n_guests))
    else:
        hidden = max(k, (d_i + k + 1) // 2)
    return [d_i, hidden, k]


def host_dims(w_g: int, w_h: int) -> list[int]:
    return [w_g, max(1, round((w_g + 3 * w_h) / 4)), w_h]


def owner_dims(w_h: int, n_hosts: int, n_classes: int) -> list[int]:
    return [w_h * n_hosts, w_h, 40, n_classes]


def build_guest(cfg: ExperimentConfig, gid: int, d_i: int,
                columns: np.ndarray, model_seed: int) -> Guest:
    m, tr = cfg.model, cfg.training
    rng = np.random.default_rng(
        np.random.SeedSequence([model_seed, _GUEST_STREAM, gid])
    )
    dims = guest_dims(cfg.dataset.kind, d_i, m.n_guests, m.w_g)
    enc = init_mlp(dims, _acts(m.guest_activation, m.leaky_slope, 2), rng)
    dec = init_mlp(
        dims[::-1],
        [activation_from_name(m.guest_activation, m.leaky_slope),
         activation_from_name("sigmoid")],
        rng,
    )
    opt = Adam(
        enc.params() + dec.params(), tr.guest_lr, tr.adam_beta1, tr.adam_beta2,
        tr.adam_eps, tr.weight_decay,
    )
    return Guest(gid, enc, dec, columns, opt)


def build_host(cfg: ExperimentConfig, hid: int, model_seed: int) -> Host:
    m, tr = cfg.model, cfg.training
    rng = np.random.default_rng(
        np.random.SeedSequence([model_seed, _HOST_STREAM, hid])
    )
    dims = host_dims(m.w_g, m.w_h)
    enc = init_mlp(dims, _acts(m.host_activation, m.leaky_slope, 2), rng)
    # decoder's last activation mirrors the guest encoders' output range
    dec = init_mlp(
        dims[::-1],
        [activation_from_name(m.host_activation, m.leaky_slope),
         activation_from_name(m.guest_activation, m.leaky_slope)],
        rng,
    )
    opt = Adam(
        enc.params() + dec.params(), tr.host_lr, tr.adam_beta1, tr.adam_beta2,
        tr.adam_eps, tr.weight_decay,
    )
    return Host(hid, enc, dec, m.n_guests, opt)


def build_owner(cfg: ExperimentConfig, n_classes: int, model_seed: int) -> Owner:
    m, tr = cfg.model, cfg.training
    rng = np.random.default_rng(np.random.SeedSequence([model_seed, _OWNER_STREAM]))
    dims = owner_dims(m.w_h, m.n_hosts, n_classes)
    slope = m.leaky_slope
    clf = init_mlp(dims, [LeakyRelu(slope), LeakyRelu(slope), Activation()], rng)
    return Owner(clf, SgdMomentum(clf.params(), tr.owner_lr, tr.owner_momentum))


def build_splitnn(cfg: ExperimentConfig, bands: VerticalPartitionSpec,
                  n_classes: int, model_seed: int) -> SplitNnSystem:
    """Baseline system: same guest encoders, host encoder + owner head fused."""
    m, tr = cfg.model, cfg.training
    guests = []
    for gid, cols in enumerate(bands.feature_sets):
        rng = np.random.default_rng(
            np.random.SeedSequence([model_seed, _GUEST_STREAM, gid])
        )
        dims = guest_dims(cfg.dataset.kind, len(cols), m.n_guests, m.w_g)
        enc = init_mlp(dims, _acts(m.guest_activation, m.leaky_slope, 2), rng)
        opt = SgdMomentum(enc.params(), tr.splitnn_guest_lr, tr.splitnn_guest_momentum)
        guests.append(SplitGuest(gid, enc, cols, opt))

    rng = np.random.default_rng(np.random.SeedSequence([model_seed, _HOST_STREAM, 0]))
    hdims = host_dims(m.w_g, m.w_h)
    odims = owner_dims(m.w_h, 1, n_classes)
    stack_dims = hdims + odims[1:]
    slope = m.leaky_slope
    stack_acts = _acts(m.host_activation, slope, 2) + [
        LeakyRelu(slope), LeakyRelu(slope), Activation(),
    ]
    stack = init_mlp(stack_dims, stack_acts, rng)
    opt = Adam(
        stack.params(), tr.splitnn_host_lr, tr.adam_beta1, tr.adam_beta2,
        tr.adam_eps, tr.weight_decay,
    )
    return SplitNnSystem(guests, stack, opt)


# ---------------------------------------------------------------------------
# communication cost


def comm_cost(cfg: ExperimentConfig, n_samples: int | None = None) -> int:
    """Closed-form outgoing bits per guest for the decoupled schedule.

    hosts * floor(N/K) communication epochs * local samples * per-guest
    output dim * 32 bits. Exact integer arithmetic throughout.
    """
    m, tr = cfg.model, cfg.training
    if n_samples is None:
        if cfg.dataset.kind == "mnist":
            base = MNIST_TRAIN_SAMPLES
        elif cfg.dataset.kind == "blobs":
            ds = cfg.dataset
            base = ds.n_samples - max(1, int(round(ds.n_samples * ds.test_fraction)))
        else:
            raise ConfigError("csv datasets need an explicit n_samples for comm_cost")
        if tr.labeled_count is None:
            n_samples = base
        else:
            n_samples = tr.labeled_count + (base - tr.labeled_count) // m.n_guests
    per_guest_dim = m.w_g // m.n_guests
    comm_epochs = tr.guest_epochs // tr.comm_period
    return m.n_hosts * comm_epochs * n_samples * per_guest_dim * 32


# ---------------------------------------------------------------------------
# evaluation


def _nanmean(values: list[float]) -> float:
    """Mean of the non-nan entries; nan for none, and never a warning."""
    live = [v for v in values if not math.isnan(v)]
    return sum(live) / len(live) if live else math.nan


def accuracy_percent(predicted: np.ndarray, labels: np.ndarray) -> float:
    if predicted.shape != labels.shape:
        raise ValueError("prediction/label shape mismatch")
    if predicted.size == 0:
        raise ValueError("cannot score an empty test set")
    return float(np.mean(predicted == labels) * 100.0)


def evaluate_dvfl(guests: list[Guest], hosts: list[Host], owner: Owner,
                  test: Dataset) -> float:
    if test.labels is None:
        raise ValueError("test set has no labels")
    return accuracy_percent(predict(owner, guests, hosts, test.features), test.labels)


def evaluate_splitnn(system: SplitNnSystem, test: Dataset) -> float:
    if test.labels is None:
        raise ValueError("test set has no labels")
    return accuracy_percent(splitnn_predict(system, test.features), test.labels)


def _param_digest(nets: list[Mlp]) -> str:
    h = hashlib.sha256()
    for net in nets:
        for p in net.params():
            h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# decoupled run


@dataclass
class DvflRun:
    """Full handle on a finished decoupled run, for tests and inspection."""

    config: ExperimentConfig
    guests: list[Guest]
    hosts: list[Host]
    owner: Owner
    data: PreparedData
    guest_epoch_digests: list[list[str]]  # [guest][epoch]
    metrics: RunMetrics | None = None
    guest_digest_pre_owner: list[str] = field(default_factory=list)
    host_digest_pre_owner: list[str] = field(default_factory=list)


def _comm_epochs(n_epochs: int, period: int) -> set[int]:
    # first epoch of each complete window: exactly floor(N/K) of them
    return {m * period for m in range(n_epochs // period)}


def _val_split(aligned: Dataset, fraction: float, seed: int
               ) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, len(aligned)]))
    order = rng.permutation(aligned.entity_ids)
    n_val = max(1, int(round(len(aligned) * fraction)))
    if n_val >= len(aligned):
        raise ConfigError("validation fraction leaves no owner training rows")
    return order[n_val:], order[:n_val]


def execute_dvfl(cfg: ExperimentConfig, prep: PreparedData | None = None,
                 evaluate: bool = True) -> DvflRun:
    if cfg.is_splitnn:
        raise ConfigError(f"strategy {cfg.strategy!r} is not the decoupled protocol")
    cfg.validate()
    t0 = time.perf_counter()
    model_seed, data_seed, fault_seed = cfg.seeds()
    if prep is None:
        prep = prepare_data(cfg)
    m, tr = cfg.model, cfg.training

    guests = [
        build_guest(cfg, i, len(cols), cols, model_seed)
        for i, cols in enumerate(prep.bands.feature_sets)
    ]
    hosts = [build_host(cfg, j, model_seed) for j in range(m.n_hosts)]
    owner = build_owner(cfg, prep.n_classes, model_seed)
    link = LinkState(cfg.faults, m.n_guests, m.n_hosts, fault_seed)

    guest_sets = [
        prep.train.take(ids).columns(cols)
        for ids, cols in zip(prep.guest_ids, prep.bands.feature_sets)
    ]
    plan_seed = derive_seed(data_seed, _PLAN_GUEST)
    plans = [BatchPlan(ids, tr.batch_size, plan_seed) for ids in prep.guest_ids]

    events = {
        "guest_dead_rounds": 0,
        "host_dead_comm_rounds": 0,
        "host_dead_train_iters": 0,
        "cold_register_skips": 0,
    }
    scheduled_bits = [0] * m.n_guests
    per_guest_dim = m.w_g // m.n_guests
    comm_epochs = _comm_epochs(tr.guest_epochs, tr.comm_period)
    epoch_digests: list[list[str]] = [[] for _ in guests]
    guest_loss = [math.nan] * m.n_guests

    for epoch in range(tr.guest_epochs):
        communicate = epoch in comm_epochs
        batch_lists = [
            make_batches(plan, ds, epoch) for plan, ds in zip(plans, guest_sets)
        ]
        n_rounds = len(batch_lists[0])
        sums = [0.0] * m.n_guests
        counts = [0] * m.n_guests
        for t in range(n_rounds):
            for i, g in enumerate(guests):
                ids = batch_lists[i][t]
                x = guest_sets[i].features[guest_sets[i].rows_for(ids)]
                if communicate:
                    scheduled_bits[i] += len(ids) * per_guest_dim * 32 * m.n_hosts
                loss = g.train_round(x, communicate, hosts, link)
                if loss is None:
                    events["guest_dead_rounds"] += 1
                else:
                    sums[i] += loss
                    counts[i] += 1
            if communicate:
                for h in hosts:
                    alive = link.poll_host(h.id)
                    if not alive:
                        events["host_dead_comm_rounds"] += 1
                        h.ingest(False)
                    elif not h.ingest(True):
                        events["cold_register_skips"] += 1
        for i in range(m.n_guests):
            guest_loss[i] = sums[i] / counts[i] if counts[i] else math.nan
            epoch_digests[i].append(_param_digest([guests[i].encoder,
                                                   guests[i].decoder]))

    run = DvflRun(cfg, guests, hosts, owner, prep, epoch_digests)

    if all(len(h.replay) == 0 for h in hosts):
        # no host ever saw data: the downstream pipeline has nothing to learn from
        run.metrics = RunMetrics(
            strategy=cfg.strategy,
            accuracy=math.nan,
            status="cold-start",
            halt_epoch=None,
            final_losses={"guest": _nanmean(guest_loss)},
            fault_events=events,
            bytes_per_guest=[g.bits_sent // 8 for g in guests],
            scheduled_bytes_per_guest=[b // 8 for b in scheduled_bits],
            wall_clock_sec=time.perf_counter() - t0,
        )
        return run

    # hosts train offline to their full iteration budget, cycling the buffer
    iters_per_epoch = plans[0].n_batches()
    host_loss: list[float] = [math.nan] * m.n_hosts
    for _ in range(tr.host_epochs * iters_per_epoch):
        for h in hosts:
            if not len(h.replay):
                continue
            alive = link.poll_host(h.id)
            if not alive:
                events["host_dead_train_iters"] += 1
            loss = h.train_round(update=alive)
            if loss is not None:
                host_loss[h.id] = loss

    run.guest_digest_pre_owner = [
        _param_digest([g.encoder, g.decoder]) for g in guests
    ]
    run.host_digest_pre_owner = [
        _param_digest([h.encoder, h.decoder]) for h in hosts
    ]

    # owner phase: frozen upstream models, so encode the aligned set once
    aligned = prep.aligned
    if tr.early_stopping:
        train_ids, val_ids = _val_split(
            aligned, tr.val_fraction, derive_seed(data_seed, _VAL_SPLIT)
        )
    else:
        train_ids, val_ids = aligned.entity_ids, None
    feats = encode_entity(guests, hosts, aligned.features)
    row_of = {int(e): i for i, e in enumerate(aligned.entity_ids)}
    plan = BatchPlan(train_ids, tr.batch_size, derive_seed(data_seed, _PLAN_OWNER))

    owner_loss = math.nan
    best_acc, best_snap, patience_left = -1.0, None, tr.patience
    if val_ids is not None:
        val_rows = np.array([row_of[int(e)] for e in val_ids], dtype=np.intp)
    for epoch in range(tr.owner_epochs):
        owner_loss = owner.train_epoch_on(feats, aligned.labels, plan, epoch, row_of)
        if val_ids is None:
            continue
        val_pred = np.argmax(owner.classifier.infer(feats[val_rows]), axis=1)
        acc = float(np.mean(val_pred == aligned.labels[val_rows]))
        if acc > best_acc:
            best_acc, best_snap, patience_left = acc, owner.classifier.snapshot(), tr.patience
        else:
            patience_left -= 1
            if patience_left <= 0:
                break
    if best_snap is not None:
        owner.classifier.restore(best_snap)

    acc = evaluate_dvfl(guests, hosts, owner, prep.test) if evaluate else math.nan
    run.metrics = RunMetrics(
        strategy=cfg.strategy,
        accuracy=acc,
        status="ok",
        halt_epoch=None,
        final_losses={
            "guest": _nanmean(guest_loss),
            "host": _nanmean(host_loss),
            "owner": float(owner_loss),
        },
        fault_events=events,
        bytes_per_guest=[g.bits_sent // 8 for g in guests],
        scheduled_bytes_per_guest=[b // 8 for b in scheduled_bits],
        wall_clock_sec=time.perf_counter() - t0,
    )
    return run


# ---------------------------------------------------------------------------
# baseline run


@dataclass
class SplitRun:
    config: ExperimentConfig
    metrics: RunMetrics
    system: SplitNnSystem
    data: PreparedData


_POLICIES = {
    "splitnn-wait": TimeoutPolicy.WAIT,
    "splitnn-skip": TimeoutPolicy.SKIP,
    "splitnn-zeros": TimeoutPolicy.ZEROS,
}


def execute_splitnn(cfg: ExperimentConfig, prep: PreparedData | None = None,
                    evaluate: bool = True) -> SplitRun:
    if not cfg.is_splitnn:
        raise ConfigError(f"strategy {cfg.strategy!r} is not a baseline variant")
    cfg.validate()
    t0 = time.perf_counter()
    policy = _POLICIES[cfg.strategy]
    model_seed, data_seed, fault_seed = cfg.seeds()
    if prep is None:
        prep = prepare_data(cfg)
    tr = cfg.training

    system = build_splitnn(cfg, prep.bands, prep.n_classes, model_seed)
    # the baseline has exactly one host regardless of the configured count
    link = LinkState(cfg.faults, cfg.model.n_guests, 1, fault_seed)

    # end-to-end training sees only the labeled aligned rows
    aligned = prep.aligned
    if tr.early_stopping:
        train_ids, val_ids = _val_split(
            aligned, tr.val_fraction, derive_seed(data_seed, _VAL_SPLIT)
        )
    else:
        train_ids, val_ids = aligned.entity_ids, None
    row_of = {int(e): i for i, e in enumerate(aligned.entity_ids)}
    plan = BatchPlan(train_ids, tr.batch_size, derive_seed(data_seed, _PLAN_SPLITNN))
    if val_ids is not None:
        val_rows = np.array([row_of[int(e)] for e in val_ids], dtype=np.intp)
        val_x = aligned.features[val_rows]
        val_y = aligned.labels[val_rows]

    def all_params() -> list[Mlp]:
        return [g.encoder for g in system.guests] + [system.host_stack]

    events = {"skipped_batches": 0, "zero_imputed_slices": 0}
    status = "ok"
    halt_epoch = None
    last_loss = math.nan
    best_acc, best_snaps, patience_left = -1.0, None, tr.patience

    for epoch in range(tr.splitnn_epochs):
        order = plan.ordering(epoch)
        batches = [
            order[i : i + tr.batch_size] for i in range(0, order.size, tr.batch_size)
        ]
        stats = run_splitnn_epoch(
            system, aligned.features, aligned.labels, batches, row_of, link, policy
        )
        events["skipped_batches"] += stats.skipped_batches
        events["zero_imputed_slices"] += stats.zero_imputed_slices
        if not math.isnan(stats.mean_loss):
            last_loss = stats.mean_loss
        if stats.halted:
            status = "halted"
            halt_epoch = epoch
            break
        if val_ids is not None:
            acc = float(np.mean(splitnn_predict(system, val_x) == val_y))
            if acc > best_acc:
                best_acc = acc
                best_snaps = [net.snapshot() for net in all_params()]
                patience_left = tr.patience
            else:
                patience_left -= 1
                if patience_left <= 0:
                    break

    if status == "ok" and best_snaps is not None:
        for net, snap in zip(all_params(), best_snaps):
            net.restore(snap)

    if status == "halted" or not evaluate:
        acc = math.nan
    else:
        acc = evaluate_splitnn(system, prep.test)
    metrics = RunMetrics(
        strategy=cfg.strategy,
        accuracy=acc,
        status=status,
        halt_epoch=halt_epoch,
        final_losses={"splitnn": float(last_loss)},
        fault_events=events,
        bytes_per_guest=[g.bits_sent // 8 for g in system.guests],
        scheduled_bytes_per_guest=[],
        wall_clock_sec=time.perf_counter() - t0,
    )
    return SplitRun(cfg, metrics, system, prep)


# ---------------------------------------------------------------------------
# entry points, caching, sweeps


def run_dvfl(cfg: ExperimentConfig) -> RunMetrics:
    return execute_dvfl(cfg).metrics


def run_splitnn(cfg: ExperimentConfig) -> RunMetrics:
    return execute_splitnn(cfg).metrics


def run_experiment(cfg: ExperimentConfig) -> RunMetrics:
    return run_splitnn(cfg) if cfg.is_splitnn else run_dvfl(cfg)


# modules whose code decides numerical results; presentation layers excluded
_RESULT_MODULES = (
    "nn.py", "data.py", "faults.py", "agents.py", "splitnn.py",
    "experiment.py", "config.py",
)


def _code_fingerprint() -> str:
    pkg = Path(__file__).parent
    h = hashlib.sha256()
    for name in _RESULT_MODULES:
        h.update(name.encode())
        h.update((pkg / name).read_bytes())
    h.update(np.__version__.encode())
    return h.hexdigest()[:16]


def run_cache_key(cfg: ExperimentConfig) -> str:
    doc = config_to_doc(cfg)
    doc.pop("output", None)  # output paths do not affect results
    blob = json.dumps(doc, sort_keys=True) + _code_fingerprint()
    return hashlib.sha256(blob.encode()).hexdigest()[:32]


def cached_run(cfg: ExperimentConfig, cache_dir: str | Path | None) -> RunMetrics:
    """Run an experiment, reusing an on-disk result for identical code+config."""
    if cache_dir is None:
        return run_experiment(cfg)
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    path = cache / (run_cache_key(cfg) + ".json")
    if path.exists():
        return RunMetrics.from_dict(json.loads(path.read_text())["metrics"])
    metrics = run_experiment(cfg)
    payload = {"config": config_to_doc(cfg), "metrics": metrics.to_dict()}
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True))
    tmp.replace(path)
    return metrics


def median_two_sigma(values: list[float]) -> tuple[float, float]:
    """Median and twice the sample standard deviation; single values spread 0."""
    arr = np.asarray(values, dtype=np.float64)
    med = float(np.median(arr))
    spread = 0.0 if arr.size < 2 else float(2.0 * np.std(arr, ddof=1))
    return med, spread


@dataclass
class SweepCell:
    label: str
    overrides: dict[str, object]
    seeds: list[int]
    accuracies: list[float]
    median: float
    two_sigma: float
    statuses: list[str]
    rows: list[list[str]]


def sweep(
    configs: list[tuple[str, ExperimentConfig]],
    seeds: list[int],
    cache_dir: str | Path | None = None,
    progress=None,
) -> list[SweepCell]:
    """Run every config across all seeds; summarize each cell median +/- 2 sigma."""
    if not configs:
        raise ConfigError("sweep grid is empty")
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    cells = []
    for label, base in configs:
        accs, statuses, rows = [], [], []
        for seed in seeds:
            cfg = parse_like(base, seed)
            metrics = cached_run(cfg, cache_dir)
            accs.append(metrics.accuracy)
            statuses.append(metrics.status)
            rows.append(metrics_csv_row(cfg, metrics))
            if progress:
                progress(label, seed, metrics)
        med, spread = median_two_sigma(accs)
        cells.append(
            SweepCell(label, {}, list(seeds), accs, med, spread, statuses, rows)
        )
    return cells


def parse_like(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Copy of a config with the master seed replaced."""
    from .config import parse_config

    doc = config_to_doc(cfg)
    doc["seed"] = seed
    return parse_config(doc)
