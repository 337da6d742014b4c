"""Standard split-network VFL baseline with end-to-end backpropagation.

One host owns the upper stack (aggregator plus classifier head); guests own
feature encoders. Every training step crosses the split layer twice, so
guest, connection, and host faults all interrupt learning. Three timeout
policies handle missing activation slices: Wait halts training outright,
Skip drops the batch, Zeros imputes zero slices (whose gradient slices are
then discarded, since a dead guest cannot receive them).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .faults import LinkState
from .nn import Adam, Mlp, SgdMomentum, cross_entropy_loss


class TimeoutPolicy(Enum):
    WAIT = "wait"
    SKIP = "skip"
    ZEROS = "zeros"


class SplitGuest:
    """Feature-encoder party of the baseline; updates need host gradients."""

    def __init__(self, gid: int, encoder: Mlp, feature_columns: np.ndarray,
                 optimizer: SgdMomentum):
        self.id = gid
        self.encoder = encoder
        self.feature_columns = np.asarray(feature_columns, dtype=np.int64)
        self.optimizer = optimizer
        self.bits_sent = 0  # delivered activations, 32 bits per element


class SplitNnSystem:
    def __init__(self, guests: list[SplitGuest], host_stack: Mlp,
                 host_optimizer: Adam):
        w_g = sum(g.encoder.out_dim for g in guests)
        if host_stack.in_dim != w_g:
            raise ValueError(
                f"host stack expects {host_stack.in_dim} inputs but guests "
                f"produce {w_g}"
            )
        self.guests = guests
        self.host_stack = host_stack
        self.host_optimizer = host_optimizer


@dataclass
class StepOutcome:
    """What one forward attempt produced: logits, or a skip/halt verdict."""

    status: str  # "ok", "skipped", "halted"
    logits: np.ndarray | None = None
    fresh: list[bool] = field(default_factory=list)
    slice_dims: list[int] = field(default_factory=list)
    zero_imputed: int = 0


def splitnn_forward_step(
    sys: SplitNnSystem, x_full: np.ndarray, link: LinkState, policy: TimeoutPolicy
) -> StepOutcome:
    """Guests encode and send their slices; the host concatenates.

    A slice goes missing when the guest poll or its connection poll fails;
    the host's own availability is not checked until gradient time. Missing
    slices resolve per policy. Encoder forward caches stay valid only for
    fresh slices, which is what the backward step consumes.
    """
    rows = x_full.shape[0]
    slices: list[np.ndarray | None] = []
    fresh: list[bool] = []
    for g in sys.guests:
        ok = link.poll_guest(g.id)
        if ok:
            a = g.encoder.forward(x_full[:, g.feature_columns])
            ok = link.poll_connection(g.id, 0, compose=False)
            if ok:
                g.bits_sent += a.size * 32
            slices.append(a if ok else None)
        else:
            slices.append(None)
        fresh.append(ok)

    missing = fresh.count(False)
    if missing:
        if policy is TimeoutPolicy.WAIT:
            return StepOutcome("halted", fresh=fresh)
        if policy is TimeoutPolicy.SKIP:
            return StepOutcome("skipped", fresh=fresh)
        for i, s in enumerate(slices):
            if s is None:
                slices[i] = np.zeros((rows, sys.guests[i].encoder.out_dim))

    logits = sys.host_stack.forward(np.concatenate(slices, axis=1))
    return StepOutcome(
        "ok",
        logits=logits,
        fresh=fresh,
        slice_dims=[g.encoder.out_dim for g in sys.guests],
        zero_imputed=missing,
    )


def splitnn_backward_step(
    sys: SplitNnSystem,
    outcome: StepOutcome,
    labels: np.ndarray,
    link: LinkState,
    policy: TimeoutPolicy,
) -> tuple[float, str]:
    """Backpropagate through the host stack and offer slices to the guests.

    The host polls once here; a dead host computes no gradients at all, so
    the round is lost for every party (a halt under Wait). Each fresh guest
    then needs its return connection and itself alive to apply its update.
    """
    if outcome.status != "ok" or outcome.logits is None:
        raise RuntimeError("backward requires a completed forward")
    if not link.poll_host(0):
        if policy is TimeoutPolicy.WAIT:
            return 0.0, "halted"
        return 0.0, "skipped"

    loss, grad = cross_entropy_loss(outcome.logits, labels)
    split_grad, host_grads = sys.host_stack.backward(grad)
    sys.host_optimizer.step(host_grads)

    offset = 0
    for g, dim, is_fresh in zip(sys.guests, outcome.slice_dims, outcome.fresh):
        lo, hi = offset, offset + dim
        offset = hi
        if not is_fresh:
            continue  # imputed slice: gradient discarded, encoder cache unused
        delivered = link.poll_connection(g.id, 0, compose=False)
        alive = link.poll_guest(g.id)
        if delivered and alive:
            _, grads = g.encoder.backward(split_grad[:, lo:hi])
            g.optimizer.step(grads)
        else:
            g.encoder.backward(split_grad[:, lo:hi])  # clears the cache
            if policy is TimeoutPolicy.WAIT:
                return loss, "halted"
    return loss, "ok"


@dataclass
class EpochStats:
    mean_loss: float
    updated_batches: int
    skipped_batches: int
    zero_imputed_slices: int
    halted: bool


def run_splitnn_epoch(
    sys: SplitNnSystem,
    features: np.ndarray,
    labels: np.ndarray,
    batches: list[np.ndarray],
    row_of_id: dict[int, int],
    link: LinkState,
    policy: TimeoutPolicy,
) -> EpochStats:
    """Drive one epoch of aligned batches; stops early on a halt verdict."""
    total = 0.0
    updated = 0
    skipped = 0
    imputed = 0
    for ids in batches:
        rows = np.array([row_of_id[int(e)] for e in ids], dtype=np.intp)
        out = splitnn_forward_step(sys, features[rows], link, policy)
        if out.status == "halted":
            return EpochStats(_mean(total, updated), updated, skipped, imputed, True)
        if out.status == "skipped":
            skipped += 1
            continue
        imputed += out.zero_imputed
        loss, verdict = splitnn_backward_step(sys, out, labels[rows], link, policy)
        if verdict == "halted":
            return EpochStats(_mean(total, updated), updated, skipped, imputed, True)
        if verdict == "skipped":
            skipped += 1
            continue
        total += loss
        updated += 1
    return EpochStats(_mean(total, updated), updated, skipped, imputed, False)


def _mean(total: float, count: int) -> float:
    return total / count if count else float("nan")


def splitnn_predict(sys: SplitNnSystem, x_full: np.ndarray) -> np.ndarray:
    """Fault-free inference: argmax logits, ties to the lowest class index."""
    x_full = np.asarray(x_full, dtype=np.float64)
    codes = [g.encoder.infer(x_full[:, g.feature_columns]) for g in sys.guests]
    logits = sys.host_stack.infer(np.concatenate(codes, axis=1))
    return np.argmax(logits, axis=1)
