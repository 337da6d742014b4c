"""Participants of the decoupled protocol: guests, hosts, and the owner.

Guests train unsupervised reconstruction models on their vertical feature
slice and, on communication rounds, write encoder activations to per-host
registers. Hosts aggregate register contents into append-only replay
buffers and train their own reconstruction models from those buffers,
offline, after the guest phase. The owner trains a supervised head on
frozen guest+host encodings. No gradients ever cross a party boundary.

Transmitted activations are held as float32, matching a 32-bit-per-value
wire format; training math stays float64.
"""

from __future__ import annotations

import numpy as np

from .data import BatchPlan, Dataset
from .faults import LinkState
from .nn import Adam, Mlp, SgdMomentum, cross_entropy_loss, mse_loss


class CommRegister:
    """Single-writer single-reader mailbox holding the latest activation.

    Reads never consume; a failed write leaves the previous value readable.
    """

    def __init__(self, writer: int, reader: int):
        self.writer = writer
        self.reader = reader
        self.value: np.ndarray | None = None

    def write(self, activation: np.ndarray) -> int:
        """Post an activation in the float32 wire format; returns the bit count.

        The register keeps a reference, not a copy: the writer hands the
        buffer off and must not touch it afterwards. A round's activation
        fanned out to many hosts is then stored once, however many
        registers (and, later, replay buffers) hold it.
        """
        self.value = np.asarray(activation, dtype=np.float32)
        return self.value.size * 32

    def read(self) -> np.ndarray | None:
        return self.value


class ReplayBuffer:
    """Append-only history of ingested inputs with a cyclic read cursor.

    Entries are tuples of per-guest float32 slices (often shared with the
    registers and with other hosts' buffers, so staleness and redundancy
    cost no extra memory); read_next concatenates to a float64 batch.
    """

    def __init__(self):
        self.entries: list[tuple[np.ndarray, ...]] = []
        self.cursor = 0

    def __len__(self) -> int:
        return len(self.entries)

    def append(self, slices: tuple[np.ndarray, ...]) -> None:
        self.entries.append(slices)

    def read_next(self) -> np.ndarray:
        if not self.entries:
            raise RuntimeError("replay buffer is empty")
        entry = self.entries[self.cursor % len(self.entries)]
        self.cursor += 1
        return np.concatenate(
            [s.astype(np.float64) for s in entry], axis=1
        )


class Guest:
    """Unsupervised party holding one vertical slice of the feature space."""

    def __init__(
        self,
        gid: int,
        encoder: Mlp,
        decoder: Mlp,
        feature_columns: np.ndarray,
        optimizer: Adam,
    ):
        if decoder.out_dim != encoder.in_dim or decoder.in_dim != encoder.out_dim:
            raise ValueError(
                f"decoder {decoder.in_dim}->{decoder.out_dim} does not mirror "
                f"encoder {encoder.in_dim}->{encoder.out_dim}"
            )
        self.id = gid
        self.encoder = encoder
        self.decoder = decoder
        self.feature_columns = np.asarray(feature_columns, dtype=np.int64)
        self.optimizer = optimizer
        self.dataset: Dataset | None = None
        self.bits_sent = 0

    def train_round(
        self,
        x: np.ndarray,
        communicate: bool,
        hosts: list["Host"],
        link: LinkState,
    ) -> float | None:
        """One batch of local training, with register writes when communicating.

        Polls own availability first: a dead guest neither writes nor updates.
        Writes go out before the update, so hosts see the activation that the
        current parameters produced. Host availability never gates the update.
        """
        if not link.poll_guest(self.id):
            return None
        activation = self.encoder.forward(x)
        if communicate:
            # one wire buffer per round; every receiving host aliases it
            wire = np.asarray(activation, dtype=np.float32)
            for host in hosts:
                if link.poll_connection(self.id, host.id):
                    self.bits_sent += host.registers[self.id].write(wire)
        recon = self.decoder.forward(activation)
        loss, grad = mse_loss(recon, x)
        grad_mid, dec_grads = self.decoder.backward(grad)
        _, enc_grads = self.encoder.backward(grad_mid)
        self.optimizer.step(enc_grads + dec_grads)
        return loss


class Host:
    """Aggregating party: compresses concatenated guest activations.

    Never sends anything back to guests; its only inputs are register reads.
    """

    def __init__(self, hid: int, encoder: Mlp, decoder: Mlp, n_guests: int,
                 optimizer: Adam):
        if decoder.out_dim != encoder.in_dim or decoder.in_dim != encoder.out_dim:
            raise ValueError(
                f"decoder {decoder.in_dim}->{decoder.out_dim} does not mirror "
                f"encoder {encoder.in_dim}->{encoder.out_dim}"
            )
        self.id = hid
        self.encoder = encoder
        self.decoder = decoder
        self.registers = [CommRegister(writer=i, reader=hid) for i in range(n_guests)]
        self.replay = ReplayBuffer()
        self.optimizer = optimizer

    def ingest(self, communicate: bool = True) -> bool:
        """Concatenate current register contents and append to the buffer.

        Returns False without appending when any register is still cold
        (its guest has never managed a write). Slices can be stale and may
        carry different row counts near epoch boundaries; rows are trimmed
        to the shortest slice so the concatenation stays rectangular.
        """
        if not communicate:
            return False
        values = [r.read() for r in self.registers]
        if any(v is None for v in values):
            return False
        rows = min(v.shape[0] for v in values)
        self.replay.append(tuple(v[:rows] for v in values))
        return True

    def train_round(self, update: bool = True) -> float | None:
        """Train on the next buffer entry; the read advances even when the
        host is down (update=False), mirroring a crashed worker losing its
        turn rather than pausing the schedule."""
        if not len(self.replay):
            raise RuntimeError("replay buffer is empty")
        batch = self.replay.read_next()
        if not update:
            return None
        code = self.encoder.forward(batch)
        recon = self.decoder.forward(code)
        loss, grad = mse_loss(recon, batch)
        grad_mid, dec_grads = self.decoder.backward(grad)
        _, enc_grads = self.encoder.backward(grad_mid)
        self.optimizer.step(enc_grads + dec_grads)
        return loss


class Owner:
    """Label holder: a supervised head over frozen guest+host encodings."""

    def __init__(self, classifier: Mlp, optimizer: SgdMomentum):
        self.classifier = classifier
        self.optimizer = optimizer

    def train_epoch_on(
        self,
        features: np.ndarray,
        labels: np.ndarray,
        plan: BatchPlan,
        epoch: int,
        row_of_id: dict[int, int],
    ) -> float:
        """One epoch of SGD on precomputed encodings, keyed by entity id."""
        total = 0.0
        count = 0
        for ids in _plan_batches(plan, epoch):
            rows = np.array([row_of_id[int(e)] for e in ids], dtype=np.intp)
            logits = self.classifier.forward(features[rows])
            loss, grad = cross_entropy_loss(logits, labels[rows])
            _, grads = self.classifier.backward(grad)
            self.optimizer.step(grads)
            total += loss * len(ids)
            count += len(ids)
        return total / count


def _plan_batches(plan: BatchPlan, epoch: int) -> list[np.ndarray]:
    order = plan.ordering(epoch)
    return [order[i : i + plan.batch_size] for i in range(0, order.size, plan.batch_size)]


_ENCODE_CHUNK = 8192  # rows per inference block; bounds peak activation memory


def encode_entity(
    guests: list[Guest], hosts: list[Host], x_full: np.ndarray,
    chunk: int | None = None,
) -> np.ndarray:
    """Full-width rows -> concatenated host encodings, in ascending id order.

    Used for owner training and inference, which the protocol assumes run
    fault-free on frozen guest and host parameters. Rows stream through the
    stateless inference path in blocks so a 60k-row encode does not allocate
    row-count-sized backward caches in every layer.
    """
    x_full = np.asarray(x_full, dtype=np.float64)
    step = chunk if chunk is not None else _ENCODE_CHUNK
    if step < 1:
        raise ValueError("chunk must be positive")
    blocks = []
    for lo in range(0, max(x_full.shape[0], 1), step):
        part = x_full[lo : lo + step]
        codes = [g.encoder.infer(part[:, g.feature_columns]) for g in guests]
        split_layer = np.concatenate(codes, axis=1)
        blocks.append(
            np.concatenate([h.encoder.infer(split_layer) for h in hosts], axis=1)
        )
    return blocks[0] if len(blocks) == 1 else np.concatenate(blocks, axis=0)


def owner_train_epoch(
    owner: Owner,
    guests: list[Guest],
    hosts: list[Host],
    aligned: Dataset,
    plan: BatchPlan,
    epoch: int = 0,
) -> float:
    """One supervised epoch over the aligned set, encoding on the fly.

    Touches only the owner's parameters; guests and hosts stay frozen.
    """
    if aligned.labels is None or len(aligned) == 0:
        raise ValueError("owner training needs a nonempty labeled aligned set")
    total = 0.0
    count = 0
    for ids in _plan_batches(plan, epoch):
        rows = aligned.rows_for(ids)
        feats = encode_entity(guests, hosts, aligned.features[rows])
        logits = owner.classifier.forward(feats)
        loss, grad = cross_entropy_loss(logits, aligned.labels[rows])
        _, grads = owner.classifier.backward(grad)
        owner.optimizer.step(grads)
        total += loss * len(ids)
        count += len(ids)
    return total / count


def predict(
    owner: Owner, guests: list[Guest], hosts: list[Host], x_full: np.ndarray
) -> np.ndarray:
    """Class indices for full-width rows; argmax ties go to the lowest index."""
    logits = owner.classifier.infer(encode_entity(guests, hosts, x_full))
    return np.argmax(logits, axis=1)
