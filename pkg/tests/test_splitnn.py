"""End-to-end split baseline: equivalence to a monolithic net, policies."""

import numpy as np
import pytest

from vflsim.faults import FaultConfig, LinkState
from vflsim.nn import (
    Activation,
    Adam,
    LeakyRelu,
    Relu,
    SgdMomentum,
    cross_entropy_loss,
    init_mlp,
)
from vflsim.splitnn import (
    SplitGuest,
    SplitNnSystem,
    TimeoutPolicy,
    run_splitnn_epoch,
    splitnn_backward_step,
    splitnn_forward_step,
    splitnn_predict,
)


class ScriptedLink:
    """Duck-typed LinkState double: scripted poll outcomes, default alive."""

    def __init__(self, guest=None, host=None, conn=None):
        self.guest = {k: list(v) for k, v in (guest or {}).items()}
        self.host = {k: list(v) for k, v in (host or {}).items()}
        self.conn = {k: list(v) for k, v in (conn or {}).items()}

    @staticmethod
    def _pop(table, key):
        q = table.get(key)
        return q.pop(0) if q else True

    def poll_guest(self, i):
        return self._pop(self.guest, i)

    def poll_host(self, j):
        return self._pop(self.host, j)

    def poll_connection(self, i, j, compose=True):
        return self._pop(self.conn, i)


def make_system(n_guests=2, slice_width=2, code=2, classes=3, seed=0):
    rng = np.random.default_rng(seed)
    guests = []
    for i in range(n_guests):
        enc = init_mlp([slice_width, 3, code], [Relu(), Relu()], rng)
        cols = np.arange(i * slice_width, (i + 1) * slice_width)
        guests.append(
            SplitGuest(i, enc, cols,
                       SgdMomentum(enc.params(), lr=0.05, momentum=0.5))
        )
    stack = init_mlp(
        [n_guests * code, 4, classes], [LeakyRelu(0.01), Activation()], rng
    )
    return SplitNnSystem(guests, stack, Adam(stack.params(), lr=1e-3))


def toy_batch(n_guests=2, slice_width=2, rows=6, classes=3, seed=1):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(rows, n_guests * slice_width))
    y = rng.integers(0, classes, size=rows)
    return x, y


def no_faults(n_guests, seed=0):
    return LinkState(FaultConfig(), n_guests, 1, seed=seed)


# ---------------------------------------------------------------------------
# equivalence oracles


def manual_training_step(sys, x, y):
    """Straight-line reimplementation of one fault-free training step."""
    slices = [g.encoder.forward(x[:, g.feature_columns]) for g in sys.guests]
    logits = sys.host_stack.forward(np.concatenate(slices, axis=1))
    loss, grad = cross_entropy_loss(logits, y)
    split_grad, host_grads = sys.host_stack.backward(grad)
    sys.host_optimizer.step(host_grads)
    offset = 0
    for g in sys.guests:
        dim = g.encoder.out_dim
        _, grads = g.encoder.backward(split_grad[:, offset:offset + dim])
        g.optimizer.step(grads)
        offset += dim
    return loss


def all_params(sys):
    out = []
    for g in sys.guests:
        out.extend(g.encoder.params())
    out.extend(sys.host_stack.params())
    return out


@pytest.mark.parametrize("n_guests", [1, 2, 3])
def test_fault_free_steps_match_straight_line_code(n_guests):
    # the split orchestration must be pure bookkeeping: identical floats to
    # a monolithic implementation, not merely close
    sys_a = make_system(n_guests=n_guests, seed=42)
    sys_b = make_system(n_guests=n_guests, seed=42)
    x, y = toy_batch(n_guests=n_guests, seed=2)
    link = no_faults(n_guests)

    for _ in range(5):
        out = splitnn_forward_step(sys_a, x, link, TimeoutPolicy.SKIP)
        assert out.status == "ok"
        loss_a, verdict = splitnn_backward_step(
            sys_a, out, y, link, TimeoutPolicy.SKIP
        )
        assert verdict == "ok"
        loss_b = manual_training_step(sys_b, x, y)
        assert loss_a == loss_b

    for p, q in zip(all_params(sys_a), all_params(sys_b)):
        assert np.array_equal(p, q)


def test_epoch_driver_matches_manual_batches():
    sys_a = make_system(seed=7)
    sys_b = make_system(seed=7)
    rng = np.random.default_rng(3)
    feats = rng.uniform(size=(10, 4))
    labels = rng.integers(0, 3, size=10)
    ids = np.arange(10, dtype=np.int64)
    row_of = {int(i): i for i in ids}
    batches = [ids[:4], ids[4:8], ids[8:]]

    stats = run_splitnn_epoch(
        sys_a, feats, labels, batches, row_of, no_faults(2),
        TimeoutPolicy.SKIP,
    )
    assert stats.updated_batches == 3
    assert stats.skipped_batches == 0 and not stats.halted

    losses = [manual_training_step(sys_b, feats[b], labels[b]) for b in batches]
    assert stats.mean_loss == pytest.approx(np.mean(losses), abs=1e-15)
    for p, q in zip(all_params(sys_a), all_params(sys_b)):
        assert np.array_equal(p, q)


# ---------------------------------------------------------------------------
# timeout policies under scripted faults


def test_wait_halts_on_missing_forward_slice():
    sys = make_system()
    x, y = toy_batch()
    before = [p.copy() for p in all_params(sys)]
    link = ScriptedLink(guest={1: [False]})
    out = splitnn_forward_step(sys, x, link, TimeoutPolicy.WAIT)
    assert out.status == "halted"
    assert out.fresh == [True, False]
    for p, b in zip(all_params(sys), before):
        assert np.array_equal(p, b)


def test_skip_drops_batch_then_recovers():
    sys = make_system()
    x, y = toy_batch()
    before = [p.copy() for p in all_params(sys)]
    link = ScriptedLink(guest={0: [False, True]})
    out = splitnn_forward_step(sys, x, link, TimeoutPolicy.SKIP)
    assert out.status == "skipped"
    for p, b in zip(all_params(sys), before):
        assert np.array_equal(p, b)

    out = splitnn_forward_step(sys, x, link, TimeoutPolicy.SKIP)
    assert out.status == "ok"
    _, verdict = splitnn_backward_step(sys, out, y, link, TimeoutPolicy.SKIP)
    assert verdict == "ok"
    assert any(not np.array_equal(p, b)
               for p, b in zip(all_params(sys), before))


def test_zeros_imputes_and_discards_dead_guest_gradient():
    sys = make_system()
    x, y = toy_batch()
    dead_before = sys.guests[1].encoder.snapshot()
    live_before = sys.guests[0].encoder.snapshot()
    stack_before = sys.host_stack.snapshot()

    link = ScriptedLink(guest={1: [False]})
    out = splitnn_forward_step(sys, x, link, TimeoutPolicy.ZEROS)
    assert out.status == "ok"
    assert out.zero_imputed == 1
    loss, verdict = splitnn_backward_step(sys, out, y, link,
                                          TimeoutPolicy.ZEROS)
    assert verdict == "ok" and loss > 0
    # host and the live guest updated; the dead guest untouched
    assert any(not np.array_equal(p, b)
               for p, b in zip(sys.host_stack.params(), stack_before))
    assert any(not np.array_equal(p, b)
               for p, b in zip(sys.guests[0].encoder.params(), live_before))
    for p, b in zip(sys.guests[1].encoder.params(), dead_before):
        assert np.array_equal(p, b)


def test_zeros_forward_output_matches_zero_slice():
    sys = make_system()
    x, _ = toy_batch()
    link = ScriptedLink(guest={1: [False]})
    out = splitnn_forward_step(sys, x, link, TimeoutPolicy.ZEROS)
    a0 = sys.guests[0].encoder.forward(x[:, :2])
    padded = np.concatenate([a0, np.zeros_like(a0)], axis=1)
    assert np.array_equal(out.logits, sys.host_stack.forward(padded))


def test_dead_host_loses_round_for_everyone():
    sys = make_system()
    x, y = toy_batch()
    before = [p.copy() for p in all_params(sys)]

    link = ScriptedLink(host={0: [False]})
    out = splitnn_forward_step(sys, x, link, TimeoutPolicy.SKIP)
    assert out.status == "ok"
    loss, verdict = splitnn_backward_step(sys, out, y, link,
                                          TimeoutPolicy.SKIP)
    assert (loss, verdict) == (0.0, "skipped")
    for p, b in zip(all_params(sys), before):
        assert np.array_equal(p, b)

    link = ScriptedLink(host={0: [False]})
    out = splitnn_forward_step(sys, x, link, TimeoutPolicy.WAIT)
    _, verdict = splitnn_backward_step(sys, out, y, link, TimeoutPolicy.WAIT)
    assert verdict == "halted"


def test_missed_gradient_skips_one_guest_update():
    sys = make_system()
    x, y = toy_batch()
    g0_before = sys.guests[0].encoder.snapshot()
    g1_before = sys.guests[1].encoder.snapshot()

    # forward fine; at gradient time guest 0's connection drops
    link = ScriptedLink(conn={0: [True, False]})
    out = splitnn_forward_step(sys, x, link, TimeoutPolicy.SKIP)
    assert out.status == "ok"
    _, verdict = splitnn_backward_step(sys, out, y, link, TimeoutPolicy.SKIP)
    assert verdict == "ok"
    for p, b in zip(sys.guests[0].encoder.params(), g0_before):
        assert np.array_equal(p, b)
    assert any(not np.array_equal(p, b)
               for p, b in zip(sys.guests[1].encoder.params(), g1_before))


def test_missed_gradient_under_wait_halts_after_host_update():
    sys = make_system()
    x, y = toy_batch()
    stack_before = sys.host_stack.snapshot()
    link = ScriptedLink(conn={0: [True, False]})
    out = splitnn_forward_step(sys, x, link, TimeoutPolicy.WAIT)
    loss, verdict = splitnn_backward_step(sys, out, y, link,
                                          TimeoutPolicy.WAIT)
    assert verdict == "halted" and loss > 0
    # the halt lands after the host applied its update: the host cannot
    # know delivery failed before it has tried to deliver
    assert any(not np.array_equal(p, b)
               for p, b in zip(sys.host_stack.params(), stack_before))


def test_epoch_driver_halts_early_and_reports():
    sys = make_system()
    rng = np.random.default_rng(5)
    feats = rng.uniform(size=(8, 4))
    labels = rng.integers(0, 3, size=8)
    ids = np.arange(8, dtype=np.int64)
    row_of = {int(i): i for i in ids}
    batches = [ids[:4], ids[4:]]

    # each updated batch polls a guest twice (forward, gradient delivery)
    link = ScriptedLink(guest={0: [True, True, False]})  # dies on batch 2
    stats = run_splitnn_epoch(sys, feats, labels, batches, row_of, link,
                              TimeoutPolicy.WAIT)
    assert stats.halted
    assert stats.updated_batches == 1


def test_forward_bits_accounting():
    sys = make_system()
    x, _ = toy_batch(rows=6)
    link = ScriptedLink(conn={1: [False]})
    splitnn_forward_step(sys, x, link, TimeoutPolicy.ZEROS)
    # guest 0 delivered a 6x2 float32 slice; guest 1's send failed
    assert sys.guests[0].bits_sent == 6 * 2 * 32
    assert sys.guests[1].bits_sent == 0


def test_dead_guest_sends_no_bits():
    sys = make_system()
    x, _ = toy_batch()
    link = ScriptedLink(guest={0: [False], 1: [False]})
    out = splitnn_forward_step(sys, x, link, TimeoutPolicy.SKIP)
    assert out.status == "skipped"
    assert sys.guests[0].bits_sent == 0 and sys.guests[1].bits_sent == 0


def test_system_validates_stack_width():
    sys = make_system()
    rng = np.random.default_rng(0)
    bad_stack = init_mlp([5, 3], [Activation()], rng)
    with pytest.raises(ValueError, match="host stack"):
        SplitNnSystem(sys.guests, bad_stack, Adam(bad_stack.params(), lr=1e-3))


def test_predict_uses_all_guests_fault_free():
    sys = make_system()
    x, _ = toy_batch(rows=5)
    got = splitnn_predict(sys, x)
    codes = [g.encoder.forward(x[:, g.feature_columns]) for g in sys.guests]
    logits = sys.host_stack.forward(np.concatenate(codes, axis=1))
    assert np.array_equal(got, logits.argmax(axis=1))
    assert got.shape == (5,)


def test_backward_requires_ok_forward():
    sys = make_system()
    x, y = toy_batch()
    link = ScriptedLink(guest={0: [False]})
    out = splitnn_forward_step(sys, x, link, TimeoutPolicy.SKIP)
    with pytest.raises(RuntimeError):
        splitnn_backward_step(sys, out, y, link, TimeoutPolicy.SKIP)
