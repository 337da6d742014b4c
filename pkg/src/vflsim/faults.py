"""Crash-fault injection via two-state (alive/dead) Markov processes.

Connections, guests, and hosts each carry an availability flag. Every poll
draws one uniform sample for that entity and applies the transition first,
then reports the new state, so a revived entity is usable on the poll that
revives it. Each entity owns an independent random stream split from the
fault seed, which keeps traces stable when other entities are added or
polled more often.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

_GUEST, _HOST, _CONNECTION = 0, 1, 2


@dataclass(frozen=True)
class FaultConfig:
    """Down/up transition probabilities per entity kind.

    down_rate: P(alive -> dead) per poll. up_rate: P(dead -> alive) per poll.
    """

    connection_down: float = 0.0
    connection_up: float = 1.0
    guest_down: float = 0.0
    guest_up: float = 1.0
    host_down: float = 0.0
    host_up: float = 1.0

    def __post_init__(self):
        for name in (
            "connection_down",
            "connection_up",
            "guest_down",
            "guest_up",
            "host_down",
            "host_up",
        ):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ConfigError(f"fault rate {name}={rate} must lie in [0, 1]")

    @property
    def fault_free(self) -> bool:
        return (
            self.connection_down == 0.0
            and self.guest_down == 0.0
            and self.host_down == 0.0
        )


def sample_transition(
    alive: bool, down_rate: float, up_rate: float, rng: np.random.Generator
) -> bool:
    """Advance one availability flag by one step, always consuming one draw."""
    u = rng.uniform()
    if alive:
        return u >= down_rate
    return u < up_rate


class LinkState:
    """Availability flags for every guest, host, and guest-host connection.

    Owned and mutated serially by the orchestrator; all flags start alive.
    A composed connection poll reports usability, which requires the
    connection itself, its guest, and its host to all be up.
    """

    def __init__(self, cfg: FaultConfig, n_guests: int, n_hosts: int, seed: int):
        if n_guests < 1 or n_hosts < 1:
            raise ConfigError(
                f"need at least one guest and one host, got {n_guests}, {n_hosts}"
            )
        self.cfg = cfg
        self.n_guests = n_guests
        self.n_hosts = n_hosts
        self.guest_up = np.ones(n_guests, dtype=bool)
        self.host_up = np.ones(n_hosts, dtype=bool)
        self.conn_up = np.ones((n_guests, n_hosts), dtype=bool)
        self._guest_rng = [
            np.random.default_rng(np.random.SeedSequence([seed, _GUEST, i]))
            for i in range(n_guests)
        ]
        self._host_rng = [
            np.random.default_rng(np.random.SeedSequence([seed, _HOST, j]))
            for j in range(n_hosts)
        ]
        self._conn_rng = [
            [
                np.random.default_rng(np.random.SeedSequence([seed, _CONNECTION, i, j]))
                for j in range(n_hosts)
            ]
            for i in range(n_guests)
        ]

    def _check_guest(self, i: int) -> None:
        if not 0 <= i < self.n_guests:
            raise IndexError(f"unknown guest {i}, have {self.n_guests}")

    def _check_host(self, j: int) -> None:
        if not 0 <= j < self.n_hosts:
            raise IndexError(f"unknown host {j}, have {self.n_hosts}")

    def poll_guest(self, i: int) -> bool:
        self._check_guest(i)
        self.guest_up[i] = sample_transition(
            self.guest_up[i], self.cfg.guest_down, self.cfg.guest_up, self._guest_rng[i]
        )
        return bool(self.guest_up[i])

    def poll_host(self, j: int) -> bool:
        self._check_host(j)
        self.host_up[j] = sample_transition(
            self.host_up[j], self.cfg.host_down, self.cfg.host_up, self._host_rng[j]
        )
        return bool(self.host_up[j])

    def poll_connection(self, i: int, j: int, compose: bool = True) -> bool:
        """Advance the (guest i, host j) connection flag and report usability.

        With compose=True (the default) the result also requires the guest
        and host flags as they currently stand; those flags are not advanced
        here, each entity transitions only on its own polls.
        """
        self._check_guest(i)
        self._check_host(j)
        self.conn_up[i, j] = sample_transition(
            self.conn_up[i, j],
            self.cfg.connection_down,
            self.cfg.connection_up,
            self._conn_rng[i][j],
        )
        if compose:
            return bool(self.conn_up[i, j] and self.guest_up[i] and self.host_up[j])
        return bool(self.conn_up[i, j])
