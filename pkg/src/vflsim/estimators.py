"""Scikit-learn style front ends over the two training strategies.

These wrap the simulation engine for plain (X, y) matrices: the estimator
partitions columns into vertical bands, assigns one band per guest, and
trains the full multi-party pipeline in memory. Faults and communication
accounting behave exactly as in config-driven runs.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .agents import predict as _dvfl_predict
from .config import parse_config
from .data import Dataset, even_bands, minmax_normalize
from .experiment import PreparedData, execute_dvfl, execute_splitnn
from .faults import FaultConfig
from .splitnn import splitnn_predict


def _fault_section(faults) -> dict:
    if faults is None:
        return {}
    if isinstance(faults, FaultConfig):
        return {
            "connection_down": faults.connection_down,
            "connection_up": faults.connection_up,
            "guest_down": faults.guest_down,
            "guest_up": faults.guest_up,
            "host_down": faults.host_down,
            "host_up": faults.host_up,
        }
    return dict(faults)


def _resolve_batch(batch_size, n_rows: int) -> int:
    """"auto" keeps at least 16 optimizer steps per epoch (floor 8, cap 128).

    The unsupervised stages are step-hungry: a fixed 128 on a few hundred
    rows leaves the encoders half-trained while the end-to-end baseline
    still manages, which makes default comparisons misleading.
    """
    if batch_size == "auto":
        return max(8, min(128, -(-n_rows // 16)))
    return int(batch_size)


def _derive_widths(n_features: int, n_guests: int,
                   w_g: int | None, w_h: int | None) -> tuple[int, int]:
    """Default split widths.

    Narrow stacks stall on the ln(C) plateau, so default to ~4x the input
    width (at least 8 units per guest) rather than compressing.
    """
    if w_g is None:
        per_guest = max(8, -(-4 * n_features // n_guests))
        w_g = per_guest * n_guests
    if w_h is None:
        w_h = max(1, w_g // 2)
    return w_g, w_h


def _prepared(X: np.ndarray, y_enc: np.ndarray, n_classes: int,
              n_guests: int) -> PreparedData:
    ids = np.arange(X.shape[0], dtype=np.int64)
    train = Dataset(np.asarray(X, dtype=np.float64), y_enc.astype(np.int64), ids)
    bands = even_bands(X.shape[1], n_guests)
    empty = Dataset(np.empty((0, X.shape[1])), np.empty(0, dtype=np.int64),
                    np.empty(0, dtype=np.int64))
    return PreparedData(train, empty, bands, train,
                        [ids for _ in range(n_guests)], n_classes)


class DVFLClassifier(BaseEstimator, ClassifierMixin):
    """Decoupled vertical training: guest and host autoencoders feed a
    supervised head, with no gradients crossing party boundaries.

    Columns of X are split into contiguous bands, one per guest. Set fault
    rates to simulate parties crashing mid-training.

    Inputs are min-max scaled to [0,1] from training-set bounds (the
    reconstruction decoders end in sigmoids); predict reuses the same bounds.
    """

    def __init__(
        self,
        n_guests: int = 2,
        n_hosts: int = 1,
        w_g: int | None = None,
        w_h: int | None = None,
        guest_epochs: int = 20,
        host_epochs: int = 40,
        owner_epochs: int = 60,
        batch_size: int | str = "auto",
        comm_period: int = 1,
        early_stopping: bool = True,
        faults: dict | FaultConfig | None = None,
        training_overrides: dict | None = None,
        seed: int = 0,
    ):
        self.n_guests = n_guests
        self.n_hosts = n_hosts
        self.w_g = w_g
        self.w_h = w_h
        self.guest_epochs = guest_epochs
        self.host_epochs = host_epochs
        self.owner_epochs = owner_epochs
        self.batch_size = batch_size
        self.comm_period = comm_period
        self.early_stopping = early_stopping
        self.faults = faults
        self.training_overrides = training_overrides
        self.seed = seed

    def _config(self, n_rows: int, n_features: int, n_classes: int,
                strategy: str):
        w_g, w_h = _derive_widths(n_features, self.n_guests, self.w_g, self.w_h)
        training = {
            "batch_size": _resolve_batch(self.batch_size, n_rows),
            "guest_epochs": self.guest_epochs,
            "host_epochs": self.host_epochs,
            "owner_epochs": self.owner_epochs,
            "splitnn_epochs": self.owner_epochs,
            "comm_period": self.comm_period,
            "early_stopping": self.early_stopping,
        }
        training.update(self.training_overrides or {})
        return parse_config({
            "strategy": strategy,
            "seed": self.seed,
            # engine consults the dataset kind only for architecture rules;
            # in-memory matrices use the generic ones
            "dataset": {"kind": "blobs", "n_features": n_features,
                        "n_classes": n_classes},
            "model": {"n_guests": self.n_guests, "n_hosts": self.n_hosts,
                      "w_g": w_g, "w_h": w_h},
            "training": training,
            "faults": _fault_section(self.faults),
        })

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        self.scale_lo_ = X.min(axis=0)
        self.scale_hi_ = X.max(axis=0)
        X = minmax_normalize(X, self.scale_lo_, self.scale_hi_)
        cfg = self._config(X.shape[0], X.shape[1], self.classes_.size, "dvfl")
        prep = _prepared(X, y_enc, self.classes_.size, self.n_guests)
        run = execute_dvfl(cfg, prep=prep, evaluate=False)
        if run.metrics.status == "cold-start":
            raise RuntimeError(
                "no host ever received data; lower fault rates or comm_period"
            )
        self.n_features_in_ = X.shape[1]
        self.run_ = run
        self.metrics_ = run.metrics
        return self

    def predict(self, X):
        check_is_fitted(self, "run_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        X = minmax_normalize(np.asarray(X, dtype=np.float64),
                             self.scale_lo_, self.scale_hi_)
        run = self.run_
        raw = _dvfl_predict(run.owner, run.guests, run.hosts, X)
        return self.classes_[raw]


class SplitNNClassifier(BaseEstimator, ClassifierMixin):
    """End-to-end split network baseline with a crash-fault timeout policy.

    policy picks what happens when a guest misses a round: "wait" halts
    training, "skip" drops the batch, "zeros" imputes the missing slice.
    Inputs are min-max scaled to [0,1] from training-set bounds.
    """

    def __init__(
        self,
        n_guests: int = 2,
        w_g: int | None = None,
        w_h: int | None = None,
        epochs: int = 60,
        batch_size: int | str = "auto",
        policy: str = "skip",
        early_stopping: bool = True,
        faults: dict | FaultConfig | None = None,
        training_overrides: dict | None = None,
        seed: int = 0,
    ):
        self.n_guests = n_guests
        self.w_g = w_g
        self.w_h = w_h
        self.epochs = epochs
        self.batch_size = batch_size
        self.policy = policy
        self.early_stopping = early_stopping
        self.faults = faults
        self.training_overrides = training_overrides
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        if self.policy not in ("wait", "skip", "zeros"):
            raise ValueError(f"unknown policy {self.policy!r}")
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        self.scale_lo_ = X.min(axis=0)
        self.scale_hi_ = X.max(axis=0)
        X = minmax_normalize(X, self.scale_lo_, self.scale_hi_)
        w_g, w_h = _derive_widths(X.shape[1], self.n_guests, self.w_g, self.w_h)
        training = {
            "batch_size": _resolve_batch(self.batch_size, X.shape[0]),
            "splitnn_epochs": self.epochs,
            "early_stopping": self.early_stopping,
        }
        training.update(self.training_overrides or {})
        cfg = parse_config({
            "strategy": f"splitnn-{self.policy}",
            "seed": self.seed,
            "dataset": {"kind": "blobs", "n_features": X.shape[1],
                        "n_classes": self.classes_.size},
            "model": {"n_guests": self.n_guests, "w_g": w_g, "w_h": w_h},
            "training": training,
            "faults": _fault_section(self.faults),
        })
        prep = _prepared(X, y_enc, self.classes_.size, self.n_guests)
        run = execute_splitnn(cfg, prep=prep, evaluate=False)
        self.n_features_in_ = X.shape[1]
        self.run_ = run
        self.metrics_ = run.metrics
        self.halted_ = run.metrics.halted
        return self

    def predict(self, X):
        check_is_fitted(self, "run_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        X = minmax_normalize(np.asarray(X, dtype=np.float64),
                             self.scale_lo_, self.scale_hi_)
        raw = splitnn_predict(self.run_.system, X)
        return self.classes_[raw]
