"""Attacker-side virtual replica: KF-densified corpus, trained predictor, queries.

The eavesdropped measurement stream is filtered through the attacker's linear
model to fill collection gaps and to supply smoothed state labels; a
feed-forward network then learns the map (measurements, lead time T) -> future
state readout. Two queries are served: the predicted trajectory under a
candidate injection (for offline attack evaluation, bounded by alpha_max) and
the predicted normal trajectory (for masking).
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InsufficientDataError,
    InvalidConfigError,
    InvalidInputError,
    InvalidQueryError,
    StealthViolationError,
)
from .kalman import KalmanState, impute_series
from .neural import (
    LayerSpec,
    TrainConfig,
    TrainedModel,
    train,
    split_dataset,
    weights_from_bytes,
    weights_to_bytes,
)
from .plantmodel import ObserverModel

BUNDLE_FORMAT = 1


# ---------------------------------------------------------------------------
# measurement containers
# ---------------------------------------------------------------------------

@dataclass
class MeasurementVector:
    """One timestamped sample over a canonical (sorted, unique) sensor set."""

    values: np.ndarray
    sensor_ids: tuple
    timestamp: float

    def __post_init__(self):
        self.values = np.atleast_1d(np.asarray(self.values, dtype=float))
        self.sensor_ids = tuple(self.sensor_ids)
        if len(self.sensor_ids) != self.values.shape[0]:
            raise InvalidInputError("values and sensor_ids lengths differ")
        if len(set(self.sensor_ids)) != len(self.sensor_ids):
            raise InvalidInputError("sensor ids must be unique")
        if list(self.sensor_ids) != sorted(self.sensor_ids):
            raise InvalidInputError("sensor ids must be canonically sorted")

    def select(self, ids):
        index = {s: k for k, s in enumerate(self.sensor_ids)}
        try:
            return np.array([self.values[index[s]] for s in ids])
        except KeyError as missing:
            raise InvalidQueryError(f"sensor {missing} absent from measurement") from None


@dataclass
class MeasurementSeries:
    """Regularly sampled stream with explicit gaps (observed mask)."""

    sensor_ids: tuple
    t0: float
    dt: float
    values: np.ndarray    # (L, m); rows at unobserved steps are ignored
    observed: np.ndarray  # (L,) bool

    def __post_init__(self):
        self.sensor_ids = tuple(self.sensor_ids)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        self.observed = np.asarray(self.observed, dtype=bool)
        if self.values.shape != (self.observed.shape[0], len(self.sensor_ids)):
            raise InvalidInputError("series shapes are inconsistent")
        if self.dt <= 0:
            raise InvalidInputError("series dt must be positive")

    def __len__(self):
        return self.observed.shape[0]


@dataclass
class AttackVector:
    """Per-sensor additive bias; magnitude is the max-norm over its targets."""

    deltas: np.ndarray
    target_ids: tuple

    def __post_init__(self):
        self.deltas = np.atleast_1d(np.asarray(self.deltas, dtype=float))
        self.target_ids = tuple(self.target_ids)
        if self.deltas.shape[0] != len(self.target_ids):
            raise InvalidInputError("deltas and target_ids lengths differ")
        if len(set(self.target_ids)) != len(self.target_ids):
            raise InvalidInputError("attack target ids must be unique")

    @property
    def magnitude(self):
        return float(np.max(np.abs(self.deltas))) if self.deltas.size else 0.0


@dataclass
class PredictionQuery:
    """Measurement snapshot + lead time, optionally carrying an injection."""

    m: MeasurementVector
    horizon: float
    alpha: AttackVector | None = None

    def __post_init__(self):
        if self.horizon <= 0:
            raise InvalidQueryError("prediction horizon must be positive")
        if self.alpha is not None:
            known = set(self.m.sensor_ids)
            for s in self.alpha.target_ids:
                if s not in known:
                    raise InvalidQueryError(
                        f"attack sensor '{s}' absent from the query measurement")


@dataclass
class PredictedState:
    """Predicted per-DG (freq, volt, dp*p, dq*q) readout at the queried horizon."""

    values: np.ndarray
    labels: tuple
    horizon_used: float
    model_version: str

    def __post_init__(self):
        if not self.model_version:
            raise InvalidInputError("model_version must be nonempty")
        if not np.isfinite(self.values).all():
            raise InvalidInputError("predicted values must be finite")

    def as_dict(self):
        return dict(zip(self.labels, self.values.tolist()))


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

@dataclass
class Corpus:
    """Supervised pairs ((m(t), T) -> readout deviation at t+T)."""

    inputs: np.ndarray
    targets: np.ndarray
    sensor_ids: tuple
    horizons: tuple
    readout_op: np.ndarray
    readout_labels: tuple
    dt: float
    n_nominal: int = 0
    n_excluded: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.inputs.shape[0]


def build_corpus(series: MeasurementSeries, observer: ObserverModel, horizons,
                 min_samples=1000, max_gap_steps=100) -> Corpus:
    """Impute the stream through the attacker's KF and emit labeled pairs.

    For every horizon T and every base step t, the input is the gap-filled
    measurement at t with T appended, the label the KF state readout at t+T.
    Steps inside gaps longer than max_gap_steps are low quality and samples
    touching them are dropped. Dataset order is horizons-major, time-minor.
    """
    if tuple(series.sensor_ids) != tuple(observer.sensor_ids):
        raise InvalidConfigError("series sensors do not match the observer model")
    horizons = tuple(float(t) for t in horizons)
    if not horizons:
        raise InvalidConfigError("need at least one prediction horizon")
    if any(t <= 0 for t in horizons):
        raise InvalidConfigError("horizons must be positive")
    length = len(series)
    if length < min_samples:
        raise InsufficientDataError(
            f"stream has {length} samples, need at least {min_samples}",
            required=min_samples)
    steps = [int(round(t / series.dt)) for t in horizons]
    if any(k < 1 for k in steps):
        raise InvalidConfigError("every horizon must be at least one sample period")
    k_max = max(steps)
    if length <= k_max:
        raise InsufficientDataError(
            f"stream shorter than the longest horizon ({k_max} steps)",
            required=k_max + 1)

    gaps = [None if not obs else row
            for row, obs in zip(observer.deviations(series.values), series.observed)]
    imputed = impute_series(
        observer.linear, gaps,
        ks0=KalmanState(np.zeros(observer.linear.n_states),
                        np.diag(observer.state_scale ** 2)))
    filled = np.where(series.observed[:, None], series.values,
                      imputed.measurements + observer.m_op)
    readout_dev = imputed.states @ observer.readout.T

    low_quality = _long_gap_mask(series.observed, max_gap_steps)
    base = length - k_max
    inputs, targets = [], []
    n_excluded = 0
    for t_lead, k in zip(horizons, steps):
        for t in range(base):
            if low_quality[t] or low_quality[t + k]:
                n_excluded += 1
                continue
            inputs.append(np.concatenate([filled[t], [t_lead]]))
            targets.append(readout_dev[t + k])
    if not inputs:
        raise InsufficientDataError("every sample fell inside long gaps",
                                    required=min_samples)
    return Corpus(inputs=np.vstack(inputs), targets=np.vstack(targets),
                  sensor_ids=tuple(series.sensor_ids), horizons=horizons,
                  readout_op=observer.readout_op.copy(),
                  readout_labels=tuple(observer.readout_labels),
                  dt=series.dt, n_nominal=len(horizons) * base,
                  n_excluded=n_excluded,
                  meta={"cov_trace_mean": float(imputed.cov_trace.mean())})


def _long_gap_mask(observed, max_gap_steps):
    length = observed.shape[0]
    mask = np.zeros(length, dtype=bool)
    run_start = None
    for t in range(length + 1):
        missing = t < length and not observed[t]
        if missing and run_start is None:
            run_start = t
        elif not missing and run_start is not None:
            if t - run_start > max_gap_steps:
                mask[run_start:t] = True
            run_start = None
    return mask


def build_raw_corpus(series: MeasurementSeries, observer: ObserverModel,
                     horizons, min_samples=1000) -> Corpus:
    """Baseline corpus without KF densification: only doubly-observed pairs.

    Labels come straight from the (noisy) measurements at t+T mapped through
    the sensor-to-readout relation; used to quantify what the hybrid adds.
    """
    if tuple(series.sensor_ids) != tuple(observer.sensor_ids):
        raise InvalidConfigError("series sensors do not match the observer model")
    horizons = tuple(float(t) for t in horizons)
    length = len(series)
    if length < min_samples:
        raise InsufficientDataError(
            f"stream has {length} samples, need at least {min_samples}",
            required=min_samples)
    steps = [int(round(t / series.dt)) for t in horizons]
    k_max = max(steps)
    # least-squares sensor->readout map at the operating point
    h = observer.linear.h
    g = observer.readout
    to_readout = g @ np.linalg.pinv(h)
    inputs, targets = [], []
    for t_lead, k in zip(horizons, steps):
        for t in range(length - k_max):
            if not (series.observed[t] and series.observed[t + k]):
                continue
            dev = series.values[t + k] - observer.m_op
            inputs.append(np.concatenate([series.values[t], [t_lead]]))
            targets.append(to_readout @ dev)
    if not inputs:
        raise InsufficientDataError("no doubly-observed pairs in the stream",
                                    required=min_samples)
    return Corpus(inputs=np.vstack(inputs), targets=np.vstack(targets),
                  sensor_ids=tuple(series.sensor_ids), horizons=horizons,
                  readout_op=observer.readout_op.copy(),
                  readout_labels=tuple(observer.readout_labels),
                  dt=series.dt, n_nominal=len(horizons) * (length - k_max),
                  n_excluded=0, meta={"raw": True})


# ---------------------------------------------------------------------------
# trained model bundle
# ---------------------------------------------------------------------------

@dataclass
class VddmModel:
    """Trained predictor plus everything needed to serve and audit queries."""

    trained: TrainedModel
    sensor_ids: tuple
    horizons: tuple
    readout_op: np.ndarray
    readout_labels: tuple
    dt: float
    model_version: str
    history: list
    best_epoch: int
    train_seed: int

    @property
    def max_horizon(self):
        return max(self.horizons)


def _fingerprint(corpus: Corpus, spec: LayerSpec, cfg: TrainConfig):
    digest = hashlib.sha256()
    digest.update(corpus.inputs.tobytes())
    digest.update(corpus.targets.tobytes())
    digest.update(json.dumps({
        "sensors": list(corpus.sensor_ids),
        "horizons": list(corpus.horizons),
        "sizes": spec.sizes,
        "activation": spec.activation,
        "eta": cfg.eta, "epochs": cfg.epochs, "batch": cfg.batch_size,
        "seed": cfg.seed, "patience": cfg.patience,
    }, sort_keys=True).encode())
    digest.update(corpus.readout_op.tobytes())
    return digest.hexdigest()


def train_vddm(corpus: Corpus, cfg: TrainConfig, hidden=(32, 32),
               activation="tanh") -> VddmModel:
    """Fit the state predictor on a corpus; the version hash pins its inputs."""
    spec = LayerSpec(
        sizes=[corpus.inputs.shape[1], *hidden, corpus.targets.shape[1]],
        activation=activation)
    version = _fingerprint(corpus, spec, cfg)
    trained, history = train(spec, cfg, corpus.inputs, corpus.targets)
    best_epoch = int(np.argmin([v for _, v in history]))
    return VddmModel(trained=trained, sensor_ids=tuple(corpus.sensor_ids),
                     horizons=tuple(corpus.horizons),
                     readout_op=corpus.readout_op.copy(),
                     readout_labels=tuple(corpus.readout_labels),
                     dt=corpus.dt, model_version=version,
                     history=history, best_epoch=best_epoch,
                     train_seed=cfg.seed)


def _query_inputs(model: VddmModel, query: PredictionQuery, apply_alpha):
    have = set(query.m.sensor_ids)
    missing = [s for s in model.sensor_ids if s not in have]
    if missing:
        raise InvalidQueryError(
            f"query lacks sensors the model was trained on: {missing}")
    values = query.m.select(model.sensor_ids)
    if apply_alpha and query.alpha is not None:
        index = {s: k for k, s in enumerate(model.sensor_ids)}
        for s, d in zip(query.alpha.target_ids, query.alpha.deltas):
            if s in index:
                values[index[s]] = values[index[s]] + d
    return np.concatenate([values, [query.horizon]])


def predict_state(model: VddmModel, query: PredictionQuery) -> PredictedState:
    """Predicted normal trajectory readout; ignores any attached injection."""
    x = _query_inputs(model, query, apply_alpha=False)
    out = model.readout_op + model.trained.predict(x)
    return PredictedState(values=out, labels=model.readout_labels,
                          horizon_used=query.horizon,
                          model_version=model.model_version)


def evaluate_attack(model: VddmModel, query: PredictionQuery,
                    alpha_max) -> PredictedState:
    """Predicted readout with the injection applied to the measurement.

    Refuses vectors whose max-norm exceeds alpha_max (boundary inclusive);
    offline evaluation happens before anything touches the plant.
    """
    if query.alpha is None:
        raise InvalidQueryError("evaluate_attack needs an attack vector")
    if query.alpha.magnitude > alpha_max:
        raise StealthViolationError(
            f"|alpha| = {query.alpha.magnitude:.6g} exceeds alpha_max = {alpha_max:.6g}")
    x = _query_inputs(model, query, apply_alpha=True)
    out = model.readout_op + model.trained.predict(x)
    return PredictedState(values=out, labels=model.readout_labels,
                          horizon_used=query.horizon,
                          model_version=model.model_version)


# ---------------------------------------------------------------------------
# fidelity
# ---------------------------------------------------------------------------

@dataclass
class FidelityReport:
    train_mse: float
    val_mse: float
    test_mse: float
    per_horizon: dict
    model_version: str


def fidelity_report(model: VddmModel, corpus: Corpus, truth_reported,
                    truth_readout) -> FidelityReport:
    """MSE on the corpus train/val splits and on a held-out simulator trace.

    truth_reported : (L, m) reported sensor values aligned to model.sensor_ids.
    truth_readout : (L, R) true readout values from the simulator.
    """
    truth_reported = np.atleast_2d(np.asarray(truth_reported, dtype=float))
    truth_readout = np.atleast_2d(np.asarray(truth_readout, dtype=float))
    if truth_reported.shape[1] != len(model.sensor_ids):
        raise InvalidInputError("trace sensor width does not match the model")
    if truth_reported.shape[0] != truth_readout.shape[0]:
        raise InvalidInputError("trace lengths disagree")
    idx_train, idx_val, _ = split_dataset(len(corpus), model.train_seed)
    train_mse = model.trained.mse(corpus.inputs[idx_train], corpus.targets[idx_train])
    val_mse = (model.trained.mse(corpus.inputs[idx_val], corpus.targets[idx_val])
               if idx_val.size else train_mse)
    per_horizon = {}
    total_err, total_n = 0.0, 0
    length = truth_reported.shape[0]
    for t_lead in model.horizons:
        k = int(round(t_lead / model.dt))
        if length <= k:
            continue
        base = np.arange(length - k)
        x = np.column_stack([truth_reported[base], np.full(base.size, t_lead)])
        pred = model.readout_op + np.atleast_2d(model.trained.predict(x))
        err = np.sum((pred - truth_readout[base + k]) ** 2, axis=1)
        per_horizon[t_lead] = float(err.mean())
        total_err += float(err.sum())
        total_n += err.size
    if total_n == 0:
        raise InvalidInputError("held-out trace shorter than every horizon")
    return FidelityReport(train_mse=train_mse, val_mse=val_mse,
                          test_mse=total_err / total_n,
                          per_horizon=per_horizon,
                          model_version=model.model_version)


# ---------------------------------------------------------------------------
# on-disk bundle
# ---------------------------------------------------------------------------

def save_bundle(model: VddmModel, path):
    payload = {
        "format": BUNDLE_FORMAT,
        "model_version": model.model_version,
        "sensor_ids": list(model.sensor_ids),
        "horizons": list(model.horizons),
        "readout_op": model.readout_op.tolist(),
        "readout_labels": list(model.readout_labels),
        "dt": model.dt,
        "history": [[float(a), float(b)] for a, b in model.history],
        "best_epoch": model.best_epoch,
        "train_seed": model.train_seed,
        "weights": base64.b64encode(weights_to_bytes(model.trained)).decode(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_bundle(path) -> VddmModel:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != BUNDLE_FORMAT:
        raise InvalidConfigError(f"unsupported bundle format {payload.get('format')}")
    trained = weights_from_bytes(base64.b64decode(payload["weights"]))
    return VddmModel(trained=trained,
                     sensor_ids=tuple(payload["sensor_ids"]),
                     horizons=tuple(payload["horizons"]),
                     readout_op=np.array(payload["readout_op"], dtype=float),
                     readout_labels=tuple(payload["readout_labels"]),
                     dt=float(payload["dt"]),
                     model_version=payload["model_version"],
                     history=[tuple(h) for h in payload["history"]],
                     best_epoch=int(payload["best_epoch"]),
                     train_seed=int(payload["train_seed"]))
