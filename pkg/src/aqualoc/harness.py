"""Monte-Carlo experiment orchestration: SNR sweeps, mismatch sweeps, CRLB rows.

Every artifact is a pure function of (config, master seed): per-trial noise
seeds are derived by seed-sequence composition over the cell coordinates, and
wall-clock timing is off by default so re-runs are byte-identical. Cells whose
convergence rate drops below 0.9 are flagged in the manifest, never silently
averaged; non-converged trials are excluded from the error statistics and
counted in the rate.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .environment import (
    DEFAULT_ENVIRONMENT,
    DEFAULT_REGION,
    DEFAULT_SOURCE,
    Environment,
    Region,
    SourceLocation,
    synthesize_received,
)
from .forward import Checkpoint, ModelParams, NetworkModel, MatchedModel, load_checkpoint
from .localize import GblConfig, SingularFisherError, ToaInitError, crlb, da_gbl, gbl, toa_init
from .signals import AnalyticPulse, NoiseSpec, TimeGrid, add_awgn, make_pulse, snr_to_n0


class ConfigError(ValueError):
    """Raised for invalid or inconsistent experiment configuration."""


METHOD_CRLB = "crlb"
METHOD_GBL_MATCHED = "gbl-matched"
METHOD_GBL_NN = "gbl-nn"
METHOD_DA_GBL = "da-gbl"
KNOWN_METHODS = (METHOD_CRLB, METHOD_GBL_MATCHED, METHOD_GBL_NN, METHOD_DA_GBL)

CSV_HEADER = "method,snr_db,mismatch_m,gamma,trials,rmse_m,mean_err_m,ci_m,conv_rate,wall_s"

DEFAULT_SNR_GRID = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
DEFAULT_MISMATCH_GRID = (
    -20.0, -10.0, -5.0, -2.0, -1.0, -0.5, -0.25,
    0.25, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0,
)
DEFAULT_GAMMA_GRID = (0.0, 0.1, 1.0, 10.0)
CONVERGENCE_FLAG_RATE = 0.9
MATCHED_REFERENCE_FACTOR = 5.0


@dataclass
class ExperimentConfig:
    """Everything a sweep needs; every field JSON-representable."""

    environment: Environment = DEFAULT_ENVIRONMENT
    source: SourceLocation = DEFAULT_SOURCE
    pulse: AnalyticPulse = field(default_factory=make_pulse)
    grid: TimeGrid = field(default_factory=TimeGrid)
    region: Region = DEFAULT_REGION
    snr_db_list: tuple = DEFAULT_SNR_GRID
    mismatch_m_list: tuple = DEFAULT_MISMATCH_GRID
    gamma_list: tuple = DEFAULT_GAMMA_GRID
    methods: tuple = (METHOD_CRLB, METHOD_GBL_MATCHED, METHOD_GBL_NN)
    trials: int = 100
    seed: int = 0
    snr_db: float = 20.0  # operating point for the mismatch sweep
    out_dir: str = "."
    checkpoint: str | None = None
    timing: bool = False

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        for m in self.methods:
            if m not in KNOWN_METHODS:
                raise ConfigError(f"unknown method {m!r}; known: {KNOWN_METHODS}")
        for name in ("snr_db_list", "mismatch_m_list", "gamma_list", "methods"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must be non-empty")

    def to_dict(self) -> dict:
        env = self.environment
        return {
            "environment": {
                "depth": env.depth,
                "sound_speed": env.sound_speed,
                "receiver_depth": env.receiver_depth,
            },
            "source": {"x": self.source.x, "z": self.source.z},
            "pulse": {
                "center_freq": self.pulse.center_freq,
                "bandwidth": self.pulse.bandwidth,
                "center_time": self.pulse.center_time,
                "amplitude": self.pulse.amplitude,
            },
            "grid": {"sample_rate": self.grid.sample_rate, "duration": self.grid.duration},
            "region": {
                "x_min": self.region.x_min, "x_max": self.region.x_max,
                "z_min": self.region.z_min, "z_max": self.region.z_max,
            },
            "snr_db_list": list(self.snr_db_list),
            "mismatch_m_list": list(self.mismatch_m_list),
            "gamma_list": list(self.gamma_list),
            "methods": list(self.methods),
            "trials": self.trials,
            "seed": self.seed,
            "snr_db": self.snr_db,
            "out_dir": str(self.out_dir),
            "checkpoint": None if self.checkpoint is None else str(self.checkpoint),
            "timing": self.timing,
        }


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Build a config from a JSON document; unknown keys are errors."""
    known = {
        "environment", "source", "pulse", "grid", "region",
        "snr_db_list", "mismatch_m_list", "gamma_list", "methods",
        "trials", "seed", "snr_db", "out_dir", "checkpoint", "timing",
    }
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    kwargs = {}
    try:
        if "environment" in doc:
            kwargs["environment"] = Environment(**doc["environment"])
        if "source" in doc:
            kwargs["source"] = SourceLocation(**doc["source"])
        if "pulse" in doc:
            kwargs["pulse"] = AnalyticPulse(**doc["pulse"])
        if "grid" in doc:
            kwargs["grid"] = TimeGrid(**doc["grid"])
        if "region" in doc:
            kwargs["region"] = Region(**doc["region"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config section: {exc}") from exc
    for name in ("snr_db_list", "mismatch_m_list", "gamma_list", "methods"):
        if name in doc:
            kwargs[name] = tuple(doc[name])
    for name in ("trials", "seed", "snr_db", "out_dir", "checkpoint", "timing"):
        if name in doc:
            kwargs[name] = doc[name]
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Row statistics
# ---------------------------------------------------------------------------


def rmse(estimates, truth) -> float:
    """Root mean squared Euclidean distance from truth."""
    pts = np.array(
        [[e.x, e.z] if isinstance(e, SourceLocation) else list(e) for e in estimates],
        dtype=np.float64,
    )
    if pts.size == 0:
        raise ValueError("need at least one estimate")
    t = np.array([truth.x, truth.z]) if isinstance(truth, SourceLocation) else np.asarray(truth)
    d = pts - t
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


@dataclass
class SweepRow:
    method: str
    snr_db: float
    mismatch_m: float
    gamma: float
    trials: int
    rmse_m: float
    mean_err_m: float
    ci_m: float
    conv_rate: float
    wall_s: float

    def to_csv_line(self) -> str:
        return ",".join(
            [
                self.method,
                _fmt(self.snr_db),
                _fmt(self.mismatch_m),
                _fmt(self.gamma),
                str(self.trials),
                _fmt(self.rmse_m),
                _fmt(self.mean_err_m),
                _fmt(self.ci_m),
                _fmt(self.conv_rate),
                f"{self.wall_s:.3f}",
            ]
        )


def _fmt(x: float) -> str:
    return f"{float(x):.10g}"


def write_csv(rows, path: str | Path) -> Path:
    path = Path(path)
    lines = [CSV_HEADER] + [r.to_csv_line() for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def _trial_seed(master: int, method: str, snr_db: float, mismatch_m: float, gamma: float, trial: int) -> int:
    """Stable per-trial seed from the cell coordinates."""
    mask = (1 << 63) - 1

    def enc(x: float) -> int:
        return int(round(x * 1e6)) & mask

    ss = np.random.SeedSequence(
        [master, KNOWN_METHODS.index(method), enc(snr_db), enc(mismatch_m), enc(gamma), trial]
    )
    return int(ss.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# Cells
# ---------------------------------------------------------------------------


def _cell_stats(errors: list, n_trials: int) -> tuple[float, float, float, float]:
    n_conv = len(errors)
    conv_rate = n_conv / n_trials
    if n_conv == 0:
        return math.nan, math.nan, math.nan, conv_rate
    arr = np.array(errors)
    rm = float(np.sqrt(np.mean(arr * arr)))
    mean = float(arr.mean())
    ci = 1.96 * float(arr.std(ddof=1)) / math.sqrt(n_conv) if n_conv > 1 else math.nan
    return rm, mean, ci, conv_rate


def run_cell(
    method: str,
    env_true: Environment,
    env_assumed: Environment,
    cfg: ExperimentConfig,
    snr_db: float,
    mismatch_m: float,
    gamma: float,
    model: ModelParams | None,
    gbl_cfg: GblConfig = GblConfig(),
) -> SweepRow:
    """Run M noise trials of one method in one environment cell."""
    t_start = time.perf_counter() if cfg.timing else 0.0
    truth = np.array([cfg.source.x, cfg.source.z])
    clean = synthesize_received(env_true, cfg.source, cfg.pulse, cfg.grid)
    n0 = snr_to_n0(clean, snr_db, cfg.pulse.bandwidth)
    if method == METHOD_GBL_MATCHED:
        adapter = MatchedModel(env_assumed, cfg.pulse)
    else:
        if model is None:
            raise ConfigError(f"method {method} needs a trained checkpoint")
        adapter = NetworkModel(model)
    errors = []
    for trial in range(cfg.trials):
        seed = _trial_seed(cfg.seed, method, snr_db, mismatch_m, gamma, trial)
        received = add_awgn(clean, NoiseSpec(n0, seed))
        try:
            p0 = toa_init(received, cfg.pulse, env_assumed, cfg.region).p0
        except ToaInitError:
            continue
        if method == METHOD_DA_GBL:
            result = da_gbl(received, adapter, p0, gamma, gbl_cfg)
        else:
            result = gbl(received, adapter, p0, gbl_cfg)
        if result.converged:
            errors.append(float(np.linalg.norm(result.p_hat - truth)))
    rm, mean, ci, conv_rate = _cell_stats(errors, cfg.trials)
    wall = time.perf_counter() - t_start if cfg.timing else 0.0
    return SweepRow(method, snr_db, mismatch_m, gamma, cfg.trials, rm, mean, ci, conv_rate, wall)


def _crlb_row(cfg: ExperimentConfig, env: Environment, snr_db: float) -> SweepRow:
    clean = synthesize_received(env, cfg.source, cfg.pulse, cfg.grid)
    n0 = snr_to_n0(clean, snr_db, cfg.pulse.bandwidth)
    try:
        bound = crlb(env, cfg.source.x, cfg.source.z, cfg.pulse, cfg.grid, n0).rmse_bound
    except SingularFisherError:
        bound = math.nan
    return SweepRow(METHOD_CRLB, snr_db, 0.0, 0.0, 0, bound, 0.0, 0.0, 1.0, 0.0)


def _require_model(cfg: ExperimentConfig, checkpoint: Checkpoint | None) -> ModelParams | None:
    needs_nn = any(m in cfg.methods for m in (METHOD_GBL_NN, METHOD_DA_GBL))
    if not needs_nn:
        return None
    if checkpoint is not None:
        return checkpoint.model
    if cfg.checkpoint is None:
        raise ConfigError("methods gbl-nn/da-gbl need a checkpoint (config key 'checkpoint')")
    return load_checkpoint(cfg.checkpoint).model


def _flag(flags: list, row: SweepRow, reason: str) -> None:
    flags.append(
        {
            "method": row.method,
            "snr_db": row.snr_db,
            "mismatch_m": row.mismatch_m,
            "gamma": row.gamma,
            "reason": reason,
        }
    )


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def run_snr_sweep(cfg: ExperimentConfig, checkpoint: Checkpoint | None = None):
    """RMSE vs SNR in the true training environment; returns (rows, flags)."""
    model = _require_model(cfg, checkpoint)
    env = cfg.environment
    rows = []
    flags = []
    for method in cfg.methods:
        for snr_db in cfg.snr_db_list:
            if method == METHOD_CRLB:
                rows.append(_crlb_row(cfg, env, snr_db))
                continue
            gammas = cfg.gamma_list if method == METHOD_DA_GBL else (0.0,)
            for gamma in gammas:
                row = run_cell(method, env, env, cfg, snr_db, 0.0, gamma, model)
                if row.conv_rate < CONVERGENCE_FLAG_RATE:
                    _flag(flags, row, f"convergence rate {row.conv_rate:.2f} below {CONVERGENCE_FLAG_RATE}")
                rows.append(row)
    return rows, flags


def run_mismatch_sweep(cfg: ExperimentConfig, checkpoint: Checkpoint | None = None):
    """RMSE vs water-depth mismatch at the configured SNR; returns (rows, flags).

    gbl-nn and da-gbl assume the training environment while the data comes
    from a depth-offset one; gbl-matched rows use the true (offset) depth and
    serve as the in-environment reference for the large-mismatch flag.
    """
    methods = [m for m in cfg.methods if m != METHOD_CRLB]
    if not methods:
        raise ConfigError("mismatch sweep needs at least one localization method")
    model = _require_model(cfg, checkpoint)
    env_train = cfg.environment
    rows = []
    flags = []
    matched_ref = {}
    for mismatch in cfg.mismatch_m_list:
        env_true = Environment(
            depth=env_train.depth + mismatch,
            sound_speed=env_train.sound_speed,
            receiver_depth=env_train.receiver_depth,
        )
        for method in methods:
            env_assumed = env_true if method == METHOD_GBL_MATCHED else env_train
            gammas = cfg.gamma_list if method == METHOD_DA_GBL else (0.0,)
            for gamma in gammas:
                row = run_cell(method, env_true, env_assumed, cfg, cfg.snr_db, mismatch, gamma, model)
                rows.append(row)
                if method == METHOD_GBL_MATCHED:
                    matched_ref[mismatch] = row.rmse_m
                if row.conv_rate < CONVERGENCE_FLAG_RATE:
                    _flag(
                        flags, row,
                        f"convergence rate {row.conv_rate:.2f} below {CONVERGENCE_FLAG_RATE}; "
                        "adaptation trust budget exceeded at this mismatch, no robustness claim",
                    )
    for row in rows:
        ref = matched_ref.get(row.mismatch_m)
        if (
            row.method == METHOD_DA_GBL
            and ref is not None
            and np.isfinite(row.rmse_m)
            and np.isfinite(ref)
            and row.rmse_m >= MATCHED_REFERENCE_FACTOR * ref
        ):
            _flag(
                flags, row,
                f"rmse {row.rmse_m:.3g} m is >= {MATCHED_REFERENCE_FACTOR} x matched reference "
                f"{ref:.3g} m; adaptation trust budget exceeded at this mismatch, no robustness claim",
            )
    return rows, flags


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(cfg.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def write_manifest(cfg: ExperimentConfig, flags, csv_path: Path, n_rows: int, path: str | Path) -> Path:
    doc = {
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "csv": csv_path.name,
        "rows": n_rows,
        "flags": flags,
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def run_and_write(kind: str, cfg: ExperimentConfig, checkpoint: Checkpoint | None = None):
    """Run one sweep and write its CSV and manifest; returns (rows, flags, csv_path)."""
    if kind == "snr":
        rows, flags = run_snr_sweep(cfg, checkpoint)
        stem = "snr_sweep"
    elif kind == "mismatch":
        rows, flags = run_mismatch_sweep(cfg, checkpoint)
        stem = "mismatch_sweep"
    else:
        raise ConfigError(f"unknown sweep kind {kind!r}")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = write_csv(rows, out_dir / f"{stem}.csv")
    write_manifest(cfg, flags, csv_path, len(rows), out_dir / f"{stem}_manifest.json")
    return rows, flags, csv_path
