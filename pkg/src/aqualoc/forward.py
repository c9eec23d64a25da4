"""Differentiable forward model, end-to-end pretraining, and checkpoints.

The model maps a candidate source position p = (x, z) through per-path lengths
(network-predicted or analytic), the amplitude/delay laws alpha = rho / l and
tau = l / c, and the pulse superposition, producing a full received waveform.
Training fits the network weights so the synthesized waveform matches recorded
signals; the loss never sees per-path labels, only whole waveforms.
"""

from __future__ import annotations

import base64
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Layout, Tensor, value_and_grad
from .environment import Dataset, Environment, SourceLocation, THREE_PATHS, reflection_coeff
from .pln import (
    InputNormalization,
    PlnArchitecture,
    PlnParams,
    path_features,
    path_features_t,
    pln_error_grid,
    pln_init,
    pln_lengths_t,
)
from .signals import (
    AnalyticPulse,
    SampledSignal,
    TimeGrid,
    correlation_envelope,
    lowpassed_pulse,
    pick_envelope_peaks,
    refine_envelope_peak,
    smooth_rows,
)

RHOS = np.array([reflection_coeff(p) for p in THREE_PATHS])

# One unit of the adaptable sound-speed coordinate equals this many m/s, which
# keeps that coordinate commensurate with the O(1) network weights.
SOUND_SPEED_SCALE = 100.0

PLN_ERROR_TARGET = 0.005  # worst in-region relative path-length error


class CheckpointError(ValueError):
    """Raised for unreadable, truncated, or wrong-version checkpoints."""


class GridMismatchError(ValueError):
    """Raised when a signal's grid does not match the model's expectation."""


@dataclass
class ModelParams:
    """Everything the forward model needs: network, medium, waveform."""

    pln: PlnParams
    sound_speed: float
    receiver_depth: float
    pulse: AnalyticPulse
    adapt_sound_speed: bool = False

    def __post_init__(self) -> None:
        if self.sound_speed <= 0.0:
            raise ValueError(f"sound_speed must be positive, got {self.sound_speed}")
        if self.receiver_depth <= 0.0:
            raise ValueError(f"receiver_depth must be positive, got {self.receiver_depth}")


def alpha_tau(lengths, rhos, sound_speed):
    """Amplitude rho / l and delay l / c for path lengths; works on Tensors too."""
    return rhos / lengths, lengths / sound_speed


class NetworkModel:
    """Adapter exposing the trained network as a differentiable signal model.

    The adaptable weight vector is the flat network weights, plus one trailing
    sound-speed coordinate (c / SOUND_SPEED_SCALE) when adapt_sound_speed is on.
    """

    def __init__(self, model: ModelParams):
        self.model = model
        pln_layout = model.pln.layout
        if model.adapt_sound_speed:
            self.layout = Layout(pln_layout.names + ("c",), pln_layout.shapes + ((),))
            self.w_train = np.concatenate(
                [model.pln.values, [model.sound_speed / SOUND_SPEED_SCALE]]
            )
        else:
            self.layout = pln_layout
            self.w_train = model.pln.values.copy()

    @property
    def n_weights(self) -> int:
        return self.w_train.size

    @property
    def pulse(self) -> AnalyticPulse:
        return self.model.pulse

    def with_pulse(self, pulse: AnalyticPulse) -> "NetworkModel":
        """Same network and medium, different source waveform."""
        return NetworkModel(replace(self.model, pulse=pulse))

    def signal_t(self, w_t: Tensor | None, x_t, z_t, grid: TimeGrid) -> Tensor:
        if w_t is None:
            w_t = Tensor(self.w_train, needs_grad=False)
        feats = path_features_t(
            Tensor._lift(x_t), Tensor._lift(z_t), self.model.receiver_depth,
            self.model.pln.norm,
        )
        lengths = pln_lengths_t(w_t, self.model.pln, feats)
        if self.model.adapt_sound_speed:
            c = self.layout.segment(w_t, "c") * SOUND_SPEED_SCALE
        else:
            c = self.model.sound_speed
        alphas, taus = alpha_tau(lengths, RHOS, c)
        from .autodiff import superpose

        return superpose(alphas, taus, self.model.pulse, grid)


class MatchedModel:
    """Analytic image-method lengths in a known environment; no weights.

    Plugging this in place of the network reproduces the synthesis oracle
    bit-for-bit (identical floating-point operations throughout).
    """

    def __init__(self, env: Environment, pulse: AnalyticPulse):
        self.env = env
        self.pulse = pulse
        zr = env.receiver_depth
        self.offsets = np.array([-zr, zr, 2.0 * env.depth - zr])
        self.signs = np.array([1.0, 1.0, -1.0])
        self.w_train = np.empty(0)
        self.layout = Layout((), ())

    @property
    def n_weights(self) -> int:
        return 0

    def with_pulse(self, pulse: AnalyticPulse) -> "MatchedModel":
        """Same environment, different source waveform."""
        return MatchedModel(self.env, pulse)

    def lengths_t(self, x_t, z_t) -> Tensor:
        x_t = Tensor._lift(x_t)
        z_t = Tensor._lift(z_t)
        dz = self.offsets + self.signs * z_t
        return (x_t * x_t + dz * dz).sqrt()

    def signal_t(self, w_t, x_t, z_t, grid: TimeGrid) -> Tensor:
        lengths = self.lengths_t(x_t, z_t)
        alphas, taus = alpha_tau(lengths, RHOS, self.env.sound_speed)
        from .autodiff import superpose

        return superpose(alphas, taus, self.pulse, grid)


def model_output(model: ModelParams, src: SourceLocation, grid: TimeGrid) -> SampledSignal:
    """Noiseless model waveform at a source hypothesis."""
    adapter = NetworkModel(model)
    out = adapter.signal_t(None, src.x, src.z, grid)
    return SampledSignal(grid, out.value)


def make_train_loss_fn(
    model: ModelParams,
    dataset: Dataset,
    indices: np.ndarray | None = None,
    pulse: AnalyticPulse | None = None,
    signals: np.ndarray | None = None,
):
    """Build w_t -> mean integrated squared residual over the chosen items.

    `pulse` and `signals` exist so the pretraining schedule can substitute the
    lowpassed pulse and correspondingly smoothed recordings; by default the
    exact dataset and transmit pulse are used.
    """
    if dataset.grid.n_samples != (signals.shape[1] if signals is not None
                                  else dataset.signals.shape[1]):
        raise GridMismatchError("signals do not match the dataset grid")
    pulse = pulse if pulse is not None else dataset.pulse
    signals = signals if signals is not None else dataset.signals
    idx = np.arange(dataset.count) if indices is None else np.asarray(indices)
    batch = len(idx)
    if batch == 0:
        raise ValueError("empty batch")
    feats = path_features(
        dataset.locations[idx, 0], dataset.locations[idx, 1],
        model.receiver_depth, model.pln.norm,
    ).reshape(batch * len(THREE_PATHS), -1)
    r = signals[idx]
    grid = dataset.grid
    scale = grid.dt / batch

    def loss_fn(w_t: Tensor) -> Tensor:
        lengths = pln_lengths_t(w_t, model.pln, feats).reshape(batch, len(THREE_PATHS))
        alphas, taus = alpha_tau(lengths, RHOS, model.sound_speed)
        from .autodiff import superpose

        f = superpose(alphas, taus, pulse, grid)
        resid = r - f
        return (resid * resid).sum() * scale

    return loss_fn


def _peak_length_targets(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-item candidate path-length triples from matched-filter peaks.

    Each recording is correlated against the transmit pulse and up to three
    envelope peaks are picked and refined (same machinery the localizer's
    initializer uses). Sorted peak times scale to path lengths by the sound
    speed. The earliest arrival is always the direct path, but which of the
    later two is the surface bounce is not observable from one waveform (their
    order swaps across z + z_r = depth), so two candidate assignments come
    back; when fewer peaks survive, merged arrivals duplicate the nearest
    candidate instead. Returns (cand_a, cand_b), each (count, 3), in the
    direct/surface/bottom column order the network predicts.
    """
    fs = dataset.grid.sample_rate
    c = dataset.environment.sound_speed
    pulse = dataset.pulse
    # one carrier-free cycle of separation: training recordings are noiseless,
    # so peaks may be split more aggressively than on field data, which keeps
    # the merged bands (where duplicated targets are biased) narrow
    min_sep = max(1, int(round(1.0 / pulse.bandwidth * fs)))
    cand_a = np.empty((dataset.count, len(THREE_PATHS)))
    cand_b = np.empty_like(cand_a)
    for k in range(dataset.count):
        env_c, lag_times = correlation_envelope(dataset.signals[k], pulse, fs)
        med = float(np.median(env_c))
        mad = float(np.median(np.abs(env_c - med)))
        # the relative floor rejects spectral-leakage local maxima that clear
        # a pure median threshold on noiseless recordings
        thr = max(med + 3.0 * 1.4826 * mad, 1e-3 * float(env_c.max()))
        peaks = pick_envelope_peaks(env_c, min_sep, thr, max_peaks=3)
        if not peaks:
            peaks = [int(np.argmax(env_c))]
        refined = [refine_envelope_peak(env_c, i) for i in peaks]
        lens = np.sort(c * (lag_times[0] + np.array(refined) / fs))
        if len(lens) == 3:
            cand_a[k] = lens
            cand_b[k] = (lens[0], lens[2], lens[1])
        elif len(lens) == 2:
            # surface/bottom merged (z near depth - z_r) vs direct/surface
            # merged (shallow source)
            cand_a[k] = (lens[0], lens[1], lens[1])
            cand_b[k] = (lens[0], lens[0], lens[1])
        else:
            cand_a[k] = lens[0]
            cand_b[k] = lens[0]
    return cand_a, cand_b


def _make_peaks_loss_fn(
    model: ModelParams,
    dataset: Dataset,
    indices: np.ndarray,
    cand_a: np.ndarray,
    cand_b: np.ndarray,
):
    """Build w_t -> mean squared length error under the better assignment.

    A plain smooth regression with unlimited capture range: it never compares
    waveforms, so it pulls arbitrarily misplaced predictions straight to the
    observed arrival structure. The per-item min over the two candidate
    assignments keeps the ambiguity soft; ties are resolved consistently as
    the fit sharpens.
    """
    idx = np.asarray(indices)
    batch = len(idx)
    feats = path_features(
        dataset.locations[idx, 0], dataset.locations[idx, 1],
        model.receiver_depth, model.pln.norm,
    ).reshape(batch * len(THREE_PATHS), -1)
    a = cand_a[idx]
    b = cand_b[idx]
    scale = 1.0 / (batch * len(THREE_PATHS))

    def loss_fn(w_t: Tensor) -> Tensor:
        lengths = pln_lengths_t(w_t, model.pln, feats).reshape(batch, len(THREE_PATHS))
        ra = lengths - a
        rb = lengths - b
        va = (ra * ra).sum(axis=1)
        vb = (rb * rb).sum(axis=1)
        pick_a = (va.value <= vb.value).astype(float)
        return (va * pick_a + vb * (1.0 - pick_a)).sum() * scale

    return loss_fn


def train_loss(model: ModelParams, dataset: Dataset) -> float:
    """Mean integrated squared residual of the model over a whole dataset."""
    loss_fn = make_train_loss_fn(model, dataset)
    out = loss_fn(Tensor(model.pln.values, needs_grad=False))
    return float(out.value)


# Coarse-to-fine pretraining schedule: (stage kind, smoothing kernel sigma in
# seconds, fraction of the epoch budget, learning-rate scale). Random init
# puts predicted arrivals up to ~0.2 s from the recorded ones, far outside the
# correlation basin of any waveform misfit (smoothing the bandpass waveform
# cannot widen it: a kernel wide enough to matter just annihilates the
# carrier), so the schedule works in three regimes:
#   peaks - regress predicted lengths onto matched-filter peak times of each
#     recording, waveform statistics with global capture range. Peak-to-path
#     assignment is not observable, so the loss takes the better of the two
#     orderings consistent with the direct arrival being first; merged
#     arrivals (two peaks or one) share targets the same way.
#   lowpass - fit the Gaussian-smoothed waveform quadratically: smoothing
#     pulls the effective carrier down to f0 sigma_p^2 / (sigma_p^2 + k^2),
#     widening the cycle basin so the phase locks onto the right carrier
#     cycle and the reflection signs calibrate.
#   exact - the true training loss.
# The waveform stages own basins of about +/- one effective carrier cycle
# (only +/- 1 m for the exact loss), so their learning rates are scaled far
# down: Adam steps at the peaks-stage rate move predictions by meters and
# would throw every item off its basin.
STAGE_PEAKS = "peaks"
STAGE_LOWPASS = "lowpass"
STAGE_EXACT = "exact"

DEFAULT_SMOOTHING: tuple[tuple[str, float, float, float], ...] = (
    (STAGE_PEAKS, 0.0, 0.625, 1.0),
    (STAGE_LOWPASS, 2e-3, 0.0625, 0.2),
    (STAGE_LOWPASS, 1e-3, 0.09375, 0.1),
    (STAGE_EXACT, 0.0, 0.21875, 0.03),
)


@dataclass(frozen=True)
class TrainConfig:
    """Adam pretraining settings.

    lr is the peaks-stage rate; each schedule entry scales it. Within a stage
    the rate holds for the first half of the epochs, then follows a cosine
    decay to 1% so the minibatch noise floor drops as the stage settles.
    """

    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 12800
    seed: int = 0
    smoothing: tuple[tuple[str, float, float, float], ...] = DEFAULT_SMOOTHING

    def __post_init__(self) -> None:
        if self.lr < 0.0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        kinds = {STAGE_PEAKS, STAGE_LOWPASS, STAGE_EXACT}
        for kind, sigma, _frac, lr_scale in self.smoothing:
            if kind not in kinds:
                raise ValueError(f"unknown stage kind {kind!r}")
            if kind in (STAGE_PEAKS, STAGE_EXACT) and sigma != 0.0:
                raise ValueError(f"{kind} stages must use sigma 0")
            if kind == STAGE_LOWPASS and sigma <= 0.0:
                raise ValueError(f"{kind} stages need sigma > 0, got {sigma}")
            if lr_scale <= 0.0:
                raise ValueError(f"lr_scale must be positive, got {lr_scale}")
        if abs(sum(f for _, _, f, _ in self.smoothing) - 1.0) > 1e-9:
            raise ValueError("smoothing stage fractions must sum to 1")
        if self.smoothing[-1][0] != STAGE_EXACT:
            raise ValueError("the last smoothing stage must be exact")

    def stage_epochs(self) -> list[tuple[str, float, int, float]]:
        out = []
        used = 0
        for i, (kind, sigma, frac, lr_scale) in enumerate(self.smoothing):
            if i == len(self.smoothing) - 1:
                n = self.epochs - used
            else:
                n = int(round(frac * self.epochs))
            out.append((kind, sigma, n, lr_scale))
            used += n
        return out


@dataclass
class Checkpoint:
    """A trained model plus provenance metadata."""

    model: ModelParams
    metadata: dict = field(default_factory=dict)


def _stage_pulse(pulse: AnalyticPulse, kind: str, sigma: float) -> AnalyticPulse:
    """The model-side pulse whose superposition matches the stage's targets."""
    if kind == STAGE_LOWPASS:
        return lowpassed_pulse(pulse, sigma)
    return pulse


def _stage_signals(signals: np.ndarray, kind: str, sigma: float, dt: float) -> np.ndarray:
    """The data-side targets transformed to match _stage_pulse's domain."""
    if kind == STAGE_LOWPASS:
        return smooth_rows(signals, sigma, dt)
    return signals


def _stage_lr(epoch: int, n_epochs: int, lr0: float) -> float:
    """Hold lr0 for the first half of a stage, then cosine-decay to 1%."""
    half = n_epochs // 2
    if epoch < half or n_epochs <= 1:
        return lr0
    ramp = 0.5 * (1.0 + math.cos(math.pi * (epoch - half) / (n_epochs - half)))
    return lr0 * (0.01 + 0.99 * ramp)


def pretrain(
    dataset: Dataset,
    arch: PlnArchitecture,
    cfg: TrainConfig,
    region=None,
) -> Checkpoint:
    """Fit the network end to end on recorded waveforms with Adam.

    Follows the coarse-to-fine schedule in cfg.smoothing (optimizer moments
    reset at stage boundaries, each stage running at its own scaled,
    hold-then-decay learning rate), logs one loss value per epoch plus the
    in-region path-length error at each stage end, and warns if the trained
    network misses the in-region accuracy target.
    """
    from .environment import DEFAULT_REGION

    region = region if region is not None else DEFAULT_REGION
    norm = InputNormalization.from_region(region, dataset.environment)
    params = pln_init(arch, norm, cfg.seed)
    model = ModelParams(
        pln=params,
        sound_speed=dataset.environment.sound_speed,
        receiver_depth=dataset.environment.receiver_depth,
        pulse=dataset.pulse,
    )
    initial_loss = train_loss(model, dataset)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    w = params.values.copy()
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    curve: list[tuple[int, str, float, float]] = []  # epoch, kind, sigma, batch loss
    stage_errors: list[tuple[str, float, float]] = []  # kind, sigma, grid error
    epoch = 0
    for kind, sigma, n_epochs, lr_scale in cfg.stage_epochs():
        if n_epochs <= 0:
            continue
        if kind == STAGE_PEAKS:
            cand_a, cand_b = _peak_length_targets(dataset)
        else:
            stage_pulse = _stage_pulse(dataset.pulse, kind, sigma)
            stage_signals = _stage_signals(dataset.signals, kind, sigma, dataset.grid.dt)
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        step = 0
        for stage_epoch in range(n_epochs):
            lr = _stage_lr(stage_epoch, n_epochs, cfg.lr * lr_scale)
            perm = rng.permutation(dataset.count)
            losses = []
            for lo in range(0, dataset.count, cfg.batch_size):
                idx = perm[lo : lo + cfg.batch_size]
                if kind == STAGE_PEAKS:
                    loss_fn = _make_peaks_loss_fn(model, dataset, idx, cand_a, cand_b)
                else:
                    loss_fn = make_train_loss_fn(
                        model, dataset, indices=idx,
                        pulse=stage_pulse, signals=stage_signals,
                    )
                loss, g = value_and_grad(loss_fn, w)
                losses.append(loss)
                step += 1
                m = beta1 * m + (1.0 - beta1) * g
                v = beta2 * v + (1.0 - beta2) * g * g
                mhat = m / (1.0 - beta1**step)
                vhat = v / (1.0 - beta2**step)
                w -= lr * mhat / (np.sqrt(vhat) + eps)
            curve.append((epoch, kind, sigma, float(np.mean(losses))))
            epoch += 1
        stage_params = PlnParams(arch, norm, w.copy())
        stage_errors.append(
            (kind, sigma, pln_error_grid(stage_params, dataset.environment, region))
        )
        model = replace(model, pln=stage_params)
    trained = replace(
        model, pln=PlnParams(arch, norm, w.copy())
    )
    final_loss = train_loss(trained, dataset)
    err = pln_error_grid(trained.pln, dataset.environment, region)
    if err > PLN_ERROR_TARGET:
        warnings.warn(
            f"trained network path-length error {err:.4%} misses the "
            f"{PLN_ERROR_TARGET:.1%} in-region target",
            stacklevel=2,
        )
    metadata = {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "lr": cfg.lr,
        "batch_size": cfg.batch_size,
        "smoothing": [list(s) for s in cfg.smoothing],
        "dataset_count": dataset.count,
        "dataset_seed": dataset.seed,
        "initial_loss": initial_loss,
        "final_loss": final_loss,
        "pln_error": err,
        "pln_error_target": PLN_ERROR_TARGET,
        "region": [region.x_min, region.x_max, region.z_min, region.z_max],
        "loss_curve": [[e, k, s, l] for e, k, s, l in curve],
        "stage_errors": [[k, s, e] for k, s, e in stage_errors],
    }
    return Checkpoint(trained, metadata)


CHECKPOINT_FORMAT_VERSION = 1


def _encode(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode()


def _decode(text: str, shape: tuple[int, ...]) -> np.ndarray:
    raw = base64.b64decode(text.encode(), validate=True)
    expected = int(np.prod(shape)) * 8 if shape else 8
    if len(raw) != expected:
        raise CheckpointError(
            f"weight payload holds {len(raw)} bytes, expected {expected}"
        )
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def save_checkpoint(ck: Checkpoint, path: str | Path) -> Path:
    """Serialize a checkpoint as versioned JSON with binary64 weight payloads."""
    model = ck.model
    layout = model.pln.layout
    segments = layout.unpack(model.pln.values)
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": {
            "hidden": list(model.pln.arch.hidden),
            "length_scale": model.pln.arch.length_scale,
        },
        "normalization": {
            "shift": list(model.pln.norm.shift),
            "scale": list(model.pln.norm.scale),
        },
        "weights": {
            name: {"shape": list(segments[name].shape), "data": _encode(segments[name])}
            for name in layout.names
        },
        "sound_speed": model.sound_speed,
        "receiver_depth": model.receiver_depth,
        "adapt_sound_speed": model.adapt_sound_speed,
        "pulse": {
            "center_freq": model.pulse.center_freq,
            "bandwidth": model.pulse.bandwidth,
            "center_time": model.pulse.center_time,
            "amplitude": model.pulse.amplitude,
        },
        "metadata": ck.metadata,
    }
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Load a checkpoint written by save_checkpoint; round-trips bit-exactly."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    try:
        arch = PlnArchitecture(
            hidden=tuple(doc["architecture"]["hidden"]),
            length_scale=doc["architecture"]["length_scale"],
        )
        norm = InputNormalization(
            shift=tuple(doc["normalization"]["shift"]),
            scale=tuple(doc["normalization"]["scale"]),
        )
        layout = arch.layout()
        segments = {
            name: _decode(doc["weights"][name]["data"],
                          tuple(doc["weights"][name]["shape"]))
            for name in layout.names
        }
        params = PlnParams(arch, norm, layout.pack(segments))
        model = ModelParams(
            pln=params,
            sound_speed=doc["sound_speed"],
            receiver_depth=doc["receiver_depth"],
            pulse=AnalyticPulse(**doc["pulse"]),
            adapt_sound_speed=doc["adapt_sound_speed"],
        )
    except (KeyError, ValueError, TypeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    return Checkpoint(model, doc.get("metadata", {}))
