"""Numerical verification of the adaptation robustness bound.

All machinery here works on the joint vector v = [w; p] of model weights and
source position, in normalized coordinates: position entries are rescaled so
the data-term curvature per coordinate is order one at the fitted point,
putting both blocks on the footing the bound's inequalities assume. The
strong-convexity, environment-Lipschitz, and ray-curvature constants are
sample-based estimates (lower or upper bounds on what was probed), never
certificates, and the report says which claims held.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, value_and_grad
from .environment import (
    Environment,
    SourceLocation,
    THREE_PATHS,
    image_depth,
    synthesize_received,
)
from .forward import ModelParams, NetworkModel
from .localize import GblConfig, da_gbl, toa_init
from .signals import SampledSignal, TimeGrid


@dataclass(frozen=True)
class EnvPerturbation:
    """Offset applied to the assumed environment: depth (m), sound speed (m/s)."""

    depth_m: float = 0.0
    sound_speed_ms: float = 0.0

    def __post_init__(self) -> None:
        if not (np.isfinite(self.depth_m) and np.isfinite(self.sound_speed_ms)):
            raise ValueError("perturbation entries must be finite")

    @property
    def norm(self) -> float:
        return math.hypot(self.depth_m, self.sound_speed_ms)

    def applied_to(self, env: Environment) -> Environment:
        return Environment(
            depth=env.depth + self.depth_m,
            sound_speed=env.sound_speed + self.sound_speed_ms,
            receiver_depth=env.receiver_depth,
        )


@dataclass(frozen=True)
class TheoremConfig:
    """Knobs for the verification run.

    `sigma` is the cube radius in normalized coordinates; runs additionally cap
    it so no probe point shifts any modeled path length by more than
    `path_shift_budget_m`, keeping every probe inside the carrier-aligned
    basin where the estimated constants describe the loss the descent actually
    sees. `curvature_target` sets the data-term curvature per normalized
    position coordinate at the fitted point.
    """

    sigma: float = 0.1
    kappa_points: int = 33
    fd_rel: float = 1e-2
    cube_samples: int = 8
    lipschitz_depths: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    lipschitz_points: int = 3
    curvature_target: float = 1.5
    path_shift_budget_m: float = 0.25
    gamma: float = 10.0
    seed: int = 0
    newton_iters: int = 8

    def __post_init__(self) -> None:
        if self.sigma <= 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.kappa_points < 8 or self.cube_samples < 8:
            raise ValueError("kappa_points and cube_samples must be >= 8")


# ---------------------------------------------------------------------------
# Gradient of the adaptation objective
# ---------------------------------------------------------------------------


def make_grad_fn(adapter, received: SampledSignal, gamma: float):
    """Return v_raw -> gradient of the adaptation objective at v = [w; p]."""
    rv = received.values
    grid = received.grid
    dt = grid.dt
    nw = adapter.n_weights
    w_train = adapter.w_train

    def objective(v_t: Tensor) -> Tensor:
        w_t = v_t[:nw]
        f_t = adapter.signal_t(w_t, v_t[nw], v_t[nw + 1], grid)
        resid = f_t - rv
        total = (resid * resid).sum() * dt
        if gamma != 0.0:
            dw = w_t - w_train
            total = total + (0.5 * gamma) * (dw * dw).sum()
        return total

    def grad_fn(v: np.ndarray) -> np.ndarray:
        _, g = value_and_grad(objective, np.asarray(v, dtype=np.float64))
        return g

    return grad_fn


def grad_G(
    v: np.ndarray,
    env: Environment,
    source: SourceLocation,
    model: ModelParams,
    gamma: float,
) -> np.ndarray:
    """Gradient of the adaptation objective on noiseless data from (env, source).

    The anchor weights are the model's stored (trained) weights.
    """
    grid = TimeGrid()
    received = synthesize_received(env, source, model.pulse, grid)
    adapter = NetworkModel(model)
    return make_grad_fn(adapter, received, gamma)(v)


# ---------------------------------------------------------------------------
# Constant estimation (generic over a gradient oracle)
# ---------------------------------------------------------------------------


def fd_hessian(grad_fn, v: np.ndarray, h: float):
    """Dense symmetric-difference Hessian and its pre-symmetrization skew."""
    n = v.size
    cols = np.empty((n, n))
    for j in range(n):
        hi = v.copy()
        lo = v.copy()
        hi[j] += h
        lo[j] -= h
        cols[:, j] = (grad_fn(hi) - grad_fn(lo)) / (2.0 * h)
    scale = float(np.max(np.abs(cols)))
    asym = float(np.max(np.abs(cols - cols.T))) / scale if scale > 0.0 else 0.0
    return 0.5 * (cols + cols.T), asym


@dataclass
class LambdaEstimate:
    """Smallest Hessian eigenvalue seen over the sampled cube."""

    lambda_hat: float
    per_point: np.ndarray
    asym_max: float
    hessian_center: np.ndarray


def estimate_lambda(
    grad_fn,
    v0: np.ndarray,
    sigma: float,
    h: float,
    n_samples: int,
    rng: np.random.Generator,
) -> LambdaEstimate:
    """Min eigenvalue of the FD Hessian over v0 plus cube-sampled points.

    A non-positive result is a valid report: it means strong convexity failed
    somewhere in the cube, not that the estimate itself broke.
    """
    points = [v0]
    for _ in range(n_samples - 1):
        points.append(v0 + sigma * rng.uniform(-1.0, 1.0, v0.size))
    mins = np.empty(len(points))
    asym_max = 0.0
    hessian_center = None
    for i, pt in enumerate(points):
        hess, asym = fd_hessian(grad_fn, pt, h)
        asym_max = max(asym_max, asym)
        mins[i] = float(np.linalg.eigvalsh(hess)[0])
        if i == 0:
            hessian_center = hess
    return LambdaEstimate(float(mins.min()), mins, asym_max, hessian_center)


@dataclass
class LipschitzEstimate:
    """Largest gradient-change-to-perturbation ratio seen across probes."""

    l_hat: float
    rows: list
    argmax: tuple


def estimate_lipschitz(grad_fn_for_depth, v_samples, depth_steps) -> LipschitzEstimate:
    """Max over probes of ||G(v, depth+d) - G(v, depth)|| / |d|.

    `grad_fn_for_depth(d)` must return a gradient oracle for the environment
    whose depth is offset by d; d = 0 is the reference. Zero steps are
    rejected rather than skipped so a bad caller fails loudly.
    """
    base = grad_fn_for_depth(0.0)
    base_grads = [base(v) for v in v_samples]
    rows = []
    best = (0.0, None)
    for d in depth_steps:
        if d == 0.0:
            raise ValueError("depth steps must be nonzero")
        probe = grad_fn_for_depth(float(d))
        for i, v in enumerate(v_samples):
            ratio = float(np.linalg.norm(probe(v) - base_grads[i])) / abs(d)
            rows.append((float(d), i, ratio))
            if ratio > best[0]:
                best = (ratio, (float(d), i))
    return LipschitzEstimate(best[0], rows, best[1])


@dataclass
class XiEstimate:
    """Curvature of the gradient along the ray v0 + kappa * H^-1 1."""

    xi_hat: float
    xi_per_coord: np.ndarray
    g0_norm: float
    gprime_max_err: float
    kappas: np.ndarray
    g_values: np.ndarray = field(repr=False)


def estimate_xi(grad_fn, v0: np.ndarray, direction: np.ndarray, sigma: float, n_points: int) -> XiEstimate:
    """Probe g(kappa) = G(v0 + kappa * direction) on [0, sigma].

    Per-coordinate second derivatives come from central differences on the
    grid; the extra point at -h makes the first derivative at 0 central too.
    For `direction` = H(v0)^-1 1 at a stationary v0, g(0) vanishes and
    g'(0) is the all-ones vector up to discretization error.
    """
    kappas = np.linspace(0.0, sigma, n_points)
    h = kappas[1] - kappas[0]
    g_values = np.stack([grad_fn(v0 + k * direction) for k in kappas])
    g_minus = grad_fn(v0 - h * direction)
    second = (g_values[2:] - 2.0 * g_values[1:-1] + g_values[:-2]) / (h * h)
    xi_per_coord = np.max(np.abs(second), axis=0)
    gprime0 = (g_values[1] - g_minus) / (2.0 * h)
    return XiEstimate(
        xi_hat=float(xi_per_coord.max()),
        xi_per_coord=xi_per_coord,
        g0_norm=float(np.linalg.norm(g_values[0])),
        gprime_max_err=float(np.max(np.abs(gprime0 - 1.0))),
        kappas=kappas,
        g_values=g_values,
    )


# ---------------------------------------------------------------------------
# End-to-end verification
# ---------------------------------------------------------------------------


@dataclass
class TheoremReport:
    """Everything the robustness check measured, plus per-claim flags.

    All vector quantities (cube radius, theta, rho, bound, displacement) are
    in normalized coordinates; `p_scales` maps them back to meters.
    """

    n_w: int
    n_p: int
    gamma: float
    eps_depth_m: float
    eps_sound_speed_ms: float
    eps_norm: float
    p_scales: tuple[float, float]
    sigma_config: float
    sigma_used: float
    lambda_hat: float
    lambda_center: float
    hessian_asym: float
    l_hat: float
    xi_hat: float
    theta: float
    rho_cube: float
    epsilon_budget: float
    bound: float
    displacement: float
    displacement_p_m: tuple[float, float]
    g0_norm: float
    gprime_max_err: float
    sign_pos_min: float
    sign_neg_max: float
    gbl_grad_norm: float
    polish_grad_norm: float
    convexity_ok: bool
    rho_ok: bool
    gprime_ok: bool
    budget_ok: bool
    displacement_ok: bool
    signs_ok: bool
    passed: bool
    verdict: str
    seed: int

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["p_scales"] = list(self.p_scales)
        doc["displacement_p_m"] = list(self.displacement_p_m)
        return doc

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _path_slopes(env: Environment, x: float, z: float) -> np.ndarray:
    """|d path length / d position| per coordinate, maximized over paths."""
    sx = sz = 0.0
    for p in THREE_PATHS:
        dz = image_depth(env, z, p)
        ell = math.sqrt(x * x + dz * dz)
        sx = max(sx, abs(x / ell))
        sz = max(sz, abs(dz / ell))
    return np.array([sx, sz])


def _raw_p_curvature(adapter, w: np.ndarray, p: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Gauss-Newton data curvature per raw position coordinate."""
    dt = grid.dt
    out = np.empty(2)
    for j, h in ((0, 1e-2), (1, 1e-2)):
        hi = p.copy()
        lo = p.copy()
        hi[j] += h
        lo[j] -= h
        f_hi = adapter.signal_t(Tensor(w, needs_grad=False), hi[0], hi[1], grid).value
        f_lo = adapter.signal_t(Tensor(w, needs_grad=False), lo[0], lo[1], grid).value
        dfdp = (f_hi - f_lo) / (2.0 * h)
        out[j] = 2.0 * dt * float(dfdp @ dfdp)
    return out


def _newton_polish(grad_fn, v: np.ndarray, h: float, iters: int, max_step: float):
    """Drive the gradient to roundoff with damped FD-Hessian Newton steps."""
    best_v = v.copy()
    best_norm = float(np.linalg.norm(grad_fn(v)))
    for _ in range(iters):
        hess, _ = fd_hessian(grad_fn, best_v, h)
        g = grad_fn(best_v)
        try:
            step = np.linalg.solve(hess, -g)
        except np.linalg.LinAlgError:
            break
        step_inf = float(np.max(np.abs(step)))
        if step_inf > max_step:
            step *= max_step / step_inf
        cand = best_v + step
        cand_norm = float(np.linalg.norm(grad_fn(cand)))
        if cand_norm >= best_norm:
            break
        best_v, best_norm = cand, cand_norm
        if step_inf < 1e-14:
            break
    return best_v, best_norm


def _fit(adapter, received, p0, gamma, gbl_cfg) -> np.ndarray:
    result = da_gbl(received, adapter, p0, gamma, gbl_cfg)
    return np.concatenate([result.w_hat, result.p_hat]), result.grad_norm


def verify_theorem(
    model: ModelParams,
    env_train: Environment,
    source: SourceLocation,
    eps: EnvPerturbation,
    cfg: TheoremConfig = TheoremConfig(),
    grid: TimeGrid | None = None,
    p0: np.ndarray | None = None,
) -> TheoremReport:
    """Measure the robustness bound's constants and check its claims.

    Fits the adaptation objective on noiseless data from the training
    environment, estimates the constants around the fitted point, forms the
    trust radius theta, the cube radius rho, the perturbation budget, and the
    displacement bound, then refits under the perturbed environment and checks
    the observed displacement and the sign witnesses. Assumption failures
    yield a not-applicable verdict rather than an exception.
    """
    grid = grid or TimeGrid()
    pulse = model.pulse
    r_train = synthesize_received(env_train, source, pulse, grid)
    adapter = NetworkModel(model)
    nw = adapter.n_weights

    if p0 is None:
        p0 = toa_init(r_train, pulse, env_train).p0
    p0 = np.asarray(p0, dtype=np.float64)

    gbl_cfg = GblConfig(max_iter=800, step_tol_m=1e-7)
    v0_raw, gbl_grad_norm = _fit(adapter, r_train, p0, cfg.gamma, gbl_cfg)

    # Normalized coordinates: unit weight scale, position scales chosen so the
    # data-term curvature per position coordinate equals curvature_target.
    curv = _raw_p_curvature(adapter, v0_raw[:nw], v0_raw[nw:], grid)
    curv = np.maximum(curv, 1e-300)
    u_p = np.sqrt(cfg.curvature_target / curv)
    scales = np.ones(nw + 2)
    scales[nw:] = u_p

    def to_raw(vt: np.ndarray) -> np.ndarray:
        return vt * scales

    raw_grad = make_grad_fn(adapter, r_train, cfg.gamma)

    def grad_norm_fn(vt: np.ndarray) -> np.ndarray:
        return scales * raw_grad(to_raw(vt))

    # Cap the cube so no probe shifts any path length out of the aligned basin.
    slopes = _path_slopes(env_train, v0_raw[nw], v0_raw[nw + 1])
    shift_per_sigma = float(slopes @ u_p)
    sigma_used = min(cfg.sigma, cfg.path_shift_budget_m / shift_per_sigma)
    h_fd = cfg.fd_rel * sigma_used

    vt0 = v0_raw / scales
    vt0, polish_grad_norm = _newton_polish(
        grad_norm_fn, vt0, h_fd, cfg.newton_iters, max_step=0.5 * sigma_used
    )
    v0_raw = to_raw(vt0)

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    lam = estimate_lambda(grad_norm_fn, vt0, sigma_used, h_fd, cfg.cube_samples, rng)
    lambda_center = float(np.linalg.eigvalsh(lam.hessian_center)[0])

    def grad_fn_for_depth(d: float):
        if d == 0.0:
            return grad_norm_fn
        env_d = Environment(env_train.depth + d, env_train.sound_speed, env_train.receiver_depth)
        r_d = synthesize_received(env_d, source, pulse, grid)
        raw_d = make_grad_fn(adapter, r_d, cfg.gamma)
        return lambda vt: scales * raw_d(to_raw(vt))

    v_samples = [vt0] + [
        vt0 + sigma_used * rng.uniform(-1.0, 1.0, vt0.size)
        for _ in range(cfg.lipschitz_points - 1)
    ]
    depth_steps = [s * d for d in cfg.lipschitz_depths for s in (1.0, -1.0)]
    lip = estimate_lipschitz(grad_fn_for_depth, v_samples, depth_steps)

    convexity_ok = lam.lambda_hat > 0.0 and lambda_center > 0.0
    n_total = nw + 2
    if not convexity_ok:
        return _report_failure(
            "strong convexity does not hold on the sampled cube",
            cfg, eps, nw, u_p, sigma_used, lam, lambda_center, lip,
            gbl_grad_norm, polish_grad_norm,
        )

    direction = np.linalg.solve(lam.hessian_center, np.ones(n_total))
    xi = estimate_xi(grad_norm_fn, vt0, direction, sigma_used, cfg.kappa_points)

    theta = min(sigma_used, 1.0 / xi.xi_hat) if xi.xi_hat > 0.0 else sigma_used
    rho_cube = theta * float(np.max(np.abs(direction)))
    epsilon_budget = theta / (2.0 * lip.l_hat) if lip.l_hat > 0.0 else math.inf
    bound = theta * math.sqrt(n_total / lam.lambda_hat)

    rho_ok = rho_cube <= theta / math.sqrt(lam.lambda_hat) * 1.01
    gprime_ok = xi.gprime_max_err <= 1e-2
    budget_ok = eps.norm <= epsilon_budget

    # Refit under the perturbed environment from the same initialization.
    env_test = eps.applied_to(env_train)
    r_test = synthesize_received(env_test, source, pulse, grid)
    v_eps_raw, _ = _fit(adapter, r_test, p0, cfg.gamma, gbl_cfg)
    raw_grad_eps = make_grad_fn(adapter, r_test, cfg.gamma)

    def grad_norm_eps(vt: np.ndarray) -> np.ndarray:
        return scales * raw_grad_eps(to_raw(vt))

    vt_eps, _ = _newton_polish(
        grad_norm_eps, v_eps_raw / scales, h_fd, cfg.newton_iters, max_step=0.5 * sigma_used
    )
    displacement = float(np.linalg.norm(vt0 - vt_eps))
    dp_m = np.abs(to_raw(vt0)[nw:] - to_raw(vt_eps)[nw:])
    displacement_ok = bool(displacement <= bound) if budget_ok else False

    v_plus = vt0 + theta * direction
    v_minus = vt0 - theta * direction
    g_plus = grad_norm_eps(v_plus)
    g_minus = grad_norm_eps(v_minus)
    sign_pos_min = float(g_plus.min())
    sign_neg_max = float(g_minus.max())
    signs_ok = sign_pos_min > 0.0 and sign_neg_max < 0.0

    if not budget_ok:
        verdict = "budget-exceeded"
        passed = False
    else:
        passed = bool(rho_ok and gprime_ok and displacement_ok and signs_ok)
        verdict = "pass" if passed else "claim-failed"

    return TheoremReport(
        n_w=nw,
        n_p=2,
        gamma=cfg.gamma,
        eps_depth_m=eps.depth_m,
        eps_sound_speed_ms=eps.sound_speed_ms,
        eps_norm=eps.norm,
        p_scales=(float(u_p[0]), float(u_p[1])),
        sigma_config=cfg.sigma,
        sigma_used=sigma_used,
        lambda_hat=lam.lambda_hat,
        lambda_center=lambda_center,
        hessian_asym=lam.asym_max,
        l_hat=lip.l_hat,
        xi_hat=xi.xi_hat,
        theta=theta,
        rho_cube=rho_cube,
        epsilon_budget=epsilon_budget,
        bound=bound,
        displacement=displacement,
        displacement_p_m=(float(dp_m[0]), float(dp_m[1])),
        g0_norm=xi.g0_norm,
        gprime_max_err=xi.gprime_max_err,
        sign_pos_min=sign_pos_min,
        sign_neg_max=sign_neg_max,
        gbl_grad_norm=gbl_grad_norm,
        polish_grad_norm=polish_grad_norm,
        convexity_ok=convexity_ok,
        rho_ok=rho_ok,
        gprime_ok=gprime_ok,
        budget_ok=budget_ok,
        displacement_ok=displacement_ok,
        signs_ok=signs_ok,
        passed=passed,
        verdict=verdict,
        seed=cfg.seed,
    )


def _report_failure(
    reason, cfg, eps, nw, u_p, sigma_used, lam, lambda_center, lip,
    gbl_grad_norm, polish_grad_norm,
) -> TheoremReport:
    return TheoremReport(
        n_w=nw,
        n_p=2,
        gamma=cfg.gamma,
        eps_depth_m=eps.depth_m,
        eps_sound_speed_ms=eps.sound_speed_ms,
        eps_norm=eps.norm,
        p_scales=(float(u_p[0]), float(u_p[1])),
        sigma_config=cfg.sigma,
        sigma_used=sigma_used,
        lambda_hat=lam.lambda_hat,
        lambda_center=lambda_center,
        hessian_asym=lam.asym_max,
        l_hat=lip.l_hat,
        xi_hat=math.nan,
        theta=math.nan,
        rho_cube=math.nan,
        epsilon_budget=math.nan,
        bound=math.nan,
        displacement=math.nan,
        displacement_p_m=(math.nan, math.nan),
        g0_norm=math.nan,
        gprime_max_err=math.nan,
        sign_pos_min=math.nan,
        sign_neg_max=math.nan,
        gbl_grad_norm=gbl_grad_norm,
        polish_grad_norm=polish_grad_norm,
        convexity_ok=False,
        rho_ok=False,
        gprime_ok=False,
        budget_ok=False,
        displacement_ok=False,
        signs_ok=False,
        passed=False,
        verdict=f"not-applicable: {reason}",
        seed=cfg.seed,
    )
