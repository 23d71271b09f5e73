"""Desk-scale source-seeking simulation.

A team of unicycle robots drives to batch query points chosen by the
acquisition layer (with the pairwise log-barrier active), measures a static
light field, and stops once the inferred maximum stays within 0.1 m of the
true brightest point for three consecutive iterations.

Collision avoidance follows a look-ahead scheme: the raw query is first
pulled to within the look-ahead radius (current speed times the look-ahead
time, floored so a stopped robot still moves), then projected onto the
intersection of half-space safety constraints obtained by discretizing and
linearizing the distance barrier condition

    d_dot(x_i, p_j) >= -k_alpha * (d(x_i, p_j) - d_safe)

against every other robot j. The projection is an exact small 2-D QP solved
by candidate enumeration. On top of that, a robot refuses any sub-step that
would land it within the safe distance of another robot's latest position,
which makes the separation invariant hold unconditionally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from . import _kernels
from .acquisition import GmesConfig, argmax_posterior_mean, gmes_select_batch
from .errors import OutOfDomainError, SafetyViolationError
from .gp import Dataset, DomainBox, KernelSpec, fit_posterior


@dataclass(frozen=True)
class Lamp:
    """Point light source at the given ground position and height."""

    position: tuple[float, float]
    height: float
    intensity: float


@dataclass(frozen=True)
class LightField:
    """Sum of inverse-square lamp contributions at ground level."""

    lamps: tuple[Lamp, ...]
    arena: DomainBox
    brightest: np.ndarray

    @classmethod
    def create(cls, lamps: Sequence[Lamp], arena: DomainBox) -> "LightField":
        """Build the field and locate its unique brightest ground point
        (1000x1000 grid scan refined by Nelder-Mead)."""
        fld = cls(tuple(lamps), arena, np.zeros(2))
        xs = np.linspace(arena.lower[0], arena.upper[0], 1000)
        ys = np.linspace(arena.lower[1], arena.upper[1], 1000)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
        vals = fld.value_many(grid)
        x0 = grid[int(np.argmax(vals))]
        res = minimize(lambda p: -fld.value_many(p[None, :])[0], x0,
                       method="Nelder-Mead",
                       options=dict(xatol=1e-10, fatol=1e-12, maxiter=500))
        best = np.clip(res.x, arena.lower, arena.upper)
        object.__setattr__(fld, "brightest", best)
        return fld

    def value_many(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.zeros(x.shape[0])
        for lamp in self.lamps:
            dx = x - np.asarray(lamp.position)
            out += lamp.intensity / (lamp.height ** 2 + np.sum(dx * dx, axis=1))
        return out


def field_value(fld: LightField, x: np.ndarray) -> float:
    """Field intensity at a single in-arena point."""
    x = np.asarray(x, dtype=float)
    if not fld.arena.contains(x, tol=1e-9):
        raise OutOfDomainError(f"point {x.tolist()} outside the arena")
    return float(fld.value_many(x[None, :])[0])


@dataclass(frozen=True)
class RobotState:
    """Pose, speed, and the target the robot is currently driving to."""

    position: np.ndarray
    heading: float
    linear_velocity: float
    current_target: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position",
                           np.asarray(self.position, dtype=float).copy())
        object.__setattr__(self, "current_target",
                           np.asarray(self.current_target, dtype=float).copy())


@dataclass(frozen=True)
class SafetyConfig:
    """Collision-avoidance parameters."""

    d_safe: float = 0.2
    k_alpha: float = 0.1
    t_lk: float = 1.0
    r_div: float = 0.25
    v_min: float = 0.05  # look-ahead floor so a stopped robot can move

    def __post_init__(self):
        if self.d_safe <= 0:
            raise ValueError("d_safe must be > 0")


@dataclass(frozen=True)
class ControllerConfig:
    """Unicycle controller gains, saturation, and sim-loop granularity."""

    kp_lin: float = 1.2
    kp_ang: float = 4.0
    v_max: float = 0.22
    omega_max: float = 2.84
    deadband: float = 0.01
    dt: float = 0.05
    arrival_tol: float = 0.05
    step_budget: int = 400


@dataclass
class SeekResult:
    """Outcome of one source-seeking run."""

    iterations_to_converge: int
    sim_time_s: float
    converged: bool
    trajectory: np.ndarray  # rows: t, robot_id, x, y, heading, v, tx, ty
    inferred_history: np.ndarray
    query_history: list
    min_separation: float
    stalls: int


# --------------------------------------------------------------------------
# controller pieces
# --------------------------------------------------------------------------


def lookahead_target(robot: RobotState, query: np.ndarray,
                     cfg: SafetyConfig) -> np.ndarray:
    """Pull the query to within the look-ahead radius of the robot."""
    query = np.asarray(query, dtype=float)
    r_lk = max(robot.linear_velocity, cfg.v_min) * cfg.t_lk
    offset = query - robot.position
    dist = float(np.linalg.norm(offset))
    if dist <= r_lk or dist == 0.0:
        return query.copy()
    return robot.position + (r_lk / dist) * offset


def _halfspace_constraints(p_i: np.ndarray, others: Sequence[np.ndarray],
                           cfg: SafetyConfig, dt: float):
    """Linearized safety constraints u.x >= c, one per other robot."""
    cons = []
    for p_j in others:
        diff = p_i - np.asarray(p_j, dtype=float)
        dist = float(np.linalg.norm(diff))
        if dist == 0.0:
            continue  # coincident positions handled by the hard invariant
        u = diff / dist
        required = (1.0 - cfg.k_alpha * dt) * dist + cfg.k_alpha * dt * cfg.d_safe
        cons.append((u, float(u @ p_j) + required))
    return cons


def cbf_project(robot: RobotState, lookahead: np.ndarray,
                others: Sequence[RobotState], cfg: SafetyConfig, dt: float,
                arena: Optional[DomainBox] = None) -> np.ndarray:
    """Closest point to the look-ahead target satisfying every constraint."""
    target, _ = _cbf_project_impl(
        robot.position, np.asarray(lookahead, dtype=float),
        [o.position for o in others], cfg, dt, arena)
    return target


def _cbf_project_impl(p_i: np.ndarray, goal: np.ndarray,
                      others: Sequence[np.ndarray], cfg: SafetyConfig,
                      dt: float, arena: Optional[DomainBox]):
    """Exact 2-D QP by enumeration of vertices of the active set.

    Returns (point, stalled). The robot position itself is always strictly
    feasible, so an empty feasible set cannot occur; the stall flag covers
    the defensive fallback anyway.
    """
    cons = _halfspace_constraints(p_i, others, cfg, dt)
    if arena is not None:
        for k in range(2):
            e = np.zeros(2)
            e[k] = 1.0
            cons.append((e.copy(), float(arena.lower[k])))
            cons.append((-e, -float(arena.upper[k])))

    def feasible(x):
        return all(u @ x >= c - 1e-9 for u, c in cons)

    if feasible(goal):
        return goal.copy(), False

    candidates = []
    for u, c in cons:
        # projection of the goal onto the constraint boundary
        candidates.append(goal + (c - u @ goal) * u)
    for a in range(len(cons)):
        for b in range(a + 1, len(cons)):
            u1, c1 = cons[a]
            u2, c2 = cons[b]
            mat = np.array([u1, u2])
            det = mat[0, 0] * mat[1, 1] - mat[0, 1] * mat[1, 0]
            if abs(det) < 1e-12:
                continue
            candidates.append(np.linalg.solve(mat, np.array([c1, c2])))

    best, best_d = None, math.inf
    for cand in candidates:
        if feasible(cand):
            dist = float(np.sum((cand - goal) ** 2))
            if dist < best_d - 1e-15:
                best, best_d = cand, dist
    if best is None:
        return p_i.copy(), True
    return best, False


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def step_robot(robot: RobotState, projected_target: np.ndarray, dt: float,
               ctrl: ControllerConfig = ControllerConfig(),
               arena: Optional[DomainBox] = None) -> RobotState:
    """One unicycle control step toward the projected target.

    Proportional heading and speed control with saturation; forward speed is
    gated by the heading alignment so the robot turns in place when pointed
    away from the target.
    """
    target = np.asarray(projected_target, dtype=float)
    offset = target - robot.position
    dist = float(np.linalg.norm(offset))
    if dist < ctrl.deadband:
        return replace(robot, linear_velocity=0.0, current_target=target)
    bearing = math.atan2(offset[1], offset[0])
    err = _wrap_angle(bearing - robot.heading)
    omega = max(-ctrl.omega_max, min(ctrl.omega_max, ctrl.kp_ang * err))
    v = min(ctrl.v_max, ctrl.kp_lin * dist) * max(0.0, math.cos(err))
    heading = _wrap_angle(robot.heading + omega * dt)
    pos = robot.position + v * dt * np.array([math.cos(heading),
                                              math.sin(heading)])
    if arena is not None:
        pos = arena.clip(pos)
    return RobotState(pos, heading, v, target)


# --------------------------------------------------------------------------
# scenarios
# --------------------------------------------------------------------------

_ARENA = DomainBox(np.array([0.0, 0.0]), np.array([3.0, 3.0]))
_STARTS = np.array([[0.3, 0.3], [0.3, 0.9], [0.9, 0.3], [0.9, 0.9]])

_SCENARIOS = {
    # two bright and two dim lamps at distinct heights; the bright lamp
    # hanging lowest defines the target
    "single": [Lamp((2.2, 2.1), 0.8, 2.0)],
    "sparse": [Lamp((2.4, 0.7), 0.6, 2.2), Lamp((0.6, 2.4), 1.4, 2.2),
               Lamp((0.7, 0.8), 1.0, 0.8), Lamp((2.3, 2.3), 1.2, 0.8)],
    "dense": [Lamp((1.9, 1.3), 0.6, 2.2), Lamp((1.1, 1.8), 1.4, 2.2),
              Lamp((1.2, 1.2), 1.0, 0.8), Lamp((1.8, 1.8), 1.2, 0.8)],
}


def scenario_names() -> list[str]:
    return sorted(_SCENARIOS)


def make_scenario(name: str) -> tuple[LightField, np.ndarray]:
    """Preset field plus default robot start positions."""
    try:
        lamps = _SCENARIOS[name.lower()]
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; valid: {scenario_names()}") \
            from None
    return LightField.create(lamps, _ARENA), _STARTS.copy()


def load_scenario(path: str) -> tuple[LightField, np.ndarray]:
    """Scenario text config: arena box, lamps, robot starts."""
    import yaml

    with open(path) as fh:
        raw = yaml.safe_load(fh)
    arena = DomainBox(np.asarray(raw["arena"]["lower"], dtype=float),
                      np.asarray(raw["arena"]["upper"], dtype=float))
    lamps = [Lamp(tuple(entry["position"]), float(entry["height"]),
                  float(entry["intensity"])) for entry in raw["lamps"]]
    starts = np.asarray(raw["starts"], dtype=float)
    return LightField.create(lamps, arena), starts


# --------------------------------------------------------------------------
# the seek loop
# --------------------------------------------------------------------------


def run_seek(scenario: LightField, m: int, algo_cfg: GmesConfig,
             safety: SafetyConfig, seed: int, *,
             starts: Optional[np.ndarray] = None,
             ctrl: ControllerConfig = ControllerConfig(),
             kernel: KernelSpec = KernelSpec(length_scale=0.2,
                                             signal_variance=1.0),
             sigma0: float = 0.02,
             t_max: int = 60,
             convergence_radius: float = 0.1,
             convergence_hits: int = 3,
             initial_data: Optional[Dataset] = None) -> SeekResult:
    """Drive m robots through the full observe / refit / select / move loop.

    The GP runs on arena coordinates scaled by the longest arena side (so
    distances stay isotropic) and on observations standardized by their
    running mean and deviation. The pairwise separation radius handed to the
    batch selector is ``safety.r_div`` mapped through the same scale.

    Raises :class:`SafetyViolationError` if two robots ever come within
    ``safety.d_safe``; returns ``converged=False`` after ``t_max`` iterations
    otherwise unsuccessful.
    """
    arena = scenario.arena
    if starts is None:
        starts = _STARTS
    if m > starts.shape[0]:
        raise ValueError(f"need {m} start positions, scenario provides "
                         f"{starts.shape[0]}")
    starts = np.asarray(starts, dtype=float)[:m]
    if m > 1 and _kernels.min_pairwise_distance(starts) <= safety.d_safe:
        raise ValueError("start positions violate the safe distance")

    scale = float(np.max(arena.widths))
    box_n = DomainBox((arena.lower - arena.lower) / scale,
                      (arena.upper - arena.lower) / scale)

    def to_norm(x):
        return (x - arena.lower) / scale

    def from_norm(xn):
        return arena.lower + xn * scale

    cfg = replace(algo_cfg, r_div=safety.r_div / scale, rng_seed=seed)
    obs_rng = np.random.default_rng([seed & 0xFFFFFFFF, 17])

    robots = [RobotState(starts[i], 0.0, 0.0, starts[i]) for i in range(m)]

    pts = starts.copy()
    vals = scenario.value_many(starts) + obs_rng.normal(0.0, sigma0, size=m)
    if initial_data is not None:
        pts = np.vstack([initial_data.points, pts])
        vals = np.concatenate([initial_data.values, vals])

    traj_rows: list[list[float]] = []
    inferred_hist = []
    query_hist = []
    sim_time = 0.0
    stalls = 0
    hits = 0
    converged = False
    min_sep = math.inf
    iterations = t_max

    def log_state(t_now):
        for i, r in enumerate(robots):
            traj_rows.append([t_now, float(i), r.position[0], r.position[1],
                              r.heading, r.linear_velocity,
                              r.current_target[0], r.current_target[1]])

    def check_separation():
        nonlocal min_sep
        if m < 2:
            return
        d = _kernels.min_pairwise_distance(np.array([r.position for r in robots]))
        min_sep = min(min_sep, d)
        if d <= safety.d_safe:
            raise SafetyViolationError(
                f"robot separation {d:.4f} m fell to or below d_safe "
                f"{safety.d_safe} m at sim time {sim_time:.2f} s")

    log_state(sim_time)
    check_separation()

    for t in range(1, t_max + 1):
        # refit on everything observed so far (standardized)
        offset = float(np.mean(vals))
        spread = max(float(np.std(vals)), 1e-3)
        kern = replace(kernel, noise_variance=(sigma0 / spread) ** 2)
        gp = fit_posterior(kern, Dataset(to_norm(pts), (vals - offset) / spread))

        inferred = from_norm(argmax_posterior_mean(gp, box_n, cfg))
        inferred_hist.append(inferred)
        hits = hits + 1 if np.linalg.norm(
            inferred - scenario.brightest) <= convergence_radius else 0
        if hits >= convergence_hits:
            converged = True
            iterations = t
            break

        batch, _ = gmes_select_batch(gp, t, box_n, m, cfg)
        targets = from_norm(batch.points)
        query_hist.append(targets)
        if m > 1 and _kernels.min_pairwise_distance(targets) <= safety.r_div:
            raise SafetyViolationError(
                "published batch violates the query separation radius")

        # drive phase: lockstep sub-steps, fixed robot order, projections
        # read the previous sub-step's positions
        for _ in range(ctrl.step_budget):
            dists = [float(np.linalg.norm(targets[i] - robots[i].position))
                     for i in range(m)]
            if all(dd <= ctrl.arrival_tol for dd in dists):
                break
            snapshot = [r.position.copy() for r in robots]
            for i in range(m):
                if dists[i] <= ctrl.arrival_tol:
                    robots[i] = replace(robots[i], linear_velocity=0.0,
                                        current_target=targets[i])
                    continue
                look = lookahead_target(robots[i], targets[i], safety)
                others = [snapshot[j] for j in range(m) if j != i]
                proj, stalled = _cbf_project_impl(
                    robots[i].position, look, others, safety, ctrl.dt, arena)
                if stalled:
                    stalls += 1
                cand = step_robot(robots[i], proj, ctrl.dt, ctrl, arena)
                # hard guard: never accept a sub-step that lands inside the
                # safe distance of any other robot's latest position
                ok = True
                for j in range(m):
                    if j != i and np.linalg.norm(
                            cand.position - robots[j].position) \
                            <= safety.d_safe + 1e-6:
                        ok = False
                        break
                if ok:
                    robots[i] = cand
                else:
                    stalls += 1
                    robots[i] = replace(robots[i], linear_velocity=0.0,
                                        current_target=targets[i])
            sim_time += ctrl.dt
            log_state(sim_time)
            check_separation()

        # observe wherever the robots actually are (arrival or budget)
        positions = np.array([r.position for r in robots])
        new_vals = scenario.value_many(positions) + obs_rng.normal(
            0.0, sigma0, size=m)
        pts = np.vstack([pts, positions])
        vals = np.concatenate([vals, new_vals])

    return SeekResult(
        iterations_to_converge=iterations,
        sim_time_s=sim_time,
        converged=converged,
        trajectory=np.array(traj_rows),
        inferred_history=np.array(inferred_hist),
        query_history=query_hist,
        min_separation=min_sep,
        stalls=stalls,
    )
