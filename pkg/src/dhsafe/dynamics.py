"""Control-affine dynamical systems and sample-and-hold integration.

All bundled systems have the form ``xdot = f(x) + g(x) u`` with a compact
box of admissible inputs. ``drift`` and ``actuation`` are written with numpy
broadcasting so that a whole batch of states can be stepped at once; this is
what makes lookahead labeling of millions of (state, input) pairs cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Array = np.ndarray

SYSTEM_IDS = ("pendulum", "jet_engine", "kinematic_vehicle", "cart_pole", "linear_test")


class IntegrationFault(RuntimeError):
    """Integration produced a non-finite state or derivative."""

    def __init__(self, message: str, state=None):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class ControlAffineSystem:
    """Dynamics ``xdot = f(x) + g(x) u`` with box-bounded input.

    ``drift`` maps ``(..., n)`` state arrays to ``(..., n)`` derivatives and
    ``actuation`` maps ``(..., n)`` to ``(..., n, m)`` matrices.  Both must
    accept arbitrary leading batch dimensions.  Instances are immutable and
    safe to share across workers.
    """

    name: str
    state_dim: int
    input_dim: int
    input_lo: Array
    input_hi: Array
    drift: Callable[[Array], Array]
    actuation: Callable[[Array], Array]
    angle_dims: tuple = ()

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.input_lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.input_hi, dtype=float))
        object.__setattr__(self, "input_lo", lo)
        object.__setattr__(self, "input_hi", hi)
        if lo.shape != (self.input_dim,) or hi.shape != (self.input_dim,):
            raise ValueError("input bounds must have shape (input_dim,)")
        if not np.all(lo < hi):
            raise ValueError("input box must satisfy lo < hi in every dimension")

    @property
    def input_box(self) -> tuple[Array, Array]:
        return self.input_lo, self.input_hi

    def clip_input(self, u: Array) -> Array:
        return np.clip(np.asarray(u, dtype=float), self.input_lo, self.input_hi)

    def xdot(self, x: Array, u: Array) -> Array:
        """Evaluate f(x) + g(x) u, broadcasting over leading dimensions."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        gu = np.einsum("...nm,...m->...n", self.actuation(x), u)
        return self.drift(x) + gu


def rk4_step(system: ControlAffineSystem, x: Array, u: Array, dt: float) -> Array:
    """One classical 4th-order Runge-Kutta step with the input held constant.

    Supports batched ``x`` (and matching batched ``u``).  Raises
    :class:`IntegrationFault` if the result is non-finite.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    k1 = system.xdot(x, u)
    k2 = system.xdot(x + 0.5 * dt * k1, u)
    k3 = system.xdot(x + 0.5 * dt * k2, u)
    k4 = system.xdot(x + dt * k3, u)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise IntegrationFault(f"non-finite state while stepping {system.name}", state=out)
    return out


class BlackBoxStepper:
    """Sample-and-hold stepping interface over a system.

    Callers only see ``step(x, u, dt)``; the underlying ODE is integrated
    with enough RK4 substeps to keep each substep at most ``dt_max``.
    Deterministic: identical arguments give identical outputs.  The
    ``step_count`` attribute counts RK4 substeps times batch size and is the
    only mutable state; use one stepper per worker when parallelizing.
    """

    def __init__(self, system: ControlAffineSystem, dt_max: float = 0.01):
        if dt_max <= 0:
            raise ValueError("dt_max must be positive")
        self.system = system
        self.dt_max = dt_max
        self.step_count = 0

    def step(self, x: Array, u: Array, dt: float) -> Array:
        n_sub = max(1, math.ceil(dt / self.dt_max - 1e-12))
        return self.step_n(x, u, dt, n_sub)

    def step_n(self, x: Array, u: Array, dt: float, n_sub: int) -> Array:
        if n_sub < 1:
            raise ValueError("n_sub must be >= 1")
        h = dt / n_sub
        x = np.asarray(x, dtype=float)
        batch = int(np.prod(x.shape[:-1])) if x.ndim > 1 else 1
        for _ in range(n_sub):
            x = rk4_step(self.system, x, u, h)
        self.step_count += n_sub * batch
        return x


def substep_rollout(stepper: BlackBoxStepper, x: Array, u: Array, dt: float, n_sub: int) -> Array:
    """Hold ``u`` for ``dt`` by applying ``n_sub`` RK4 steps of size ``dt/n_sub``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return stepper.step_n(x, u, dt, n_sub)


# ---------------------------------------------------------------------------
# Bundled systems
# ---------------------------------------------------------------------------


def _pendulum(mass=1.0, length=1.0, gravity=9.81, max_torque=2.0) -> ControlAffineSystem:
    """Planar pendulum around the upright equilibrium, torque input.

    theta is the angle from upright, so gravity is destabilizing:
    theta_dd = (gravity/length) sin(theta) + u / (mass length^2).
    """
    if mass <= 0 or length <= 0:
        raise ValueError("mass and length must be positive")
    w_g = gravity / length
    w_u = 1.0 / (mass * length**2)

    def drift(x):
        out = np.empty_like(x)
        out[..., 0] = x[..., 1]
        out[..., 1] = w_g * np.sin(x[..., 0])
        return out

    def actuation(x):
        g = np.zeros(x.shape[:-1] + (2, 1))
        g[..., 1, 0] = w_u
        return g

    return ControlAffineSystem("pendulum", 2, 1, [-max_torque], [max_torque], drift, actuation)


def _jet_engine(max_input=1.0) -> ControlAffineSystem:
    """Two-state compressor surge model with the second state driven directly."""

    def drift(x):
        out = np.empty_like(x)
        x1 = x[..., 0]
        out[..., 0] = -x[..., 1] - 1.5 * x1**2 - 0.5 * x1**3
        out[..., 1] = 0.0
        return out

    def actuation(x):
        g = np.zeros(x.shape[:-1] + (2, 1))
        g[..., 1, 0] = 1.0
        return g

    return ControlAffineSystem("jet_engine", 2, 1, [-max_input], [max_input], drift, actuation)


def _kinematic_vehicle(max_yaw_rate=2.0, max_accel=1.0) -> ControlAffineSystem:
    """Kinematic unicycle: state (px, py, heading, speed), input (yaw rate, accel)."""

    def drift(x):
        out = np.zeros_like(x)
        out[..., 0] = x[..., 3] * np.cos(x[..., 2])
        out[..., 1] = x[..., 3] * np.sin(x[..., 2])
        return out

    def actuation(x):
        g = np.zeros(x.shape[:-1] + (4, 2))
        g[..., 2, 0] = 1.0
        g[..., 3, 1] = 1.0
        return g

    return ControlAffineSystem(
        "kinematic_vehicle", 4, 2,
        [-max_yaw_rate, -max_accel], [max_yaw_rate, max_accel],
        drift, actuation, angle_dims=(2,),
    )


def _cart_pole(cart_mass=1.0, pole_mass=0.1, half_length=0.5, gravity=9.8,
               max_force=10.0) -> ControlAffineSystem:
    """Cart-pole with a continuous force input.

    State (s, s_dot, theta, theta_dot) with theta measured from upright.
    The standard equations of motion are affine in the force, so the drift
    and actuation columns are obtained by splitting the accelerations into
    their F = 0 part and the coefficient of F.
    """
    if cart_mass <= 0 or pole_mass <= 0 or half_length <= 0:
        raise ValueError("masses and half_length must be positive")
    total = cart_mass + pole_mass
    ml = pole_mass * half_length

    def _denom(cos_t):
        return half_length * (4.0 / 3.0 - pole_mass * cos_t**2 / total)

    def drift(x):
        s_dot = x[..., 1]
        theta = x[..., 2]
        theta_dot = x[..., 3]
        sin_t, cos_t = np.sin(theta), np.cos(theta)
        denom = _denom(cos_t)
        theta_dd0 = (gravity * sin_t - cos_t * (ml * theta_dot**2 * sin_t) / total) / denom
        s_dd0 = (ml * (theta_dot**2 * sin_t - theta_dd0 * cos_t)) / total
        out = np.empty_like(x)
        out[..., 0] = s_dot
        out[..., 1] = s_dd0
        out[..., 2] = theta_dot
        out[..., 3] = theta_dd0
        return out

    def actuation(x):
        cos_t = np.cos(x[..., 2])
        denom = _denom(cos_t)
        theta_dd1 = -cos_t / (total * denom)
        s_dd1 = (1.0 - ml * cos_t * theta_dd1) / total
        g = np.zeros(x.shape[:-1] + (4, 1))
        g[..., 1, 0] = s_dd1
        g[..., 3, 0] = theta_dd1
        return g

    return ControlAffineSystem("cart_pole", 4, 1, [-max_force], [max_force],
                               drift, actuation)


def _linear_test(drift_coef=0.0, gain=1.0, max_input=1.0, bias=0.0) -> ControlAffineSystem:
    """One-dimensional xdot = drift_coef * x + bias + gain * u, for exact-answer tests."""

    def drift(x):
        return drift_coef * x + bias

    def actuation(x):
        return np.full(x.shape[:-1] + (1, 1), gain)

    return ControlAffineSystem("linear_test", 1, 1, [-max_input], [max_input],
                               drift, actuation)


_FACTORIES = {
    "pendulum": _pendulum,
    "jet_engine": _jet_engine,
    "kinematic_vehicle": _kinematic_vehicle,
    "cart_pole": _cart_pole,
    "linear_test": _linear_test,
}


def make_system(system_id: str, **params) -> ControlAffineSystem:
    """Build a registered system by id, with keyword parameter overrides."""
    try:
        factory = _FACTORIES[system_id]
    except KeyError:
        raise ValueError(f"unknown system id {system_id!r}; known: {SYSTEM_IDS}") from None
    return factory(**params)


# Control periods used by the experiment harness, one per system.
DEFAULT_CONTROL_DT = {
    "pendulum": 0.05,
    "jet_engine": 0.01,
    "kinematic_vehicle": 0.05,
    "cart_pole": 0.02,
    "linear_test": 0.1,
}


# ---------------------------------------------------------------------------
# Reference controllers
# ---------------------------------------------------------------------------


def wrap_angle(a):
    """Wrap an angle to (-pi, pi]."""
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)


def reference_controller(system_id: str, kind: str, **params) -> Callable[[Array, float], Array]:
    """Return a deterministic policy ``(x, t) -> u`` with outputs clipped to U.

    Kinds:
      pendulum/"bang_bang": toggles between the torque extremes on a fixed
        period, then switches to a linear stabilizer after ``switch_time``.
      pendulum/"stabilize": the linear stabilizer alone.
      kinematic_vehicle/"goal_seek": heading/speed feedback toward a goal point.
      jet_engine/"stabilize": backstepping-style feedback to the origin.
      any/"zero": u = 0.
    """
    system = make_system(system_id)
    lo, hi = system.input_box

    def clipped(fn):
        def policy(x, t=0.0):
            return np.clip(np.asarray(fn(np.asarray(x, dtype=float), t), dtype=float), lo, hi)
        return policy

    if kind == "zero":
        return clipped(lambda x, t: np.zeros(system.input_dim))

    if system_id == "pendulum" and kind in ("bang_bang", "stabilize"):
        switch_time = params.get("switch_time", 12.0)
        period = params.get("period", 2.0)
        k_th = params.get("k_theta", 20.0)
        k_om = params.get("k_omega", 6.0)
        u_max = hi[0]

        def pend(x, t):
            if kind == "bang_bang" and t < switch_time:
                phase = int(t / (period / 2.0)) % 2
                return np.array([u_max if phase == 0 else -u_max])
            return np.array([-k_th * x[0] - k_om * x[1]])

        return clipped(pend)

    if system_id == "kinematic_vehicle" and kind == "goal_seek":
        goal = np.asarray(params.get("goal", (4.0, 0.0)), dtype=float)
        k_head = params.get("heading_gain", 2.0)
        k_speed = params.get("speed_gain", 1.0)
        cruise = params.get("cruise_speed", 1.5)
        slow_radius = params.get("slow_radius", 2.0)

        def vehicle(x, t):
            delta = goal - x[:2]
            dist = float(np.hypot(delta[0], delta[1]))
            if dist < 1e-9:
                return np.array([0.0, -k_speed * x[3]])
            bearing = math.atan2(delta[1], delta[0])
            omega = k_head * wrap_angle(bearing - x[2])
            v_des = cruise * min(1.0, dist / slow_radius)
            return np.array([omega, k_speed * (v_des - x[3])])

        return clipped(vehicle)

    if system_id == "jet_engine" and kind == "stabilize":
        k1 = params.get("k1", 1.0)
        k2 = params.get("k2", 3.0)

        def jet(x, t):
            return np.array([-k2 * (x[1] - k1 * x[0])])

        return clipped(jet)

    raise ValueError(f"unknown reference kind {kind!r} for system {system_id!r}")
