"""Target constraint sets and control-invariant safe domains.

A :class:`StateSet` couples a membership test with an optional scalar margin
(nonnegative exactly on the set) and a per-dimension bounding box used for
rejection sampling.  Unbounded sets (for example "stay outside a disk")
carry a box describing the operating region only.

:func:`mc_invariance_check` is the Monte-Carlo verifier used to accept a
candidate safe domain before it is trusted for labeling: near-boundary
states must admit, at every step, some sampled input that keeps the next
state inside.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .dynamics import BlackBoxStepper

Array = np.ndarray


class SamplingError(RuntimeError):
    """Rejection sampling acceptance rate too low to be practical."""


class StateSet:
    """State-space set with indicator, optional margin, and sampling box."""

    def __init__(self, name, dim, box_lo, box_hi, margin=None, contains=None,
                 bounded=True):
        if margin is None and contains is None:
            raise ValueError("need a margin function or an indicator")
        self.name = name
        self.dim = dim
        self.box_lo = np.asarray(box_lo, dtype=float)
        self.box_hi = np.asarray(box_hi, dtype=float)
        if self.box_lo.shape != (dim,) or self.box_hi.shape != (dim,):
            raise ValueError("bounding box must have shape (dim,)")
        if not np.all(self.box_lo < self.box_hi):
            raise ValueError("bounding box must satisfy lo < hi")
        self._margin = margin
        self._contains = contains
        self.bounded = bounded

    @property
    def has_margin(self) -> bool:
        return self._margin is not None

    def margin(self, x: Array) -> Array:
        """Scalar margin, >= 0 exactly on the set. Batched over leading dims."""
        if self._margin is None:
            raise ValueError(f"set {self.name!r} has no margin function")
        return np.asarray(self._margin(np.asarray(x, dtype=float)))

    def contains(self, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        if self._contains is not None:
            return np.asarray(self._contains(x))
        return self.margin(x) >= 0.0

    @property
    def bounding_box(self) -> tuple[Array, Array]:
        return self.box_lo, self.box_hi


class GridSet(StateSet):
    """Margin sampled on a rectilinear grid, multilinearly interpolated.

    Queries outside the grid are clamped to the boundary value minus the
    Euclidean distance to the box, so membership never extends past the grid.
    """

    def __init__(self, axes, values, name="gridset"):
        axes = [np.asarray(ax, dtype=float) for ax in axes]
        values = np.asarray(values, dtype=float)
        if values.shape != tuple(len(ax) for ax in axes):
            raise ValueError("values shape must match axis lengths")
        if not np.all(np.isfinite(values)):
            raise ValueError("grid values must be finite")
        for ax in axes:
            if len(ax) < 2 or np.any(np.diff(ax) <= 0):
                raise ValueError("grid axes must be strictly increasing, length >= 2")
        self.axes = axes
        self.values = values
        self._interp = RegularGridInterpolator(axes, values, method="linear")
        lo = np.array([ax[0] for ax in axes])
        hi = np.array([ax[-1] for ax in axes])
        super().__init__(name, len(axes), lo, hi, margin=self._grid_margin)

    def _grid_margin(self, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.dim)
        clipped = np.clip(flat, self.box_lo, self.box_hi)
        base = self._interp(clipped)
        outside = np.linalg.norm(flat - clipped, axis=-1)
        return (base - outside).reshape(x.shape[:-1])

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(f"gridset v1 {self.dim}\n")
            for k, ax in enumerate(self.axes):
                vals = " ".join(format(v, ".17g") for v in ax)
                fh.write(f"axis {k} {len(ax)} {vals}\n")
            fh.write("values\n")
            flat = self.values.reshape(-1)
            for i in range(0, flat.size, 8):
                fh.write(" ".join(format(v, ".17g") for v in flat[i:i + 8]) + "\n")

    @classmethod
    def read(cls, path, name=None):
        with open(path) as fh:
            tokens = fh.read().split()
        if tokens[:2] != ["gridset", "v1"]:
            raise ValueError(f"{path}: not a gridset v1 file")
        dim = int(tokens[2])
        pos = 3
        axes = []
        for k in range(dim):
            if tokens[pos] != "axis" or int(tokens[pos + 1]) != k:
                raise ValueError(f"{path}: malformed axis header for dimension {k}")
            count = int(tokens[pos + 2])
            pos += 3
            axes.append(np.array([float(t) for t in tokens[pos:pos + count]]))
            pos += count
        if tokens[pos] != "values":
            raise ValueError(f"{path}: missing values section")
        pos += 1
        shape = tuple(len(ax) for ax in axes)
        need = int(np.prod(shape))
        vals = np.array([float(t) for t in tokens[pos:pos + need]])
        if vals.size != need:
            raise ValueError(f"{path}: expected {need} values, found {vals.size}")
        return cls(axes, vals.reshape(shape), name=name or str(path))


# ---------------------------------------------------------------------------
# Bundled target sets X
# ---------------------------------------------------------------------------


def make_target_set(system_id: str) -> StateSet:
    """The per-system state constraint that trajectories must never leave."""
    if system_id == "jet_engine":
        return StateSet(
            "jet_engine_target", 2, [-0.5, -0.5], [0.5, 0.5],
            margin=lambda x: 0.5 - np.linalg.norm(x, axis=-1))
    if system_id == "pendulum":
        return StateSet(
            "pendulum_target", 2, [-0.3, -3.0], [0.3, 3.0],
            margin=lambda x: 0.3 - np.abs(x[..., 0]), bounded=False)
    if system_id == "cart_pole":
        return StateSet(
            "cart_pole_target", 4,
            [-0.5, -3.0, -np.pi, -3.0], [0.5, 3.0, np.pi, 3.0],
            margin=lambda x: 0.5 - np.abs(x[..., 0]), bounded=False)
    if system_id == "kinematic_vehicle":
        return StateSet(
            "vehicle_target", 4,
            [-8.0, -8.0, -np.pi, -0.5], [8.0, 8.0, np.pi, 3.0],
            margin=lambda x: np.hypot(x[..., 0], x[..., 1]) - 2.0, bounded=False)
    if system_id == "linear_test":
        return StateSet(
            "linear_target", 1, [-1.0], [1.0],
            margin=lambda x: 1.0 - np.abs(x[..., 0]))
    raise ValueError(f"no target set registered for system {system_id!r}")


# ---------------------------------------------------------------------------
# Safe domains S
# ---------------------------------------------------------------------------

# Quadratic level set for the pendulum: {x : x'Px <= c}.  P is the Lyapunov
# matrix of the saturating linear stabilizer; c is tuned so the ellipse sits
# inside |theta| < 0.3 and passes the Monte-Carlo invariance check.
PENDULUM_P = np.array([[10.0, 1.0], [1.0, 0.6]])
PENDULUM_C = 0.25

# Cart-pole braking set: position bound shrinks with outward velocity.
CARTPOLE_KAPPA = 0.25
CARTPOLE_V_CAP = 2.0


def _lyapunov_level(P, c, name="lyapunov_level"):
    P = np.asarray(P, dtype=float)
    c = float(c)
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise ValueError("P must be symmetric positive definite") from None
    if c <= 0:
        raise ValueError("level c must be positive")
    dim = P.shape[0]
    extents = np.sqrt(c * np.diag(np.linalg.inv(P)))

    def margin(x):
        return c - np.einsum("...i,ij,...j->...", x, P, x)

    return StateSet(name, dim, -extents, extents, margin=margin)


def _vehicle_cbf(a_max=1.0, r=2.0):
    def margin(x):
        px, py, th, v = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
        stop = v**2 / (4.0 * a_max)
        cx = px + stop * np.cos(th)
        cy = py + stop * np.sin(th)
        return np.hypot(cx, cy) - (r + stop)

    return StateSet(
        "vehicle_cbf", 4,
        [-8.0, -8.0, -np.pi, 0.0], [8.0, 8.0, np.pi, 2.0],
        margin=margin, bounded=False)


def _cartpole_braking(kappa=CARTPOLE_KAPPA, v_cap=CARTPOLE_V_CAP,
                      theta_cap=0.2, omega_cap=1.0):
    def margin(x):
        s, sd, th, om = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
        brake = kappa * np.maximum(0.0, s * sd) * np.abs(sd)
        t_pos = 0.5 - brake - np.abs(s)
        t_th = theta_cap - np.abs(th)
        t_om = omega_cap - np.abs(om)
        t_v = v_cap - np.abs(sd)
        return np.minimum(np.minimum(t_pos, t_th), np.minimum(t_om, t_v))

    return StateSet(
        "cartpole_braking", 4,
        [-0.5, -v_cap, -theta_cap, -omega_cap],
        [0.5, v_cap, theta_cap, omega_cap],
        margin=margin)


def make_safe_domain(system_id: str, kind: str, **params) -> StateSet:
    """Construct a safe domain for a system.

    Kinds: ``lyapunov_level`` (quadratic level set, defaults tuned for the
    pendulum), ``vehicle_cbf`` (stopping-distance barrier around the origin
    disk), ``cartpole_braking`` (hand-designed braking set), ``grid_file``
    (load a :class:`GridSet` margin from disk).
    """
    if kind == "lyapunov_level":
        if system_id == "pendulum":
            P = params.get("P", PENDULUM_P)
            c = params.get("c", PENDULUM_C)
        else:
            P, c = params["P"], params["c"]
        return _lyapunov_level(P, c, name=f"{system_id}_lyapunov")
    if kind == "vehicle_cbf":
        return _vehicle_cbf(a_max=params.get("a_max", 1.0), r=params.get("r", 2.0))
    if kind == "cartpole_braking":
        return _cartpole_braking(
            kappa=params.get("kappa", CARTPOLE_KAPPA),
            v_cap=params.get("v_cap", CARTPOLE_V_CAP),
            theta_cap=params.get("theta_cap", 0.2),
            omega_cap=params.get("omega_cap", 1.0))
    if kind == "grid_file":
        return GridSet.read(params["path"])
    raise ValueError(f"unknown safe-domain kind {kind!r}")


# ---------------------------------------------------------------------------
# Sampling and verification
# ---------------------------------------------------------------------------


def sample_in_set(sset: StateSet, n: int, rng: np.random.Generator,
                  max_proposals: int | None = None) -> Array:
    """Uniform samples on the set via rejection over its bounding box."""
    if n <= 0:
        return np.empty((0, sset.dim))
    cap = max_proposals or max(50_000, 2_000 * n)
    out = []
    got = 0
    proposed = 0
    chunk = max(1024, 4 * n)
    while got < n:
        if proposed >= cap:
            rate = got / max(proposed, 1)
            raise SamplingError(
                f"acceptance rate {rate:.2e} too low sampling {sset.name!r} "
                f"({got}/{n} after {proposed} proposals)")
        m = min(chunk, cap - proposed)
        x = rng.uniform(sset.box_lo, sset.box_hi, size=(m, sset.dim))
        keep = x[np.asarray(sset.contains(x), dtype=bool)]
        proposed += m
        if keep.size:
            out.append(keep)
            got += len(keep)
    return np.concatenate(out)[:n]


@dataclass
class InvarianceReport:
    pass_fraction: float
    failing_states: Array
    n_checked: int
    band: float
    empty_band: bool = False

    def __str__(self):
        return (f"invariance check: {self.pass_fraction:.4f} pass "
                f"({self.n_checked} states, band {self.band:.4g})")


def mc_invariance_check(stepper: BlackBoxStepper, sset: StateSet,
                        n_states: int = 500, n_inputs: int = 50,
                        horizon_steps: int = 200, dt: float = 0.02,
                        rng: np.random.Generator | None = None,
                        band_frac: float = 0.05) -> InvarianceReport:
    """Verify control invariance of ``sset`` by greedy input search.

    Samples states just inside the boundary (margin within ``band_frac`` of
    the margin's dynamic range over the box), then at every step tries
    ``n_inputs`` inputs sampled uniformly from U and follows the one with the
    largest next-state margin.  A state passes if it survives
    ``horizon_steps`` steps without leaving the set.
    """
    rng = rng or np.random.default_rng(0)
    if not sset.has_margin:
        raise ValueError("invariance check requires a margin function")
    lo, hi = stepper.system.input_box
    m = stepper.system.input_dim

    probe = rng.uniform(sset.box_lo, sset.box_hi, size=(4096, sset.dim))
    pm = sset.margin(probe)
    band = band_frac * float(pm.max() - pm.min())

    # Near-boundary states, inside the set.
    collected = []
    got = 0
    for _ in range(2_000):
        x = rng.uniform(sset.box_lo, sset.box_hi, size=(4 * n_states, sset.dim))
        mg = sset.margin(x)
        keep = x[(mg >= 0.0) & (mg <= band)]
        if keep.size:
            collected.append(keep)
            got += len(keep)
        if got >= n_states:
            break
    if got == 0:
        return InvarianceReport(1.0, np.empty((0, sset.dim)), 0, band, empty_band=True)
    starts = np.concatenate(collected)[:n_states]

    if horizon_steps <= 0:
        return InvarianceReport(1.0, np.empty((0, sset.dim)), len(starts), band)

    x = starts.copy()
    alive = np.ones(len(starts), dtype=bool)
    for _ in range(horizon_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        xa = x[idx]
        u = rng.uniform(lo, hi, size=(idx.size, n_inputs, m))
        xb = np.broadcast_to(xa[:, None, :], (idx.size, n_inputs, sset.dim))
        nxt = stepper.step(xb, u, dt)
        mg = sset.margin(nxt)
        best = np.argmax(mg, axis=1)
        best_mg = mg[np.arange(idx.size), best]
        ok = best_mg >= 0.0
        alive[idx[~ok]] = False
        x[idx[ok]] = nxt[np.arange(idx.size), best][ok]

    failing = starts[~alive]
    return InvarianceReport(float(alive.mean()), failing, len(starts), band)
