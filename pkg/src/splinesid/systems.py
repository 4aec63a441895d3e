"""Benchmark systems: clean truth generation, noise injection, data I/O.

Each benchmark bundles a ground-truth field or trajectory, the canonical
candidate library for it, and the true coefficient matrix aligned to that
library, so discovered models can be scored without bookkeeping at call
sites.  Synthetic noise is zero-mean Gaussian with per-state standard
deviation equal to ``level`` times the standard deviation of that state's
clean values.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DivergenceError
from .library import (
    TermDescriptor,
    build_pde_library,
    build_polynomial_library,
)

__all__ = [
    "Benchmark",
    "Truth",
    "Dataset",
    "BENCHMARKS",
    "get_benchmark",
    "make_truth",
    "make_dataset",
    "add_noise",
    "integrate_rk4",
    "hare_lynx_data",
    "save_dataset",
    "load_dataset",
]


@dataclass(frozen=True)
class Benchmark:
    """Static description of a benchmark problem."""

    name: str
    kind: str                        # 'ode' | 'evolution' | 'steady' | 'real'
    state_names: tuple[str, ...]
    axes: tuple[str, ...]            # ('t',), ('x', 't'), or ('x', 'y')
    lhs_deriv: tuple[int, ...]       # derivative defining the left-hand side
    params: dict

    @property
    def lhs_labels(self) -> tuple[str, ...]:
        if self.axes == ("t",):
            return tuple(f"d{n}/dt" for n in self.state_names)
        suffix = "".join(ax * q for ax, q in zip(self.axes, self.lhs_deriv))
        return (f"u_{suffix}",)


@dataclass(frozen=True)
class Truth:
    """Clean fields plus the coefficients that generated them."""

    benchmark: Benchmark
    coords: np.ndarray               # (n,) ODE times or (n, 2) plane points
    values: np.ndarray               # (n, d) clean states
    descriptors: tuple[TermDescriptor, ...]
    coefficients: np.ndarray         # (m, d) aligned to descriptors
    grid_shape: tuple[int, ...] | None = None


@dataclass(frozen=True)
class Dataset:
    """Measurements handed to discovery: possibly noisy, possibly subsampled."""

    benchmark: Benchmark
    coords: np.ndarray
    values: np.ndarray               # noisy measurements
    truth: np.ndarray                # clean values at the same coordinates
    noise_level: float
    seed: int
    grid_shape: tuple[int, ...] | None = None


# year, hares (thousands), lynx (thousands); annual pelt records 1900-1920
_HARE_LYNX = np.array([
    [1900, 30.0, 4.0],
    [1901, 47.2, 6.1],
    [1902, 70.2, 9.8],
    [1903, 77.4, 35.2],
    [1904, 36.3, 59.4],
    [1905, 20.6, 41.7],
    [1906, 18.1, 19.0],
    [1907, 21.4, 13.0],
    [1908, 22.0, 8.3],
    [1909, 25.4, 9.1],
    [1910, 27.1, 7.4],
    [1911, 40.3, 8.0],
    [1912, 57.0, 12.3],
    [1913, 76.6, 19.5],
    [1914, 52.3, 45.7],
    [1915, 19.5, 51.1],
    [1916, 11.2, 29.7],
    [1917, 7.6, 15.8],
    [1918, 14.6, 9.7],
    [1919, 16.2, 10.1],
    [1920, 24.7, 8.6],
])

# predator-prey rates fit to the pelt records by a reference ODE solver
_HARE_LYNX_COEFFS = {"x": 0.4807, "xy_x": -0.0248, "y": -0.9272, "xy_y": 0.0276}


def hare_lynx_data() -> tuple[np.ndarray, np.ndarray]:
    """Years since 1900 and populations (thousands): hares, lynx."""
    return _HARE_LYNX[:, 0] - 1900.0, _HARE_LYNX[:, 1:].copy()


def integrate_rk4(rhs, u0: np.ndarray, dt: float, steps: int) -> np.ndarray:
    """Classical fourth-order Runge-Kutta with fixed step.

    Returns the trajectory including the initial state, shape
    ``(steps + 1, d)``.  Raises :class:`DivergenceError` with the step
    index if the state stops being finite.
    """
    u = np.asarray(u0, dtype=float).copy()
    out = np.empty((steps + 1, u.size))
    out[0] = u
    t = 0.0
    for i in range(steps):
        k1 = rhs(t, u)
        k2 = rhs(t + dt / 2, u + dt / 2 * k1)
        k3 = rhs(t + dt / 2, u + dt / 2 * k2)
        k4 = rhs(t + dt, u + dt * k3)
        u = u + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(u)):
            raise DivergenceError(f"integration diverged at step {i + 1}", step=i + 1)
        out[i + 1] = u
        t += dt
    return out


def add_noise(values: np.ndarray, level: float, seed) -> np.ndarray:
    """Add zero-mean Gaussian noise scaled per column.

    The per-column standard deviation is ``level`` times the standard
    deviation of that column's clean values.
    """
    if level < 0:
        raise ConfigError(f"noise level must be nonnegative, got {level}")
    values = np.asarray(values, dtype=float)
    if level == 0:
        return values.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sigma = level * values.std(axis=0)
    return values + rng.normal(size=values.shape) * sigma


def _coeff_matrix(descriptors, per_state: list[dict[str, float]], state_names, axes):
    labels = [t.label(tuple(state_names), tuple(axes)) for t in descriptors]
    out = np.zeros((len(descriptors), len(per_state)))
    for j, mapping in enumerate(per_state):
        for label, value in mapping.items():
            if label not in labels:
                raise ConfigError(f"true term {label!r} missing from library")
            out[labels.index(label), j] = value
    return out


def _vdp_rhs(mu):
    def rhs(t, u):
        x, y = u
        return np.array([y, -x + mu * (1 - x * x) * y])
    return rhs


def _lorenz96_rhs(forcing):
    def rhs(t, u):
        return (np.roll(u, -1) - np.roll(u, 2)) * np.roll(u, 1) - u + forcing
    return rhs


def _lotka_volterra_rhs(a, b, c, d):
    def rhs(t, u):
        x, y = u
        return np.array([a * x - b * x * y, -c * y + d * x * y])
    return rhs


def _sample_ode(rhs, u0, t_final, samples, spin_up=0.0, dt_max=2e-3):
    if spin_up > 0:
        steps = int(np.ceil(spin_up / dt_max))
        u0 = integrate_rk4(rhs, u0, spin_up / steps, steps)[-1]
    times = np.linspace(0.0, t_final, samples)
    refine = max(1, int(np.ceil((times[1] - times[0]) / dt_max)))
    dt = (times[1] - times[0]) / refine
    traj = integrate_rk4(rhs, u0, dt, refine * (samples - 1))
    return times, traj[::refine]


def _burgers_truth(nu, x_lo, x_hi, nx, t_final, nt, source, fine_nx, ic,
                   scheme="euler2"):
    """Explicit FD reference solution, periodic in x, downsampled.

    "euler2" uses forward Euler with 3-point stencils; "heun4" uses Heun
    steps with 5-point 4th-order stencils, which reaches the same accuracy
    on a much coarser fine grid.
    """
    dx = (x_hi - x_lo) / fine_nx
    x = x_lo + dx * np.arange(fine_nx)
    u = ic(x)
    stride = fine_nx // nx
    if stride * nx != fine_nx:
        raise ConfigError(f"fine grid {fine_nx} not divisible by coarse grid {nx}")
    # diffusive stability bound with a safety factor; the 5-point Laplacian
    # stencil has spectral radius 16/3 nu/dx^2, the 3-point one 4 nu/dx^2
    safety = 0.35 if scheme == "heun4" else 0.4
    dt_bound = safety * dx * dx / nu
    out_every = max(1, int(np.ceil(t_final / ((nt - 1) * dt_bound))))
    dt = t_final / ((nt - 1) * out_every)
    snaps = np.empty((nt, nx))
    snaps[0] = u[::stride]
    t = 0.0
    if scheme == "heun4":
        c1 = 1.0 / (12.0 * dx)
        c2 = nu / (12.0 * dx * dx)

        def rhs(v, tv):
            vm2, vm1 = np.roll(v, 2), np.roll(v, 1)
            vp1, vp2 = np.roll(v, -1), np.roll(v, -2)
            ux = c1 * (vm2 - 8.0 * vm1 + 8.0 * vp1 - vp2)
            uxx = c2 * (-vm2 + 16.0 * vm1 - 30.0 * v + 16.0 * vp1 - vp2)
            dv = uxx - v * ux
            if source is not None:
                dv += source(x, tv)
            return dv

        for k in range(1, nt):
            for _ in range(out_every):
                k1 = rhs(u, t)
                k2 = rhs(u + dt * k1, t + dt)
                u += 0.5 * dt * (k1 + k2)
                t += dt
            if not np.all(np.isfinite(u)):
                raise DivergenceError(f"reference solve diverged at t={t:.4f}")
            snaps[k] = u[::stride]
    else:
        # allocation-free inner loop; the step count is large
        up, um = np.empty_like(u), np.empty_like(u)
        work, du = np.empty_like(u), np.empty_like(u)
        inv2dx, invdx2 = 1.0 / (2 * dx), 1.0 / (dx * dx)
        for k in range(1, nt):
            for _ in range(out_every):
                up[:-1] = u[1:]
                up[-1] = u[0]
                um[1:] = u[:-1]
                um[0] = u[-1]
                np.subtract(up, um, out=work)          # 2 dx u_x
                np.multiply(u, work, out=du)
                du *= -inv2dx                          # -u u_x
                np.add(up, um, out=work)
                work -= u
                work -= u
                work *= nu * invdx2                    # nu u_xx
                du += work
                if source is not None:
                    du += source(x, t)
                du *= dt
                u += du
                t += dt
            if not np.all(np.isfinite(u)):
                raise DivergenceError(f"reference solve diverged at t={t:.4f}")
            snaps[k] = u[::stride]
    x_coarse = x[::stride]
    t_coarse = np.linspace(0.0, t_final, nt)
    return x_coarse, t_coarse, snaps


def _plane_coords(x, y):
    xx, yy = np.meshgrid(x, y, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


BENCHMARKS = {
    "vdp": Benchmark(
        "vdp", "ode", ("x", "y"), ("t",), (1,),
        {"mu": 0.5, "u0": (2.0, 0.0), "t_final": 10.0, "samples": 500,
         "max_degree": 3, "dt_max": 2e-3},
    ),
    "lorenz96": Benchmark(
        "lorenz96", "ode", (), ("t",), (1,),
        {"n": 6, "forcing": 8.0, "t_final": 10.0, "samples": 500,
         "spin_up": 5.0, "max_degree": 3, "dt_max": 2e-3},
    ),
    "lotka_volterra": Benchmark(
        "lotka_volterra", "ode", ("x", "y"), ("t",), (1,),
        {"a": 0.4807, "b": 0.0248, "c": 0.9272, "d": 0.0276,
         "u0": (30.0, 4.0), "t_final": 20.0, "samples": 201, "dt_max": 2e-3},
    ),
    "hare_lynx": Benchmark(
        "hare_lynx", "real", ("x", "y"), ("t",), (1,), {},
    ),
    "advection": Benchmark(
        "advection", "evolution", ("u",), ("x", "t"), (0, 1),
        {"x_hi": 2 * np.pi, "t_final": 2 * np.pi, "nx": 50, "nt": 50,
         "max_degree": 3, "max_deriv": 3},
    ),
    "burgers": Benchmark(
        "burgers", "evolution", ("u",), ("x", "t"), (0, 1),
        {"nu": 0.5, "x_lo": -8.0, "x_hi": 8.0, "t_final": 10.0,
         "nx": 128, "nt": 101, "fine_nx": 4096,
         "max_degree": 3, "max_deriv": 3},
    ),
    "burgers_source": Benchmark(
        "burgers_source", "evolution", ("u",), ("x", "t"), (0, 1),
        {"nu": 0.1, "x_lo": 0.0, "x_hi": 2 * np.pi, "t_final": 10.0,
         "nx": 201, "nt": 101, "fine_nx": 804,
         "max_degree": 3, "max_deriv": 3},
    ),
    "heat": Benchmark(
        "heat", "steady", ("u",), ("x", "y"), (0, 2),
        {"x_hi": 2 * np.pi, "y_hi": 1.0, "nx": 51, "ny": 51,
         "max_degree": 3, "max_deriv": 3},
    ),
    "poisson": Benchmark(
        "poisson", "steady", ("u",), ("x", "y"), (0, 2),
        {"x_hi": 2 * np.pi, "y_hi": 2 * np.pi, "nx": 101, "ny": 101,
         "max_degree": 3, "max_deriv": 3},
    ),
}


def get_benchmark(name: str, **overrides) -> Benchmark:
    if name not in BENCHMARKS:
        raise ConfigError(f"unknown benchmark {name!r}; known: {sorted(BENCHMARKS)}")
    bench = BENCHMARKS[name]
    if overrides:
        params = dict(bench.params)
        for key, value in overrides.items():
            if key not in params:
                raise ConfigError(f"benchmark {name!r} has no parameter {key!r}")
            params[key] = value
        bench = replace(bench, params=params)
    if name == "lorenz96":
        n = int(bench.params["n"])
        bench = replace(bench, state_names=tuple(f"X{i+1}" for i in range(n)))
    return bench


_RESTRICTED_LV = (
    TermDescriptor(((0, (0,), 1),)),                     # x
    TermDescriptor(((1, (0,), 1),)),                     # y
    TermDescriptor(((0, (0,), 1), (1, (0,), 1))),        # xy
    TermDescriptor(((0, (0,), 2), (1, (0,), 1))),        # x^2 y
    TermDescriptor(((0, (0,), 1), (1, (0,), 2))),        # x y^2
)


def default_library(bench: Benchmark) -> tuple[TermDescriptor, ...]:
    """Canonical candidate library for a benchmark."""
    if bench.name in ("lotka_volterra", "hare_lynx"):
        return _RESTRICTED_LV
    if bench.kind == "ode":
        return build_polynomial_library(
            len(bench.state_names), int(bench.params.get("max_degree", 3))
        )
    forcings = ()
    if bench.name == "burgers_source":
        forcings = ("sin(x)sin(t)",)
    elif bench.name == "poisson":
        forcings = ("sin(x)sin(y)",)
    return build_pde_library(
        int(bench.params.get("max_degree", 3)),
        int(bench.params.get("max_deriv", 3)),
        forcings=forcings,
    )


_TRUTH_CACHE: dict = {}


def make_truth(name: str, **overrides) -> Truth:
    """Clean benchmark data plus true coefficients on the default library."""
    key = (name, tuple(sorted(overrides.items())))
    if key not in _TRUTH_CACHE:
        _TRUTH_CACHE[key] = _make_truth(name, overrides)
    return _TRUTH_CACHE[key]


def _make_truth(name: str, overrides: dict) -> Truth:
    bench = get_benchmark(name, **overrides)
    p = bench.params
    descriptors = default_library(bench)
    names, axes = bench.state_names, bench.axes

    if name == "vdp":
        mu = p["mu"]
        times, traj = _sample_ode(
            _vdp_rhs(mu), np.array(p["u0"]), p["t_final"], p["samples"],
            dt_max=p["dt_max"],
        )
        coeffs = _coeff_matrix(
            descriptors,
            [{"y": 1.0}, {"x": -1.0, "y": mu, "x^2y": -mu}],
            names, axes,
        )
        return Truth(bench, times, traj, descriptors, coeffs)

    if name == "lorenz96":
        n, forcing = int(p["n"]), p["forcing"]
        u0 = np.full(n, forcing)
        u0[0] += 1.0
        times, traj = _sample_ode(
            _lorenz96_rhs(forcing), u0, p["t_final"], p["samples"],
            spin_up=p["spin_up"], dt_max=p["dt_max"],
        )
        per_state = []
        for i in range(n):
            plus = tuple(sorted(((i + 1) % n, (i - 1) % n)))
            minus = tuple(sorted(((i - 2) % n, (i - 1) % n)))
            label_plus = f"X{plus[0]+1}X{plus[1]+1}"
            label_minus = f"X{minus[0]+1}X{minus[1]+1}"
            per_state.append({
                "1": forcing,
                f"X{i+1}": -1.0,
                label_plus: 1.0,
                label_minus: -1.0,
            })
        coeffs = _coeff_matrix(descriptors, per_state, names, axes)
        return Truth(bench, times, traj, descriptors, coeffs)

    if name == "lotka_volterra":
        a, b, c, d = p["a"], p["b"], p["c"], p["d"]
        times, traj = _sample_ode(
            _lotka_volterra_rhs(a, b, c, d), np.array(p["u0"]),
            p["t_final"], p["samples"], dt_max=p["dt_max"],
        )
        coeffs = _coeff_matrix(
            descriptors,
            [{"x": a, "xy": -b}, {"y": -c, "xy": d}],
            names, axes,
        )
        return Truth(bench, times, traj, descriptors, coeffs)

    if name == "hare_lynx":
        times, values = hare_lynx_data()
        coeffs = _coeff_matrix(
            descriptors,
            [{"x": _HARE_LYNX_COEFFS["x"], "xy": _HARE_LYNX_COEFFS["xy_x"]},
             {"y": _HARE_LYNX_COEFFS["y"], "xy": _HARE_LYNX_COEFFS["xy_y"]}],
            names, axes,
        )
        return Truth(bench, times, values, descriptors, coeffs)

    if name == "advection":
        x = np.linspace(0.0, p["x_hi"], p["nx"])
        t = np.linspace(0.0, p["t_final"], p["nt"])
        coords = _plane_coords(x, t)
        phase = np.mod(coords[:, 0] - coords[:, 1], 2 * np.pi)
        u = np.sin(phase) + 0.5 * np.sin(2 * phase)
        coeffs = _coeff_matrix(descriptors, [{"u_x": -1.0}], names, axes)
        return Truth(bench, coords, u[:, None], descriptors, coeffs,
                     grid_shape=(p["nx"], p["nt"]))

    if name == "burgers":
        # two-mode profile keeps the signal spread over the whole periodic
        # domain; a lone Fourier mode would make u_xx proportional to u at
        # early times and the phase shift breaks the odd symmetry
        x, t, snaps = _burgers_truth(
            p["nu"], p["x_lo"], p["x_hi"], p["nx"], p["t_final"], p["nt"],
            None, p["fine_nx"],
            lambda xs: -np.sin(np.pi * xs / 8.0)
            + 0.4 * np.sin(np.pi * xs / 4.0 + 1.0),
        )
        coords = _plane_coords(x, t)
        coeffs = _coeff_matrix(
            descriptors, [{"uu_x": -1.0, "u_xx": p["nu"]}], names, axes,
        )
        return Truth(bench, coords, snaps.T.ravel()[:, None], descriptors, coeffs,
                     grid_shape=(p["nx"], p["nt"]))

    if name == "burgers_source":
        x, t, snaps = _burgers_truth(
            p["nu"], p["x_lo"], p["x_hi"], p["nx"], p["t_final"], p["nt"],
            lambda xs, tt: np.sin(xs) * np.sin(tt), p["fine_nx"],
            lambda xs: np.exp(-((xs - np.pi) ** 2)), scheme="heun4",
        )
        coords = _plane_coords(x, t)
        coeffs = _coeff_matrix(
            descriptors,
            [{"uu_x": -1.0, "u_xx": p["nu"], "sin(x)sin(t)": 1.0}],
            names, axes,
        )
        return Truth(bench, coords, snaps.T.ravel()[:, None], descriptors, coeffs,
                     grid_shape=(p["nx"], p["nt"]))

    if name == "heat":
        x = np.linspace(0.0, p["x_hi"], p["nx"])
        y = np.linspace(0.0, p["y_hi"], p["ny"])
        coords = _plane_coords(x, y)
        raw = (np.sin(coords[:, 0]) * np.sinh(coords[:, 1])
               + 0.5 * np.sin(2 * coords[:, 0]) * np.sinh(2 * coords[:, 1]))
        u = raw / np.abs(raw).max()
        coeffs = _coeff_matrix(descriptors, [{"u_xx": -1.0}], names, axes)
        return Truth(bench, coords, u[:, None], descriptors, coeffs,
                     grid_shape=(p["nx"], p["ny"]))

    if name == "poisson":
        x = np.linspace(0.0, p["x_hi"], p["nx"])
        y = np.linspace(0.0, p["y_hi"], p["ny"])
        coords = _plane_coords(x, y)
        u = 0.5 * np.sin(coords[:, 0]) * np.sin(coords[:, 1])
        coeffs = _coeff_matrix(
            descriptors, [{"u_xx": -1.0, "sin(x)sin(y)": -1.0}], names, axes,
        )
        return Truth(bench, coords, u[:, None], descriptors, coeffs,
                     grid_shape=(p["nx"], p["ny"]))

    raise ConfigError(f"no truth generator for benchmark {name!r}")


def make_dataset(
    name: str,
    noise: float = 0.0,
    seed: int = 0,
    subsample: float = 1.0,
    **overrides,
) -> Dataset:
    """Noisy, optionally subsampled measurements of a benchmark."""
    if not 0 < subsample <= 1:
        raise ConfigError(f"subsample fraction must be in (0, 1], got {subsample}")
    truth = make_truth(name, **overrides)
    rng = np.random.default_rng(seed)
    noisy = add_noise(truth.values, noise, rng)
    coords, clean = truth.coords, truth.values
    grid_shape = truth.grid_shape
    if subsample < 1.0:
        n = coords.shape[0]
        keep = np.sort(rng.choice(n, size=max(2, round(subsample * n)), replace=False))
        coords, clean, noisy = coords[keep], clean[keep], noisy[keep]
        grid_shape = None
    return Dataset(truth.benchmark, coords, noisy, clean, noise, seed, grid_shape)


def save_dataset(path, dataset: Dataset) -> None:
    """Write measurements as CSV.

    Columns: ODE ``t,u1,...,ud,u1_true,...``; evolution problems
    ``x,t,u,u_true``; steady problems ``x,y,u,u_true``.
    """
    bench = dataset.benchmark
    if bench.axes == ("t",):
        header = ["t"]
        header += [f"u{j+1}" for j in range(dataset.values.shape[1])]
        header += [f"u{j+1}_true" for j in range(dataset.values.shape[1])]
        coords = dataset.coords[:, None]
    else:
        header = list(bench.axes) + ["u", "u_true"]
        coords = dataset.coords
    table = np.column_stack([coords, dataset.values, dataset.truth])
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in table:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def load_dataset(path, benchmark: str | None = None, **overrides) -> Dataset:
    """Read a dataset written by :func:`save_dataset`.

    The header determines the layout.  A benchmark name restores library
    and axis metadata; without one, plain ODE metadata is synthesized.
    """
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if table.shape[1] != len(header):
        raise ConfigError(f"{path}: {table.shape[1]} columns, header names {len(header)}")
    if header[0] == "t":
        coords = table[:, 0]
        rest = table[:, 1:]
        has_truth = any(name.endswith("_true") for name in header)
        d = rest.shape[1] // 2 if has_truth else rest.shape[1]
        values = rest[:, :d]
        truth = rest[:, d:2 * d] if has_truth else values.copy()
        kind_axes = ("t",)
    elif header[:2] in (["x", "t"], ["x", "y"]):
        coords = table[:, :2]
        values = table[:, 2:3]
        truth = table[:, 3:4] if table.shape[1] > 3 else values.copy()
        kind_axes = tuple(header[:2])
    else:
        raise ConfigError(f"{path}: unrecognized header {header}")

    if benchmark is not None:
        bench = get_benchmark(benchmark, **overrides)
        if bench.axes != kind_axes:
            raise ConfigError(
                f"{path}: axes {kind_axes} do not match benchmark {benchmark!r}"
            )
    else:
        if kind_axes != ("t",):
            raise ConfigError("plane datasets need an explicit benchmark name")
        names = tuple(f"u{j+1}" for j in range(values.shape[1]))
        bench = Benchmark("custom", "ode", names, ("t",), (1,), {})
    return Dataset(bench, coords, values, truth, 0.0, 0)
