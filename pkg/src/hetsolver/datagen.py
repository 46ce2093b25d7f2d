"""Coupled fluid/solid reference simulator and on-disk dataset format.

The fluid is a scalar advection-diffusion field (velocity analogue) driven by
a pulsatile inflow; the solid is a mass-spring-damper chain. At the
interface the wall velocity is imposed on the adjacent fluid node and the
upstream momentum flux pushes on the wall.
"""

from __future__ import annotations

import enum
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import IoError, NonFinite, TooFew, TooShort, UnstableConfig
from .hetgraph import HeteroGraph, NodeKind, NodeWindow, build_graph

FORMAT_NAME = "hetsolver-dataset"
FORMAT_VERSION = 1
CHANNELS = {
    "fluid": ["velocity", "pressure_analogue"],
    "solid": ["displacement", "velocity"],
}
N_CHANNELS = 2
_TRAJ_MAGIC = b"HGTR"
_TRAJ_HEADER = struct.Struct("<4sIIII2d")


class Layout(str, enum.Enum):
    CHANNEL1D = "channel1d"
    GRID2D = "grid2d"


@dataclass(frozen=True)
class OracleGeometry:
    """Point layout of one scenario.

    Channel1D: fluid points on a line, the solid chain continues past the
    outlet after a gap. Grid2D: an ``n_solid`` x ``n_fluid // n_solid`` fluid
    grid with one wall mass above every top-row column.
    """

    n_fluid: int
    n_solid: int
    fluid_spacing: float = 1.0
    solid_spacing: float = 1.0
    layout: Layout = Layout.CHANNEL1D
    gap: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "layout", Layout(self.layout))
        if self.n_fluid < 2 or self.n_solid < 1:
            raise ValueError("need at least 2 fluid points and 1 solid point")
        if not (self.fluid_spacing > 0 and self.solid_spacing > 0):
            raise ValueError("spacings must be positive")
        if self.layout is Layout.GRID2D and (self.n_fluid % self.n_solid or self.n_fluid // self.n_solid < 2):
            raise ValueError("grid2d needs n_fluid = n_solid * ny with ny >= 2")

    @property
    def interface_gap(self) -> float:
        return 0.5 * self.fluid_spacing if self.gap is None else self.gap

    @property
    def dim(self) -> int:
        return 1 if self.layout is Layout.CHANNEL1D else 2

    def fluid_grid(self) -> tuple[int, ...]:
        if self.layout is Layout.CHANNEL1D:
            return (self.n_fluid,)
        return (self.n_solid, self.n_fluid // self.n_solid)

    def fluid_positions(self) -> np.ndarray:
        h = self.fluid_spacing
        if self.layout is Layout.CHANNEL1D:
            return np.arange(self.n_fluid) * h
        nx, ny = self.fluid_grid()
        iy, ix = np.divmod(np.arange(self.n_fluid), nx)
        return np.stack([ix * h, iy * h], axis=1).astype(np.float64)

    def solid_positions(self) -> np.ndarray:
        if self.layout is Layout.CHANNEL1D:
            start = (self.n_fluid - 1) * self.fluid_spacing + self.interface_gap
            return start + np.arange(self.n_solid) * self.solid_spacing
        _, ny = self.fluid_grid()
        top = (ny - 1) * self.fluid_spacing + self.interface_gap
        xs = np.arange(self.n_solid) * self.fluid_spacing
        return np.stack([xs, np.full(self.n_solid, top)], axis=1)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["layout"] = self.layout.value
        return out


@dataclass(frozen=True)
class PhysicsParams:
    rho_f: float = 1.0
    nu: float = 0.1
    rho_s: float = 2.0
    k_spring: float = 2.0
    damping: float = 0.1
    coupling_gain: float = 0.5
    advection: float = 1.0

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            bad = value < 0 if name == "damping" else value <= 0
            if bad or not math.isfinite(value):
                raise ValueError(f"physics parameter {name}={value} out of range")

    def vector(self) -> np.ndarray:
        return np.array(list(asdict(self).values()), dtype=np.float64)


PHYSICS_FIELDS = tuple(PhysicsParams.__dataclass_fields__)


@dataclass(frozen=True)
class Inflow:
    """Pulsatile inflow ``mean + sum a_k sin(w_k t + phi_k)`` plus optional wall load."""

    mean: float = 0.0
    amplitudes: tuple[float, ...] = ()
    frequencies: tuple[float, ...] = ()
    phases: tuple[float, ...] = ()
    wall_amplitude: float = 0.0
    wall_frequency: float = 0.0

    @classmethod
    def random(cls, rng: np.random.Generator, wall: bool = False) -> "Inflow":
        k = int(rng.integers(1, 4))
        return cls(
            mean=float(rng.uniform(0.5, 1.5)),
            amplitudes=tuple(float(a) for a in rng.uniform(0.1, 0.5, k)),
            frequencies=tuple(float(w) for w in rng.uniform(0.2, 1.0, k)),
            phases=tuple(float(p) for p in rng.uniform(0.0, 2 * np.pi, k)),
            wall_amplitude=float(rng.uniform(0.2, 0.6)) if wall else 0.0,
            wall_frequency=float(rng.uniform(0.3, 1.2)) if wall else 0.0,
        )

    def velocity(self, t: float) -> float:
        return self.mean + sum(a * math.sin(w * t + p)
                               for a, w, p in zip(self.amplitudes, self.frequencies, self.phases))

    def wall_load(self, t: float) -> float:
        return self.wall_amplitude * math.sin(self.wall_frequency * t)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, payload: dict) -> "Inflow":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in payload.items()})


@dataclass(eq=False)
class Trajectory:
    graph: HeteroGraph
    frames: np.ndarray
    dt_sim: float
    dt_frame: float
    physics: PhysicsParams
    inflow: Inflow
    seed: int
    geometry: OracleGeometry | None = None

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


# ---------------------------------------------------------------- oracle


def stability_numbers(geometry: OracleGeometry, physics: PhysicsParams, dt: float) -> dict:
    h = geometry.fluid_spacing
    return {
        "diffusion": physics.nu * dt / h ** 2,
        "courant": abs(physics.advection) * dt / h,
        "spring": dt * math.sqrt(physics.k_spring / physics.rho_s),
        "combined": abs(physics.advection) * dt / h + 2 * geometry.dim * physics.nu * dt / h ** 2,
    }


def check_stability(geometry: OracleGeometry, physics: PhysicsParams, dt: float) -> None:
    s = stability_numbers(geometry, physics, dt)
    if s["diffusion"] > 0.5 or s["courant"] > 1.0 or s["spring"] > 0.1 or s["combined"] > 1.0:
        raise UnstableConfig(f"explicit step dt={dt} violates a stability guard: {s}")


def stable_dt(geometry: OracleGeometry, physics: PhysicsParams, safety: float = 0.5) -> float:
    h = geometry.fluid_spacing
    fluid = 1.0 / (abs(physics.advection) / h + 2 * geometry.dim * physics.nu / h ** 2)
    spring = 0.1 / math.sqrt(physics.k_spring / physics.rho_s)
    return safety * min(fluid, spring)


def fluid_step(u: np.ndarray, c: float, nu: float, dt: float, h: float) -> np.ndarray:
    """One explicit upwind/central step with zero-flux ghosts on every side.

    ``u`` is 1D (line) or 2D (rows along y, columns along x). Callers
    overwrite Dirichlet boundaries afterwards.
    """
    cfl, r = c * dt / h, nu * dt / h ** 2
    if u.ndim == 1:
        p = np.pad(u, 1, mode="edge")
        return u - cfl * (p[1:-1] - p[:-2]) + r * (p[2:] - 2 * p[1:-1] + p[:-2])
    p = np.pad(u, 1, mode="edge")
    centre = p[1:-1, 1:-1]
    lap = p[1:-1, 2:] + p[1:-1, :-2] + p[2:, 1:-1] + p[:-2, 1:-1] - 4 * centre
    return u - cfl * (centre - p[1:-1, :-2]) + r * lap


def spring_force(d: np.ndarray, k: float, layout: Layout) -> np.ndarray:
    """Elastic force on each mass.

    Channel1D: free end at the interface, last mass tied to a wall.
    Grid2D: free ends, every mass also tied to its rest position.
    """
    left = np.concatenate([d[:1], d[:-1]])
    if layout is Layout.CHANNEL1D:
        right = np.concatenate([d[1:], [0.0]])
        return k * (left + right - 2 * d)
    right = np.concatenate([d[1:], d[-1:]])
    return k * (left + right - 3 * d)


def spring_energy(d: np.ndarray, v: np.ndarray, physics: PhysicsParams, layout: Layout) -> float:
    kinetic = 0.5 * physics.rho_s * float(np.sum(v * v))
    stretch = np.diff(d)
    anchor = d[-1:] if layout is Layout.CHANNEL1D else d
    potential = 0.5 * physics.k_spring * float(np.sum(stretch ** 2) + np.sum(anchor ** 2))
    return kinetic + potential


def solid_step(d: np.ndarray, v: np.ndarray, f_ext: np.ndarray, physics: PhysicsParams,
               dt: float, layout: Layout) -> tuple[np.ndarray, np.ndarray]:
    """Velocity-Verlet step of the damped chain under a fixed external force."""

    def accel(dd, vv):
        return (spring_force(dd, physics.k_spring, layout) - physics.damping * vv + f_ext) / physics.rho_s

    v_half = v + 0.5 * dt * accel(d, v)
    d_new = d + dt * v_half
    v_new = v_half + 0.5 * dt * accel(d_new, v_half)
    return d_new, v_new


@dataclass
class _State:
    u: np.ndarray
    d: np.ndarray
    v: np.ndarray


def _interface_force(state: _State, geometry: OracleGeometry, physics: PhysicsParams,
                     inflow: Inflow, t: float) -> np.ndarray:
    flux = physics.coupling_gain * physics.rho_f * physics.advection
    f = np.full(geometry.n_solid, inflow.wall_load(t))
    if geometry.layout is Layout.CHANNEL1D:
        f[0] += flux * state.u[-2]
    else:
        f += flux * state.u[-2, :]
    return f


def _apply_fluid_bc(state: _State, geometry: OracleGeometry, inflow: Inflow, t: float) -> None:
    if geometry.layout is Layout.CHANNEL1D:
        state.u[0] = inflow.velocity(t)
        state.u[-1] = state.v[0]
    else:
        state.u[:, 0] = inflow.velocity(t)
        state.u[-1, :] = state.v


def _frame(state: _State, physics: PhysicsParams) -> np.ndarray:
    u = state.u.reshape(-1)
    fluid = np.stack([u, physics.advection * u], axis=1)
    solid = np.stack([state.d, state.v], axis=1)
    return np.vstack([fluid, solid])


def simulate(geometry: OracleGeometry, physics: PhysicsParams, inflow: Inflow | None = None,
             T: int = 40, seed: int = 0, *, dt_sim: float | None = None, stride: int = 1,
             rigid: bool = False, initial: np.ndarray | None = None,
             coupled: bool = True, graph: HeteroGraph | None = None,
             warmup_steps: int = 0) -> Trajectory:
    """Integrate the coupled system and record ``T`` frames every ``stride`` steps.

    Recording starts after ``warmup_steps`` unrecorded steps.
    ``initial`` is an (n, 2) frame-layout state (only its first channel is
    used for fluid nodes). With ``coupled=False`` the fluid has zero-flux
    boundaries and exchanges nothing with the solid. ``rigid`` clamps the
    solid at rest.
    """
    if T < 1 or stride < 1:
        raise ValueError("T and stride must be positive")
    if inflow is None:
        inflow = Inflow.random(np.random.default_rng(seed), wall=geometry.layout is Layout.GRID2D)
    dt = stable_dt(geometry, physics) if dt_sim is None else float(dt_sim)
    check_stability(geometry, physics, dt)
    nf, ns = geometry.n_fluid, geometry.n_solid
    grid = geometry.fluid_grid()
    shape = grid if len(grid) == 1 else (grid[1], grid[0])
    if initial is None:
        initial = np.zeros((nf + ns, N_CHANNELS))
    initial = np.asarray(initial, dtype=np.float64)
    state = _State(initial[:nf, 0].reshape(shape).copy(), initial[nf:, 0].copy(), initial[nf:, 1].copy())
    if rigid:
        state.d[:] = 0.0
        state.v[:] = 0.0
    if coupled:
        _apply_fluid_bc(state, geometry, inflow, 0.0)

    frames = np.empty((T, nf + ns, N_CHANNELS))
    if warmup_steps == 0:
        frames[0] = _frame(state, physics)
    t = 0.0
    for step in range(1, warmup_steps + (T - 1) * stride + 1):
        if coupled and not rigid:
            f = _interface_force(state, geometry, physics, inflow, t)
            state.d, state.v = solid_step(state.d, state.v, f, physics, dt, geometry.layout)
        elif not rigid:
            state.d, state.v = solid_step(state.d, state.v, np.zeros(ns), physics, dt, geometry.layout)
        state.u = fluid_step(state.u, physics.advection, physics.nu, dt, geometry.fluid_spacing)
        t = step * dt
        if coupled:
            _apply_fluid_bc(state, geometry, inflow, t)
        rec = step - warmup_steps
        if rec == 0:
            frames[0] = _frame(state, physics)
        elif rec > 0 and rec % stride == 0:
            frame = _frame(state, physics)
            if not np.all(np.isfinite(frame)):
                raise NonFinite(f"oracle diverged at step {step}")
            frames[rec // stride] = frame
    if graph is None:
        graph = build_graph(geometry)
    return Trajectory(graph, frames, dt, dt * stride, physics, inflow, seed, geometry)


# ---------------------------------------------------------------- scenarios


def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


@dataclass(frozen=True)
class ScenarioSampler:
    """Random scenario generator used by :func:`make_dataset`."""

    layout: Layout = Layout.CHANNEL1D
    n_fluid: tuple[int, int] = (14, 18)
    n_solid: tuple[int, int] = (3, 5)
    fluid_spacing: tuple[float, float] = (0.8, 1.2)
    frames: int = 40
    stride: tuple[int, int] = (4, 8)
    warmup_time: float = 20.0
    physics: dict = field(default_factory=lambda: {
        "rho_f": (0.8, 1.2), "nu": (0.05, 0.2), "rho_s": (1.0, 3.0), "k_spring": (1.0, 4.0),
        "damping": (0.0, 0.2), "coupling_gain": (0.2, 1.0), "advection": (0.5, 1.5),
    })

    def sample(self, rng: np.random.Generator):
        layout = Layout(self.layout)
        n_solid = int(rng.integers(self.n_solid[0], self.n_solid[1] + 1))
        n_fluid = int(rng.integers(self.n_fluid[0], self.n_fluid[1] + 1))
        if layout is Layout.GRID2D:
            # n_fluid range is read as the number of rows for the grid.
            n_fluid *= n_solid
        spacing = _uniform(rng, self.fluid_spacing)
        geometry = OracleGeometry(n_fluid, n_solid, spacing, spacing, layout)
        physics = PhysicsParams(**{name: _uniform(rng, self.physics[name]) for name in PHYSICS_FIELDS})
        inflow = Inflow.random(rng, wall=layout is Layout.GRID2D)
        stride = int(rng.integers(self.stride[0], self.stride[1] + 1))
        return geometry, physics, inflow, stride

    def simulate(self, rng: np.random.Generator, seed: int) -> Trajectory:
        geometry, physics, inflow, stride = self.sample(rng)
        warmup = int(math.ceil(self.warmup_time / stable_dt(geometry, physics)))
        return simulate(geometry, physics, inflow, T=self.frames, seed=seed, stride=stride,
                        warmup_steps=warmup)


# ---------------------------------------------------------------- dataset files


def _write_atomic(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(payload)
        os.replace(tmp, path)
    except OSError as err:
        raise IoError(f"cannot write {path}: {err}") from err


def encode_frames(traj: Trajectory) -> bytes:
    T, n, c = traj.frames.shape
    header = _TRAJ_HEADER.pack(_TRAJ_MAGIC, FORMAT_VERSION, n, T, c, traj.dt_frame, traj.dt_sim)
    return header + traj.frames.astype("<f4").tobytes()


def decode_frames(raw: bytes) -> tuple[np.ndarray, float, float]:
    magic, version, n, T, c, dt_frame, dt_sim = _TRAJ_HEADER.unpack_from(raw)
    if magic != _TRAJ_MAGIC or version != FORMAT_VERSION:
        raise IoError("not a trajectory file of a supported version")
    data = np.frombuffer(raw, dtype="<f4", offset=_TRAJ_HEADER.size)
    if data.size != T * n * c:
        raise IoError("trajectory payload has the wrong length")
    return data.reshape(T, n, c).astype(np.float64), dt_frame, dt_sim


def split_counts(n_traj: int) -> tuple[int, int, int]:
    if n_traj < 10:
        raise TooFew(f"need at least 10 trajectories for an 8:1:1 split, got {n_traj}")
    n_val = n_test = n_traj // 10
    return n_traj - n_val - n_test, n_val, n_test


def _pow2(x: np.ndarray) -> np.ndarray:
    # Power-of-two scales make normalise/denormalise round trips exact.
    x = np.where(x > 1e-12, x, 1.0)
    return 2.0 ** np.round(np.log2(x))


def compute_stats(trajs: list[Trajectory]) -> dict:
    """Normalisation statistics; callers pass the training split only."""
    stats: dict = {"state_mean": {}, "state_std": {}, "delta_scale": {}}
    for kind in (NodeKind.FLUID, NodeKind.SOLID):
        rows = [t.frames[:, t.graph.node_kinds == kind, :] for t in trajs]
        states = np.concatenate([r.reshape(-1, r.shape[-1]) for r in rows])
        deltas = np.concatenate([np.diff(r, axis=0).reshape(-1, r.shape[-1]) for r in rows])
        std = states.std(axis=0)
        tag = kind.name.lower()
        stats["state_mean"][tag] = states.mean(axis=0).tolist()
        stats["state_std"][tag] = np.where(std > 1e-12, std, 1.0).tolist()
        stats["delta_scale"][tag] = _pow2(np.sqrt((deltas ** 2).mean(axis=0))).tolist()
    phys = np.stack([t.physics.vector() for t in trajs])
    pstd = phys.std(axis=0)
    stats["physics_mean"] = phys.mean(axis=0).tolist()
    stats["physics_std"] = np.where(pstd > 1e-12, pstd, 1.0).tolist()
    pos = np.concatenate([t.graph.positions for t in trajs])
    qstd = pos.std(axis=0)
    stats["pos_mean"] = pos.mean(axis=0).tolist()
    stats["pos_std"] = np.where(qstd > 1e-12, qstd, 1.0).tolist()
    return stats


class Normalizer:
    """Array views of the dataset statistics."""

    def __init__(self, stats: dict):
        self.stats = stats
        kinds = ("fluid", "solid")
        self.mean = np.array([stats["state_mean"][k] for k in kinds])
        self.std = np.array([stats["state_std"][k] for k in kinds])
        self.delta = np.array([stats["delta_scale"][k] for k in kinds])
        self.phys_mean = np.array(stats["physics_mean"])
        self.phys_std = np.array(stats["physics_std"])
        self.pos_mean = np.array(stats["pos_mean"])
        self.pos_std = np.array(stats["pos_std"])

    def state(self, frames: np.ndarray, kinds: np.ndarray) -> np.ndarray:
        return (frames - self.mean[kinds]) / self.std[kinds]

    def delta_to_norm(self, delta: np.ndarray, kinds: np.ndarray) -> np.ndarray:
        return delta / self.delta[kinds]

    def delta_from_norm(self, delta: np.ndarray, kinds: np.ndarray) -> np.ndarray:
        return delta * self.delta[kinds]

    def physics(self, physics: PhysicsParams, n: int) -> np.ndarray:
        z = (physics.vector() - self.phys_mean) / self.phys_std
        return np.tile(z, (n, 1))


def make_window(traj: Trajectory, norm: Normalizer, frames: np.ndarray) -> NodeWindow:
    """Window from raw frames of shape (N, n, C)."""
    kinds = traj.graph.node_kinds.astype(np.int64)
    hist = norm.state(frames, kinds)  # (N, n, C)
    return NodeWindow(np.transpose(hist, (1, 0, 2)).copy(),
                      norm.physics(traj.physics, traj.graph.num_nodes), traj.dt_frame)


def windows(traj: Trajectory, N: int, norm: Normalizer) -> Iterator[tuple[NodeWindow, np.ndarray]]:
    """Yield (window over frames t-N+1..t, normalised delta to frame t+1)."""
    T = traj.num_frames
    if T < N + 1:
        raise TooShort(f"trajectory has {T} frames; a window of {N} needs at least {N + 1}")
    kinds = traj.graph.node_kinds.astype(np.int64)
    for t in range(N - 1, T - 1):
        window = make_window(traj, norm, traj.frames[t - N + 1:t + 1])
        target = norm.delta_to_norm(traj.frames[t + 1] - traj.frames[t], kinds)
        yield window, target


@dataclass(eq=False)
class Dataset:
    root: Path
    manifest: dict
    trajectories: list

    @property
    def stats(self) -> dict:
        return self.manifest["stats"]

    @property
    def normalizer(self) -> Normalizer:
        return Normalizer(self.stats)

    def split(self, name: str) -> list[Trajectory]:
        return [self.trajectories[i] for i in self.manifest["splits"][name]]

    @property
    def pos_dim(self) -> int:
        return len(self.stats["pos_mean"])


def _trajectory_entry(idx: int, traj: Trajectory, fname: str) -> dict:
    return {
        "id": idx,
        "file": fname,
        "seed": int(traj.seed),
        "frames": traj.num_frames,
        "nodes": traj.graph.num_nodes,
        "dt_sim": traj.dt_sim,
        "dt_frame": traj.dt_frame,
        "geometry": traj.geometry.to_dict() if traj.geometry else None,
        "physics": asdict(traj.physics),
        "inflow": traj.inflow.to_dict(),
        "graph": traj.graph.to_dict(),
    }


def make_dataset(n_traj: int, sampler: ScenarioSampler | None = None,
                 out_dir: str | Path = "dataset", seed: int = 0) -> dict:
    """Generate, split 8:1:1, normalise from the training split, and write to disk."""
    n_train, n_val, n_test = split_counts(n_traj)
    sampler = sampler or ScenarioSampler()
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise IoError(f"cannot create {root}: {err}") from err

    children = np.random.SeedSequence(seed).spawn(n_traj)
    trajs = []
    for child in children:
        traj_seed = int(child.generate_state(1)[0])
        traj = sampler.simulate(np.random.default_rng(child), traj_seed)
        # Store what is on disk so statistics match what loaders will see.
        traj.frames = traj.frames.astype(np.float32).astype(np.float64)
        trajs.append(traj)

    splits = {
        "train": list(range(n_train)),
        "val": list(range(n_train, n_train + n_val)),
        "test": list(range(n_train + n_val, n_traj)),
    }
    stats = compute_stats([trajs[i] for i in splits["train"]])
    entries = []
    for i, traj in enumerate(trajs):
        fname = f"traj_{i:04d}.bin"
        _write_atomic(root / fname, encode_frames(traj))
        entries.append(_trajectory_entry(i, traj, fname))
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "master_seed": int(seed),
        "n_traj": n_traj,
        "layout": Layout(sampler.layout).value,
        "channels": CHANNELS,
        "physics_fields": list(PHYSICS_FIELDS),
        "splits": splits,
        "stats": stats,
        "trajectories": entries,
    }
    _write_atomic(root / "manifest.json",
                  (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return manifest


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, ValueError) as err:
        raise IoError(f"cannot read dataset manifest in {root}: {err}") from err
    if manifest.get("format") != FORMAT_NAME or manifest.get("version") != FORMAT_VERSION:
        raise IoError(f"{root} is not a {FORMAT_NAME} v{FORMAT_VERSION} dataset")
    trajs = []
    for entry in manifest["trajectories"]:
        try:
            raw = (root / entry["file"]).read_bytes()
        except OSError as err:
            raise IoError(f"cannot read {entry['file']}: {err}") from err
        frames, dt_frame, dt_sim = decode_frames(raw)
        geometry = OracleGeometry(**entry["geometry"]) if entry.get("geometry") else None
        trajs.append(Trajectory(HeteroGraph.from_dict(entry["graph"]), frames, dt_sim, dt_frame,
                                PhysicsParams(**entry["physics"]), Inflow.from_dict(entry["inflow"]),
                                entry["seed"], geometry))
    return Dataset(root, manifest, trajs)
