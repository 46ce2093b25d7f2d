import hashlib
import json

import numpy as np
import pytest

from hetsolver.datagen import (Inflow, Layout, OracleGeometry, PhysicsParams, ScenarioSampler,
                               check_stability, compute_stats, fluid_step, load_dataset,
                               make_dataset, simulate, solid_step, split_counts, spring_energy,
                               stable_dt, windows, Normalizer)
from hetsolver.errors import TooFew, TooShort, UnstableConfig
from hetsolver.hetgraph import NodeKind

GEOM = OracleGeometry(8, 3)
PHYS = PhysicsParams()
SMALL = ScenarioSampler(n_fluid=(5, 7), n_solid=(2, 3), frames=14, stride=(2, 3), warmup_time=4.0)


def test_zero_inflow_stays_zero():
    traj = simulate(GEOM, PHYS, Inflow(), T=30)
    assert np.all(traj.frames == 0.0)


def test_max_principle_diffusion_only():
    rng = np.random.default_rng(0)
    for _ in range(100):
        u0 = rng.normal(size=int(rng.integers(3, 30)))
        nu, h = rng.uniform(0.01, 1.0), rng.uniform(0.5, 2.0)
        dt = rng.uniform(0.05, 0.5) * h * h / nu
        u = u0.copy()
        for _ in range(50):
            u = fluid_step(u, 0.0, nu, dt, h)
        assert u.min() >= u0.min() - 1e-12 and u.max() <= u0.max() + 1e-12


def test_max_principle_through_simulate():
    rng = np.random.default_rng(1)
    geom = OracleGeometry(12, 2)
    for _ in range(20):
        init = np.zeros((14, 2))
        init[:12, 0] = rng.normal(size=12)
        traj = simulate(geom, PhysicsParams(advection=1e-9, nu=0.3), Inflow(mean=5.0), T=20,
                        coupled=False, initial=init)
        u = traj.frames[:, :12, 0]
        assert u.min() >= init[:12, 0].min() - 1e-12 and u.max() <= init[:12, 0].max() + 1e-12


@pytest.mark.parametrize("shape", [(17,), (4, 6)])
def test_diffusion_conserves_integral(shape):
    rng = np.random.default_rng(2)
    u = rng.normal(size=shape)
    total = u.sum()
    for _ in range(200):
        nxt = fluid_step(u, 0.0, 0.2, 0.4, 1.0)
        assert abs(nxt.sum() - u.sum()) <= 1e-10
        u = nxt
    assert abs(u.sum() - total) <= 1e-10 * 200


@pytest.mark.parametrize("layout", list(Layout))
def test_spring_energy_drift(layout):
    phys = PhysicsParams(damping=0.0, k_spring=3.0, rho_s=1.5)
    dt = 0.1 / np.sqrt(phys.k_spring / phys.rho_s)
    check_stability(OracleGeometry(4, 5), phys, dt * 0.999999)
    rng = np.random.default_rng(3)
    d, v = rng.normal(size=5), rng.normal(size=5)
    e0 = spring_energy(d, v, phys, layout)
    worst = 0.0
    for _ in range(1000):
        d, v = solid_step(d, v, np.zeros(5), phys, dt, layout)
        worst = max(worst, abs(spring_energy(d, v, phys, layout) - e0) / e0)
    assert worst < 0.01


def test_inflow_perturbation_moves_solid():
    base = Inflow(mean=1.0, amplitudes=(0.3,), frequencies=(0.5,), phases=(0.0,))
    bumped = Inflow(mean=1.0, amplitudes=(0.4,), frequencies=(0.5,), phases=(0.0,))
    a = simulate(GEOM, PHYS, base, T=60)
    b = simulate(GEOM, PHYS, bumped, T=60)
    solid = GEOM.n_fluid
    assert np.max(np.abs(a.frames[:, solid:, 0] - b.frames[:, solid:, 0])) > 1e-6


def test_clamping_solid_changes_fluid():
    inflow = Inflow(mean=1.0, amplitudes=(0.3,), frequencies=(0.5,), phases=(0.0,))
    free = simulate(GEOM, PHYS, inflow, T=80)
    rigid = simulate(GEOM, PHYS, inflow, T=80, rigid=True)
    assert np.all(rigid.frames[:, GEOM.n_fluid:, :] == 0.0)
    assert np.max(np.abs(free.frames[:, :GEOM.n_fluid] - rigid.frames[:, :GEOM.n_fluid])) > 1e-6


def test_subsampling_matches_fine_steps():
    inflow = Inflow.random(np.random.default_rng(4))
    dt = stable_dt(GEOM, PHYS)
    fine = simulate(GEOM, PHYS, inflow, T=31, dt_sim=dt, stride=1)
    coarse = simulate(GEOM, PHYS, inflow, T=11, dt_sim=dt, stride=3)
    assert np.array_equal(coarse.frames, fine.frames[::3])
    assert coarse.dt_frame == 3 * dt


def test_warmup_offsets_recording():
    inflow = Inflow.random(np.random.default_rng(5))
    dt = stable_dt(GEOM, PHYS)
    full = simulate(GEOM, PHYS, inflow, T=20, dt_sim=dt, stride=2)
    late = simulate(GEOM, PHYS, inflow, T=15, dt_sim=dt, stride=2, warmup_steps=10)
    assert np.array_equal(late.frames, full.frames[5:])


def test_coupling_conditions_hold_each_frame():
    traj = simulate(GEOM, PHYS, Inflow(mean=1.0), T=40)
    nf = GEOM.n_fluid
    # Kinematic condition: outlet fluid node carries the wall velocity.
    np.testing.assert_array_equal(traj.frames[:, nf - 1, 0], traj.frames[:, nf, 1])
    np.testing.assert_allclose(traj.frames[:, :nf, 1], PHYS.advection * traj.frames[:, :nf, 0])


def test_unstable_config_rejected():
    with pytest.raises(UnstableConfig):
        simulate(GEOM, PHYS, T=5, dt_sim=10.0)
    with pytest.raises(UnstableConfig):
        check_stability(GEOM, PhysicsParams(k_spring=100.0, rho_s=1.0), 0.02)


def test_grid_layout_runs_and_couples():
    geom = OracleGeometry(12, 4, layout=Layout.GRID2D)
    traj = simulate(geom, PHYS, Inflow.random(np.random.default_rng(6), wall=True), T=30)
    assert traj.frames.shape == (30, 16, 2)
    assert np.all(np.isfinite(traj.frames))
    assert np.any(traj.frames[:, 12:, 0] != 0)
    top = traj.frames[:, 8:12, 0]
    np.testing.assert_array_equal(top, traj.frames[:, 12:, 1])


def test_split_counts():
    assert split_counts(10) == (8, 1, 1)
    assert split_counts(40) == (32, 4, 4)
    with pytest.raises(TooFew):
        split_counts(9)


def test_windows_counts_and_round_trip():
    traj = simulate(GEOM, PHYS, Inflow.random(np.random.default_rng(7)), T=9)
    # Stored frames are float32, for which the float64 delta is exact.
    traj.frames = traj.frames.astype(np.float32).astype(np.float64)
    stats = compute_stats([traj])
    norm = Normalizer(stats)
    kinds = traj.graph.node_kinds.astype(np.int64)
    assert len(list(windows(traj, 8, norm))) == 1
    assert len(list(windows(traj, 4, norm))) == 5
    for t, (window, target) in enumerate(windows(traj, 4, norm), start=3):
        last = traj.frames[t]
        assert np.array_equal(last + norm.delta_from_norm(target, kinds), traj.frames[t + 1])
        assert window.state_history.shape == (traj.graph.num_nodes, 4, 2)
    with pytest.raises(TooShort):
        list(windows(traj, 9, norm))


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    make_dataset(10, SMALL, root / "a", seed=3)
    make_dataset(10, SMALL, root / "b", seed=3)
    return root


def test_dataset_splits_and_stats(small_dataset):
    ds = load_dataset(small_dataset / "a")
    assert [len(ds.split(s)) for s in ("train", "val", "test")] == [8, 1, 1]
    norm = ds.normalizer
    for kind in NodeKind:
        z = np.concatenate([norm.state(t.frames[:, t.graph.node_kinds == kind],
                                       np.full(int((t.graph.node_kinds == kind).sum()), int(kind)))
                            .reshape(-1, 2) for t in ds.split("train")])
        assert np.all(np.abs(z.mean(axis=0)) < 1e-10)
        assert np.all(np.abs(z.std(axis=0) - 1) < 1e-6)


def test_regeneration_is_byte_identical(small_dataset):
    a, b = small_dataset / "a", small_dataset / "b"
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for name in names:
        assert hashlib.sha256((a / name).read_bytes()).digest() == \
            hashlib.sha256((b / name).read_bytes()).digest()


def test_loaded_trajectories_round_trip(small_dataset, tmp_path):
    ds = load_dataset(small_dataset / "a")
    manifest = json.loads((small_dataset / "a" / "manifest.json").read_text())
    assert manifest["channels"]["fluid"] == ["velocity", "pressure_analogue"]
    for traj, entry in zip(ds.trajectories, manifest["trajectories"]):
        assert traj.frames.shape == (entry["frames"], entry["nodes"], 2)
        assert traj.num_frames >= 12
        assert np.all(np.isfinite(traj.frames))
        assert traj.dt_frame == entry["dt_frame"]


def test_different_seed_differs(tmp_path):
    make_dataset(10, SMALL, tmp_path / "c", seed=4)
    other = (tmp_path / "c" / "traj_0000.bin").read_bytes()
    assert other != (tmp_path / "c" / "traj_0001.bin").read_bytes()


def test_too_few_trajectories(tmp_path):
    with pytest.raises(TooFew):
        make_dataset(3, SMALL, tmp_path / "d")
