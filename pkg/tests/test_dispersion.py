import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plumeinv.dispersion import (
    BACKWARD,
    CHUNK_SIZE,
    FORWARD,
    DomainGrid,
    Particle,
    ParticleEnsemble,
    SensorSpec,
    SimulationConfig,
    diffusion_coefficient,
    diffusion_tensor,
    drift_coefficient,
    langevin_step,
    reference_sensors,
    read_counts,
    release_particles,
    run_dispersion,
    write_counts,
)
from plumeinv.errors import DomainError, ValidationError
from plumeinv.meteo import TurbulenceParams, WindRecord, load_meteorology

STILL = TurbulenceParams(sigma2=(0.0, 0.0, 0.0))


def calm(speed=0.0, direction=0.0):
    return [WindRecord("00:00", (speed,), (direction,), (10.0,))]


class TestGrid:
    def test_reference_geometry(self):
        g = DomainGrid()
        assert g.n_cells == 25
        assert g.cell_volume == pytest.approx(6.0e7)

    def test_labels_row_major(self):
        g = DomainGrid()
        assert g.row_col("A1") == (1, 1)
        assert g.row_col("A7") == (2, 2)
        assert g.cell_from_row_col(4, 4) == 19
        lo, hi = g.cell_bounds("A2")
        np.testing.assert_array_equal(lo, [300.0, 0.0, 0.0])
        np.testing.assert_array_equal(hi, [600.0, 200.0, 1000.0])

    def test_cell_of(self):
        g = DomainGrid()
        np.testing.assert_array_equal(g.cell_of([10.0, 650.0, -1.0, 1500.0], [10.0, 250.0, 5.0, 5.0]), [1, 8, 0, 0])

    @pytest.mark.parametrize("bad", [0, 26, "A0", "B"])
    def test_invalid_cell(self, bad):
        with pytest.raises(DomainError):
            DomainGrid().check_cell(bad)

    def test_sensor_volume(self):
        s = SensorSpec(400.0, 500.0)
        assert s.volume == pytest.approx(1.0e-3)
        assert s.z == 10.0


class TestCoefficients:
    def test_drift(self):
        p = TurbulenceParams()
        np.testing.assert_array_equal(drift_coefficient([0.0, 0.0, 0.0], p), [0.0, 0.0, 0.0])
        np.testing.assert_allclose(drift_coefficient([1.0, 0.0, 0.0], p), [-0.01, 0.0, 0.0])

    def test_drift_batched(self):
        u = np.arange(6.0).reshape(3, 2)
        np.testing.assert_allclose(drift_coefficient(u, TurbulenceParams()), -u / np.array([[100.0], [100.0], [50.0]]))

    def test_diffusion(self):
        b = diffusion_coefficient(TurbulenceParams())
        assert b[2] == pytest.approx(0.1)
        B = diffusion_tensor(TurbulenceParams())
        assert B[2, 2] == pytest.approx(0.005)
        np.testing.assert_allclose(np.diag(B), np.array([0.5, 0.5, 0.25]) / np.array([100.0, 100.0, 50.0]))
        assert np.count_nonzero(B - np.diag(np.diag(B))) == 0

    def test_zero_variance(self):
        np.testing.assert_array_equal(diffusion_coefficient(STILL), 0.0)

    def test_timestep_guard(self):
        SimulationConfig(dt=5.0).check_timestep(TurbulenceParams())
        with pytest.raises(ValidationError):
            SimulationConfig(dt=5.1).check_timestep(TurbulenceParams())

    def test_config_invariants(self):
        with pytest.raises(ValidationError):
            SimulationConfig(n_particles_per_source=0)
        with pytest.raises(ValidationError):
            SimulationConfig(dt=0.0)
        assert SimulationConfig(direction=BACKWARD).c_v == -1


class TestLangevinStep:
    def test_pure_advection(self):
        p = Particle((10.0, 20.0, 30.0))
        q = langevin_step(p, (1.0, 0.0, 0.0), STILL, 1.0, 1, rng=np.random.default_rng(0))
        assert q.x == (11.0, 20.0, 30.0)
        assert q.u == (0.0, 0.0, 0.0)

    def test_small_dt_small_move(self):
        p = Particle((10.0, 20.0, 30.0), (0.3, -0.2, 0.1))
        for dt in (1e-2, 1e-4, 1e-6):
            q = langevin_step(p, (2.0, 1.0, 0.0), TurbulenceParams(), dt, 1, rng=np.random.default_rng(1))
            assert np.linalg.norm(np.subtract(q.x, p.x)) < 10 * dt

    def test_euler_maruyama_formula(self):
        params = TurbulenceParams()
        p = Particle((100.0, 100.0, 50.0), (0.2, -0.1, 0.05))
        xi = np.array([0.5, -1.0, 2.0])
        q = langevin_step(p, (1.5, -0.5, 0.0), params, 1.0, 1, xi=xi)
        u0 = np.array(p.u)
        u1 = u0 + drift_coefficient(u0, params) + diffusion_coefficient(params) * xi
        np.testing.assert_allclose(q.u, u1, rtol=1e-14)
        np.testing.assert_allclose(q.x, np.array(p.x) + np.array([1.5, -0.5, 0.0]) + u1, rtol=1e-14)

    def test_backward_negates_wind(self):
        p = Particle((100.0, 100.0, 50.0))
        q = langevin_step(p, (1.0, 2.0, 0.0), STILL, 2.0, -1, xi=np.zeros(3))
        assert q.x == (98.0, 96.0, 50.0)

    def test_ground_reflection(self):
        p = Particle((100.0, 100.0, 0.5), (0.0, 0.0, -1.0))
        q = langevin_step(p, (0.0, 0.0, 0.0), STILL, 1.0, 1, grid=DomainGrid(), xi=np.zeros(3))
        # drift leaves w = -0.98 before the bounce
        assert q.x[2] == pytest.approx(0.48)
        assert q.u[2] == pytest.approx(0.98)
        assert q.alive

    def test_top_reflection(self):
        p = Particle((100.0, 100.0, 999.0), (0.0, 0.0, 3.0))
        q = langevin_step(p, (0.0, 0.0, 0.0), STILL, 1.0, 1, grid=DomainGrid(), xi=np.zeros(3))
        assert q.x[2] == pytest.approx(998.06)
        assert q.u[2] == pytest.approx(-2.94)

    def test_horizontal_exit(self):
        p = Particle((1499.5, 100.0, 10.0))
        q = langevin_step(p, (1.0, 0.0, 0.0), STILL, 1.0, 1, grid=DomainGrid(), xi=np.zeros(3))
        assert not q.alive

    def test_dead_particles_frozen(self):
        ens = ParticleEnsemble(np.ones((3, 2)), np.zeros((3, 2)), 0, [True, False])
        langevin_step(ens, (1.0, 0.0, 0.0), STILL, 1.0, 1, xi=np.zeros((3, 2)))
        np.testing.assert_array_equal(ens.x[:, 1], [1.0, 1.0, 1.0])
        np.testing.assert_array_equal(ens.x[:, 0], [2.0, 1.0, 1.0])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 5.0))
    def test_never_leaves_vertical_range(self, seed, dt):
        rng = np.random.default_rng(seed)
        grid = DomainGrid(height=50.0)
        n = 200
        ens = ParticleEnsemble(
            np.vstack([rng.uniform(0, 1500, n), rng.uniform(0, 1000, n), rng.uniform(0, 50, n)]),
            rng.normal(0, 3.0, (3, n)), 0, True,
        )
        big = TurbulenceParams(sigma2=(4.0, 4.0, 9.0), tau_L=(10.0, 10.0, 10.0))
        for _ in range(20):
            langevin_step(ens, (0.5, 0.5, 0.0), big, dt, 1, rng=rng, grid=grid)
            z = ens.x[2, ens.alive]
            assert np.all(z >= 0.0) and np.all(z <= grid.height)

    def test_deterministic_without_turbulence(self):
        def path(seed):
            rng = np.random.default_rng(seed)
            p = Particle((10.0, 10.0, 10.0))
            for _ in range(50):
                p = langevin_step(p, (0.7, 0.3, 0.0), STILL, 1.0, 1, rng=rng)
            return p

        assert path(1) == path(2)

    def test_backward_retraces_forward(self):
        p0 = Particle((200.0, 300.0, 10.0))
        p = p0
        for _ in range(40):
            p = langevin_step(p, (1.2, -0.4, 0.0), STILL, 1.0, 1, xi=np.zeros(3))
        for _ in range(40):
            p = langevin_step(p, (1.2, -0.4, 0.0), STILL, 1.0, -1, xi=np.zeros(3))
        np.testing.assert_allclose(p.x, p0.x, atol=1e-10)

    def test_stationary_variance_small(self):
        rng = np.random.default_rng(3)
        params = TurbulenceParams()
        n = 20_000
        u = params.sigma.reshape(3, 1) * rng.standard_normal((3, n))
        ens = ParticleEnsemble(np.zeros((3, n)), u, 0, True)
        for _ in range(500):
            langevin_step(ens, (0.0, 0.0, 0.0), params, 1.0, 1, rng=rng)
        np.testing.assert_allclose(ens.u.var(axis=1), params.sigma2, rtol=0.05)


class TestRelease:
    def test_centroid(self):
        grid = DomainGrid()
        ens = release_particles(grid, "A2", 10_000, np.random.default_rng(7))
        lo, hi = grid.cell_bounds("A2")
        centroid = 0.5 * (lo + hi)
        np.testing.assert_allclose(ens.x.mean(axis=1), centroid, rtol=0.01)
        assert np.all(ens.source_id == 2)

    def test_velocity_spread(self):
        ens = release_particles(DomainGrid(), 1, 50_000, np.random.default_rng(8))
        np.testing.assert_allclose(ens.u.var(axis=1), TurbulenceParams().sigma2, rtol=0.03)

    def test_degenerate_cell(self):
        grid = DomainGrid(nx=1, ny=1, cell_dx=0.0, cell_dy=0.0, height=0.0)
        ens = release_particles(grid, 1, 1, np.random.default_rng(0))
        np.testing.assert_array_equal(ens.x[:, 0], [0.0, 0.0, 0.0])

    def test_errors(self):
        with pytest.raises(DomainError):
            release_particles(DomainGrid(), 1, 0, np.random.default_rng(0))
        with pytest.raises(DomainError):
            release_particles(DomainGrid(), 30, 5, np.random.default_rng(0))


class TestRunDispersion:
    def test_motionless_particle_in_sensor(self):
        grid = DomainGrid(nx=1, ny=1, cell_dx=0.0, cell_dy=0.0, height=0.0)
        sensors = [SensorSpec(0.0, 0.0, 0.0, edge=0.1)]
        cfg = SimulationConfig(dt=1.0, n_particles_per_source=1, duration=100.0)
        counts = run_dispersion(grid, sensors, calm(), STILL, cfg)
        assert counts.counts.tolist() == [[100]]
        assert counts.released.tolist() == [1]

    def test_no_sources(self):
        cfg = SimulationConfig(n_particles_per_source=10, duration=10.0)
        counts = run_dispersion(DomainGrid(), reference_sensors(), calm(), TurbulenceParams(), cfg, sources=[])
        assert counts.counts.shape == (6, 0)
        assert counts.counts.sum() == 0

    def test_worker_count_invariance(self):
        cfg = SimulationConfig(n_particles_per_source=CHUNK_SIZE + 500, duration=300.0, seed=11)
        args = (DomainGrid(), reference_sensors(edge=20.0), load_meteorology(), TurbulenceParams(), cfg)
        one = run_dispersion(*args, sources=[7, 12], workers=1)
        two = run_dispersion(*args, sources=[7, 12], workers=2)
        np.testing.assert_array_equal(one.counts, two.counts)
        assert one.counts.sum() > 0

    def test_seed_changes_counts(self):
        args = (DomainGrid(), reference_sensors(edge=20.0), load_meteorology(), TurbulenceParams())
        a = run_dispersion(*args, SimulationConfig(n_particles_per_source=500, duration=600.0, seed=1), sources=[12])
        b = run_dispersion(*args, SimulationConfig(n_particles_per_source=500, duration=600.0, seed=2), sources=[12])
        assert not np.array_equal(a.counts, b.counts)

    def test_downwind_sensor_detects(self):
        # westerly-northwesterly wind carries A12 (x 300..600, y 400..600) material east and south
        cfg = SimulationConfig(n_particles_per_source=2000, duration=1200.0, seed=5)
        counts = run_dispersion(DomainGrid(), reference_sensors(edge=20.0), load_meteorology(), TurbulenceParams(), cfg,
                                sources=["A12"])
        assert counts.counts[:, 0].sum() > 0
        # sensor S1 sits upwind of every other sensor's line
        assert counts.counts[0, 0] <= counts.counts[:, 0].max()

    def test_per_particle_tracking_sums(self):
        cfg = SimulationConfig(n_particles_per_source=800, duration=600.0, seed=9)
        counts = run_dispersion(DomainGrid(), reference_sensors(edge=20.0), load_meteorology(), TurbulenceParams(), cfg,
                                sources=[7, 12], track_particles=True)
        assert counts.per_particle.shape == (6, 1600)
        np.testing.assert_array_equal(counts.per_particle[:, :800].sum(axis=1), counts.counts[:, 0])
        np.testing.assert_array_equal(counts.per_particle[:, 800:].sum(axis=1), counts.counts[:, 1])

    def test_backward_run(self):
        cfg = SimulationConfig(n_particles_per_source=300, duration=600.0, direction=BACKWARD, seed=4)
        counts = run_dispersion(DomainGrid(), reference_sensors(), load_meteorology(), TurbulenceParams(), cfg,
                                sources=[2, 7, 12])
        assert counts.direction == BACKWARD
        assert counts.releaser_ids == counts.receptor_ids
        assert counts.counts.shape == (6, 3)
        assert counts.counts.sum() > 0

    def test_counts_roundtrip(self):
        cfg = SimulationConfig(n_particles_per_source=200, duration=300.0, seed=3)
        counts = run_dispersion(DomainGrid(), reference_sensors(edge=20.0), load_meteorology(), TurbulenceParams(), cfg,
                                sources=[12, 13])
        buf = io.StringIO()
        write_counts(counts, buf, header=["test"])
        back = read_counts(io.StringIO(buf.getvalue()))
        np.testing.assert_array_equal(back.counts, counts.counts)
        assert back.source_ids == ["A12", "A13"] and back.direction == FORWARD
        assert back.released.tolist() == [200, 200]
        assert back.sensor_edge == 20.0

    def test_reordering_invariance(self):
        rng = np.random.default_rng(12)
        n = 500
        x = np.vstack([rng.uniform(390, 410, n), rng.uniform(490, 510, n), rng.uniform(0, 20, n)])
        u = rng.normal(size=(3, n))
        xi = rng.standard_normal((3, n))
        sensor = SensorSpec(400.0, 500.0, 10.0, edge=10.0)
        perm = rng.permutation(n)

        def count(order):
            ens = ParticleEnsemble(x[:, order].copy(), u[:, order].copy(), 0, True)
            langevin_step(ens, (0.3, 0.1, 0.0), TurbulenceParams(), 1.0, 1, grid=DomainGrid(), xi=xi[:, order])
            return int(np.count_nonzero(sensor.contains(*ens.x) & ens.alive))

        assert count(np.arange(n)) == count(perm)
