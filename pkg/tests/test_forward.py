import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adcinv.fem import assemble
from adcinv.forward import MM2_PER_H_TO_MM2_PER_S, ControlState, StateSeries, forward_solve
from adcinv.mesh import Variant, generate_phantom, read_field
from adcinv.synthetic import manufactured_control, manufactured_g

D3 = np.array([1000.0, 4.0, 8.0])


def _control(system, k, value=0.0, D=D3):
    return ControlState(D, np.full((k + 1, len(system.dirichlet_index)), value))


def test_zero_in_zero_out(system4):
    s = forward_solve(system4, _control(system4, 5), np.zeros(system4.n), 1.0, 5)
    assert np.all(s.u == 0.0)


def test_constant_is_steady_state(system4):
    c = 0.7
    s = forward_solve(system4, _control(system4, 10, c), np.full(system4.n, c), 0.5, 10)
    np.testing.assert_allclose(s.u, c, rtol=1e-12)


def test_dirichlet_rows_carry_g(two8_system):
    k = 4
    ctrl = manufactured_control(two8_system, 1.0, k, np.array([4.0, 8.0]))
    s = forward_solve(two8_system, ctrl, np.zeros(two8_system.n), 1.0, k)
    np.testing.assert_array_equal(s.u[:, two8_system.dirichlet_index], ctrl.g)


def test_maximum_principle_lumped():
    mesh = generate_phantom(6, 40.0, Variant.THREE_DOMAIN)
    system = assemble(mesh, lumped=True)
    rng = np.random.default_rng(2)
    k = 15
    g = rng.uniform(0.2, 1.0, size=(k + 1, len(system.dirichlet_index)))
    u0 = rng.uniform(0.0, 0.5, system.n)
    s = forward_solve(system, ControlState(D3, g), u0, 0.3, k)
    lo, hi = min(u0.min(), g.min()), max(u0.max(), g.max())
    assert s.u.min() >= lo - 1e-12 and s.u.max() <= hi + 1e-12


def test_pure_neumann_conserves_mass(two8):
    system = assemble(two8, dirichlet_markers=())
    rng = np.random.default_rng(5)
    u0 = rng.uniform(size=system.n)
    k = 100
    s = forward_solve(system, ControlState([4.0, 8.0], np.zeros((k + 1, 0))), u0, 0.5, k)
    total = s.u @ (system.M @ np.ones(system.n))
    np.testing.assert_allclose(total, total[0], rtol=1e-10)
    # and the state relaxes toward the mean
    assert np.ptp(s.u[-1]) < np.ptp(u0)


def test_manufactured_run_stays_below_max_g():
    mesh = generate_phantom(8, 40.0, Variant.THREE_DOMAIN)
    system = assemble(mesh)
    dt, k = 0.24, 100
    s = forward_solve(system, manufactured_control(system, dt, k), np.zeros(system.n), dt, k)
    gmax = manufactured_g(np.linspace(0, 24, 100001)).max()
    assert s.u.max() <= gmax + 1e-9
    assert 0.3 <= s.u.max() < 1.3
    # consistent mass is not monotone under the initial boundary jump; lumped mass is
    lumped = assemble(mesh, lumped=True)
    s = forward_solve(lumped, manufactured_control(lumped, dt, k), np.zeros(lumped.n), dt, k)
    assert s.u.min() >= 0.0 and s.u.max() <= gmax + 1e-9


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_solution_is_linear_in_data(a, b, seed):
    mesh = generate_phantom(4, 40.0, Variant.THREE_DOMAIN)
    system = assemble(mesh)
    rng = np.random.default_rng(seed)
    k = 3
    nb = len(system.dirichlet_index)
    g1, g2 = rng.normal(size=(2, k + 1, nb))
    u1, u2 = rng.normal(size=(2, system.n))
    s1 = forward_solve(system, ControlState(D3, g1), u1, 0.5, k).u
    s2 = forward_solve(system, ControlState(D3, g2), u2, 0.5, k).u
    s12 = forward_solve(system, ControlState(D3, a * g1 + b * g2), a * u1 + b * u2, 0.5, k).u
    np.testing.assert_allclose(s12, a * s1 + b * s2, atol=1e-10 * (1 + abs(a) + abs(b)) * max(1, np.abs(s12).max()))


def test_input_validation(system4):
    k = 2
    with pytest.raises(ValueError, match="NaN"):
        forward_solve(system4, _control(system4, k), np.full(system4.n, np.nan), 1.0, k)
    with pytest.raises(ValueError, match="initial condition"):
        forward_solve(system4, _control(system4, k), np.zeros(3), 1.0, k)
    with pytest.raises(ValueError, match="k \\+ 1"):
        forward_solve(system4, _control(system4, k + 1), np.zeros(system4.n), 1.0, k)
    with pytest.raises(ValueError, match="positive"):
        forward_solve(system4, _control(system4, k, D=np.array([1.0, -1.0, 1.0])), np.zeros(system4.n), 1.0, k)
    with pytest.raises(ValueError, match="dt"):
        forward_solve(system4, _control(system4, k), np.zeros(system4.n), 0.0, k)


def test_accepts_vertex_field(system4, phantom4):
    s = forward_solve(system4, _control(system4, 1, 1.0), phantom4.field(np.ones(system4.n)), 1.0, 1)
    assert s.mesh_id == phantom4.mesh_id
    np.testing.assert_allclose(s.times, [0.0, 1.0])


def test_state_series_export(tmp_path):
    u = np.arange(12.0).reshape(3, 4)
    manifest = StateSeries(u, 0.5).export(tmp_path)
    data = json.loads(manifest.read_text())
    assert data == {"dt": 0.5, "k": 2, "files": ["u_0000.txt", "u_0001.txt", "u_0002.txt"]}
    np.testing.assert_array_equal(read_field(tmp_path / "u_0002.txt"), u[2])


def test_unit_conversion():
    assert 3600 * MM2_PER_H_TO_MM2_PER_S == pytest.approx(1.0)
