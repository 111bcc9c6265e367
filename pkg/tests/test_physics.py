import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opf_duallearn import autodiff as ad
from opf_duallearn import physics as ph
from opf_duallearn.case_io import Branch, Bus, PowerSystem, load_case

from conftest import random_point


def make_bus(k, **kw):
    base = dict(id=k, y_shunt=0j, s_min=0j, s_max=0j, v_min=0.9, v_max=1.1, c0=0.0, c1=0.0, c2=0.0,
                has_generator=False, is_reference=(k == 1))
    base.update(kw)
    return Bus(**base)


def make_branch(fb, tb, **kw):
    base = dict(from_bus=fb, to_bus=tb, t=1 + 0j, y_line=1 + 0j, y_c_from=0j, y_c_to=0j, f_max_from=1.0,
                f_max_to=1.0, theta_min=-np.pi / 4, theta_max=np.pi / 4)
    base.update(kw)
    return Branch(**base)


def line(**kw):
    return PowerSystem("line", 1.0, (make_bus(1), make_bus(2)), (make_branch(1, 2, **kw),))


def flows_complex(sys, v):
    pf, qf, pt, qt = ph.branch_flows(sys, v.real, v.imag)
    return pf + 1j * qf, pt + 1j * qt


def test_equal_voltages_no_shunt_carry_no_flow():
    ff, ft = flows_complex(line(), np.array([1.0 + 0j, 1.0 + 0j]))
    assert ff[0] == 0 and ft[0] == 0


def test_zero_admittance_carries_no_flow():
    v = np.array([1.02 * np.exp(0.1j), 0.95 * np.exp(-0.2j)])
    ff, _ = flows_complex(line(y_line=0j, y_c_from=0j), v)
    assert ff[0] == 0


def test_hand_computed_flows():
    ff, ft = flows_complex(line(), np.array([1.0 + 0j, 0.9 + 0j]))
    assert ff[0] == pytest.approx(0.1, abs=1e-15)
    assert ft[0] == pytest.approx(-0.09, abs=1e-15)


def test_isolated_balanced_bus_has_zero_residual():
    sys = PowerSystem("iso", 1.0, (make_bus(1),), ())
    h = ph.balance_residual(sys, np.array([0.3]), np.array([0.1]), np.array([0.3]), np.array([0.1]),
                            np.array([1.0]), np.array([0.0]))
    assert np.all(h == 0)


def test_shunt_term_in_residual():
    sys = PowerSystem("iso", 1.0, (make_bus(1, y_shunt=1 + 0j),), ())
    z = np.zeros(1)
    h = ph.balance_residual(sys, z, z, z, z, np.ones(1), z)
    assert list(h) == [1.0, 0.0]


def test_two_bus_residual_matches_scripted_sum(two_bus, rng):
    s, v = random_point(two_bus, rng)
    r = two_bus.arrays.demand
    br = two_bus.branches[0]
    vi, vj = v
    f_ij = np.conj(br.y_line + br.y_c_from) * abs(vi / br.t) ** 2 - np.conj(br.y_line) * vi * np.conj(vj) / br.t
    f_ji = np.conj(br.y_line + br.y_c_to) * abs(vj) ** 2 - np.conj(br.y_line) * np.conj(vi) * vj / np.conj(br.t)
    ysh = two_bus.arrays.y_shunt
    expect = np.array([
        s[0] - r[0] - f_ij + np.conj(ysh[0]) * abs(vi) ** 2,
        s[1] - r[1] - f_ji + np.conj(ysh[1]) * abs(vj) ** 2,
    ])
    h = ph.balance_residual(two_bus, r.real, r.imag, s.real, s.imag, v.real, v.imag)
    assert np.allclose(h[0::2], expect.real, atol=1e-14) and np.allclose(h[1::2], expect.imag, atol=1e-14)


def _random_system(rng, n=5, m=7):
    buses = []
    for k in range(1, n + 1):
        buses.append(make_bus(k, y_shunt=complex(*rng.normal(0, 0.05, 2)), has_generator=k <= 2,
                              s_min=complex(0, -1) if k <= 2 else 0j, s_max=complex(2, 1) if k <= 2 else 0j))
    branches = []
    pairs = [(1, 2), (2, 3), (3, 4), (4, 5), (1, 5)]
    while len(pairs) < m:
        a, b = rng.choice(np.arange(1, n + 1), 2, replace=False)
        pairs.append((int(a), int(b)))
    for f, t in pairs:
        z = complex(rng.uniform(0.005, 0.05), rng.uniform(0.05, 0.3))
        tap = rng.uniform(0.95, 1.05) * np.exp(1j * rng.uniform(-0.1, 0.1))
        branches.append(make_branch(f, t, y_line=1 / z, t=tap, y_c_from=1j * rng.uniform(0, 0.05),
                                    y_c_to=1j * rng.uniform(0, 0.05)))
    return PowerSystem("rand", 100.0, tuple(buses), tuple(branches))


def _dense_oracle(sys):
    """MATPOWER-style Yf, Yt and Ybus built entry by entry."""
    n, m = sys.n_buses, sys.n_branches
    Yf = np.zeros((m, n), complex)
    Yt = np.zeros((m, n), complex)
    for k, br in enumerate(sys.branches):
        i, j = sys.bus_index[br.from_bus], sys.bus_index[br.to_bus]
        Yf[k, i] = (br.y_line + br.y_c_from) / abs(br.t) ** 2
        Yf[k, j] = -br.y_line / np.conj(br.t)
        Yt[k, i] = -br.y_line / br.t
        Yt[k, j] = br.y_line + br.y_c_to
    Cf = np.zeros((m, n))
    Ct = np.zeros((m, n))
    Cf[np.arange(m), sys.from_idx] = 1
    Ct[np.arange(m), sys.to_idx] = 1
    Ybus = Cf.T @ Yf + Ct.T @ Yt - np.diag(sys.arrays.y_shunt)
    return Yf, Yt, Ybus


@pytest.mark.parametrize("seed", range(5))
def test_flows_and_balance_match_dense_admittance_oracle(seed):
    rng = np.random.default_rng(seed)
    sys = _random_system(rng)
    Yf, Yt, Ybus = _dense_oracle(sys)
    s, v = random_point(sys, rng, spread=0.1)
    r = rng.normal(0.3, 0.1, sys.n_buses) + 1j * rng.normal(0.1, 0.05, sys.n_buses)
    ff, ft = flows_complex(sys, v)
    vf, vt = v[sys.from_idx], v[sys.to_idx]
    of = vf * np.conj(Yf @ v)
    ot = vt * np.conj(Yt @ v)
    assert np.max(np.abs(ff - of)) <= 1e-12 * np.max(np.abs(of))
    assert np.max(np.abs(ft - ot)) <= 1e-12 * np.max(np.abs(ot))
    h = ph.balance_residual(sys, r.real, r.imag, s.real, s.imag, v.real, v.imag)
    oh = s - r - v * np.conj(Ybus @ v)
    assert np.allclose(h[0::2] + 1j * h[1::2], oh, rtol=0, atol=1e-12)


def test_slacks_at_box_midpoint_are_negative(three_bus):
    A = three_bus.arrays
    s = (A.s_min + A.s_max) / 2
    vm = (A.v_min + A.v_max) / 2
    v = vm * np.exp(1j * np.zeros(3))
    g = ph.inequality_slacks(three_bus, s.real, s.imag, v.real, v.imag)
    blocks = ph.slack_blocks(three_bus)
    gen = A.gen_mask.astype(bool)
    for name in ("re_s_lower", "re_s_upper", "im_s_lower", "im_s_upper"):
        assert np.all(g[blocks[name]][gen] < 0)
    for name in ("v_lower", "v_upper", "angle_lower", "angle_upper"):
        assert np.all(g[blocks[name]] < 0)


def test_voltage_at_upper_bound_is_active(three_bus):
    A = three_bus.arrays
    v = A.v_max.astype(complex)
    g = ph.inequality_slacks(three_bus, np.zeros(3), np.zeros(3), v.real, v.imag)
    assert np.all(g[ph.slack_blocks(three_bus)["v_upper"]] == 0)


def test_generation_slacks_by_subtraction():
    sys = PowerSystem("g", 1.0, (make_bus(1, has_generator=True, s_min=1 + 0j, s_max=2 + 1j),), ())
    g = ph.inequality_slacks(sys, np.array([1.5]), np.array([0.25]), np.array([1.0]), np.array([0.0]))
    assert list(g[:4]) == [-0.5, -0.5, -0.25, -0.75]


def test_angle_slack_uses_product_angle():
    sys = line(theta_min=-0.3, theta_max=0.3)
    v = np.array([np.exp(3.0j), np.exp(-3.0j)])  # naive difference 6 rad, product angle 6 - 2 pi
    g = ph.inequality_slacks(sys, np.zeros(2), np.zeros(2), v.real, v.imag)
    blocks = ph.slack_blocks(sys)
    ang = 6.0 - 2 * np.pi
    assert g[blocks["angle_upper"]][0] == pytest.approx(ang - 0.3)
    assert g[blocks["angle_lower"]][0] == pytest.approx(-0.3 - ang)


def test_cost_polynomial_in_native_units():
    sys = PowerSystem("c", 1.0, (make_bus(1, c0=1.0, c1=2.0, c2=3.0, has_generator=True),), ())
    assert float(ph.cost(sys, np.array([2.0]))) == 17.0
    zero = PowerSystem("z", 1.0, (make_bus(1),), ())
    assert float(ph.cost(zero, np.array([5.0]))) == 0.0


def test_cost_uses_base_mva(two_bus):
    # Re s = 0.5 p.u. = 50 MW on a 100 MVA base: 5 + 20*50 + 0.01*2500
    assert float(ph.cost(two_bus, np.array([0.5, 0.0]))) == pytest.approx(1030.0)


def test_cost_linear_when_c2_zero(case30):
    sys = PowerSystem("lin", case30.base_mva,
                      tuple(Bus(**{**b.__dict__, "c2": 0.0}) for b in case30.buses), case30.branches)
    p = np.random.default_rng(0).uniform(0, 1, 30)
    c0 = sys.arrays.c0.sum()
    assert float(ph.cost(sys, 2 * p)) - c0 == pytest.approx(2 * (float(ph.cost(sys, p)) - c0), rel=1e-13)


def test_penalty_examples():
    assert float(ph.penalty(np.array([-1.0, -0.5]), np.zeros(2), 3.0)) == 0.0
    assert float(ph.penalty(np.array([0.5]), np.array([0.1]), 2.0)) == pytest.approx(0.26, abs=1e-15)
    assert float(ph.penalty(np.array([0.5]), np.array([0.1]), 2.0, 10.0)) == pytest.approx(0.25 + 0.05)


vec = st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=8)


@settings(max_examples=200, deadline=None)
@given(g=vec, h=vec, gamma=st.floats(0.01, 100), k=st.floats(0.01, 100))
def test_penalty_properties(g, h, gamma, k):
    g, h = np.array(g), np.array(h)
    p = float(ph.penalty(g, h, gamma))
    feasible = np.all(g <= 0) and np.all(h == 0)
    assert (p == 0.0) == (feasible or (np.all(np.maximum(g, 0) ** 2 == 0) and np.all(h**2 == 0)))
    assert float(ph.penalty(g, h, k * gamma)) == pytest.approx(k * p, rel=1e-12, abs=1e-300)


@pytest.mark.parametrize("name", ["case30_ieee", "case57_ieee", "case118_ieee", "pglib_opf_case179_goc",
                                  "case300_ieee"])
def test_slack_lengths_on_pglib(name):
    sys = load_case(name)
    r = sys.arrays.demand
    ev = ph.evaluate(sys, r, np.zeros(sys.n_buses), np.ones(sys.n_buses, complex))
    assert ev.g.shape == (6 * sys.n_buses + 4 * sys.n_branches,)
    assert ev.h.shape == (2 * sys.n_buses,)


def _physics_loss(sys, r):
    n = sys.n_buses
    gw = np.random.default_rng(7).uniform(0.5, 1.5, sys.n_ineq)

    def f(tape, x):
        p, q, e, fi = (ad.index(x, np.arange(k * n, (k + 1) * n), axis=0) for k in range(4))
        flows = ph.branch_flows(sys, e, fi)
        g = ph.inequality_slacks(sys, p, q, e, fi, flows)
        h = ph.balance_residual(sys, r.real, r.imag, p, q, e, fi, flows)
        total = ad.add(ad.mul(ph.cost(sys, p), 1e-3), ph.penalty(g, h, 5.0, 3.0))
        return ad.add(total, ad.sum(ad.mul(g, gw)))

    return f


@pytest.mark.parametrize("seed", range(4))
def test_physics_gradients_match_finite_differences(three_bus, seed):
    rng = np.random.default_rng(seed)
    s, v = random_point(three_bus, rng, spread=0.1)
    x = np.concatenate([s.real, s.imag, v.real, v.imag])
    rep = ad.grad_check(_physics_loss(three_bus, three_bus.arrays.demand), x, step=1e-6, tol=1e-5, floor=1e-6)
    assert rep.passed, (rep.max_rel_error, rep.failing)
    assert rep.n_checked + len(rep.kinks) == x.size


def test_voltage_magnitude_subgradient_at_zero():
    tape = ad.Tape()
    e, f = tape.leaf(np.zeros(1)), tape.leaf(np.zeros(1))
    grads = tape.backward(ad.sum(ad.hypot(e, f)))
    assert grads[e][0] == 0 and grads[f][0] == 0


def test_batched_evaluation_matches_single(case30, rng):
    s1, v1 = random_point(case30, rng)
    s2, v2 = random_point(case30, rng)
    S, V = np.stack([s1, s2]), np.stack([v1, v2])
    r = np.tile(case30.arrays.demand, (2, 1))
    gb = ph.inequality_slacks(case30, S.real, S.imag, V.real, V.imag)
    hb = ph.balance_residual(case30, r.real, r.imag, S.real, S.imag, V.real, V.imag)
    for k, (s, v) in enumerate([(s1, v1), (s2, v2)]):
        ev = ph.evaluate(case30, r[k], s, v)
        assert np.array_equal(gb[k], ev.g)
        assert np.allclose(hb[k], ev.h, rtol=0, atol=1e-13)
