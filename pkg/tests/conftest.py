import numpy as np
import pytest

from opf_duallearn.case_io import build_system, load_case, parse_case

TWO_BUS = """function mpc = two_bus
mpc.version = '2';
mpc.baseMVA = 100;
%% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin
mpc.bus = [
	1	3	0	0	0	0	1	1.0	0	135	1	1.1	0.9;
	2	1	50	20	0	10	1	1.0	0	135	1	1.1	0.9;
];
%% bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin
mpc.gen = [
	1	0	0	100	-100	1.0	100	1	200	0;
];
%% fbus tbus r x b rateA rateB rateC ratio angle status angmin angmax
mpc.branch = [
	1	2	0.01	0.1	0.02	150	150	150	0	0	1	-30	30;
];
mpc.gencost = [
	2	0	0	3	0.01	20	5;
];
"""

THREE_BUS = """function mpc = three_bus
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1.02	0	230	1	1.1	0.9;
	2	2	20	5	0	0	1	1.00	-1	230	1	1.1	0.9;
	3	1	90	30	2	5	1	0.98	-3	230	1	1.1	0.9;
];
mpc.gen = [
	1	60	0	80	-60	1.02	100	1	150	10;
	2	50	0	60	-40	1.00	100	1	120	0;
];
mpc.branch = [
	1	2	0.02	0.08	0.04	120	120	120	0	0	1	-30	30;
	2	3	0.01	0.09	0.03	100	100	100	1.02	3	1	-30	30;
	1	3	0.03	0.12	0.02	90	90	90	0	0	1	-30	30;
];
mpc.gencost = [
	2	0	0	3	0.02	15	10;
	2	0	0	3	0.03	25	5;
];
"""


@pytest.fixture(scope="session")
def two_bus():
    return build_system(parse_case(TWO_BUS, name="two_bus"))


@pytest.fixture(scope="session")
def three_bus():
    return build_system(parse_case(THREE_BUS, name="three_bus"))


@pytest.fixture(scope="session")
def case30():
    return load_case("pglib_opf_case30_ieee")


@pytest.fixture(scope="session")
def case57():
    return load_case("pglib_opf_case57_ieee")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_point(sys, rng, spread=0.05):
    """A voltage profile near flat start and generation inside the boxes."""
    n = sys.n_buses
    v = (1 + spread * rng.standard_normal(n)) * np.exp(1j * spread * rng.standard_normal(n))
    A = sys.arrays
    u = rng.uniform(0.2, 0.8, size=(2, n))
    s = A.s_min + (A.s_max - A.s_min).real * u[0] + 1j * (A.s_max - A.s_min).imag * u[1]
    s = np.where(A.gen_mask, s, 0)
    return s, v


# acceptance outcomes, printed once at the end of the session
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
