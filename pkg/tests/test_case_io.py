from importlib import resources

import numpy as np
import pytest

from opf_duallearn.case_io import (
    FLOW_LIMIT_SENTINEL,
    DuplicateBranchDirection,
    InvalidCase,
    MalformedRow,
    MissingBlock,
    UnsupportedCostModel,
    ZeroImpedanceBranch,
    build_system,
    builtin_cases,
    load_case,
    parse_case,
)

from conftest import THREE_BUS, TWO_BUS


def test_two_bus_tables_have_expected_rows():
    raw = parse_case(TWO_BUS)
    assert raw.base_mva == 100
    assert [len(raw.bus), len(raw.gen), len(raw.branch), len(raw.gencost)] == [2, 1, 1, 1]
    assert raw.branch[0, 2] == 0.01 and raw.branch[0, 3] == 0.1


def test_case30_has_thirty_bus_rows():
    text = (resources.files("opf_duallearn") / "cases" / "pglib_opf_case30_ieee.m").read_text()
    raw = parse_case(text)
    assert len(raw.bus) == 30


def test_only_base_mva_reports_missing_bus_block():
    with pytest.raises(MissingBlock) as exc:
        parse_case("mpc.baseMVA = 100;\n")
    assert exc.value.name == "bus"


def test_missing_base_mva():
    with pytest.raises(MissingBlock):
        parse_case(TWO_BUS.replace("mpc.baseMVA = 100;", ""))


def test_malformed_row_reports_line():
    bad = TWO_BUS.replace("0.01	0.1	0.02", "0.01	abc	0.02")
    with pytest.raises(MalformedRow) as exc:
        parse_case(bad)
    assert exc.value.line == bad.splitlines().index(next(l for l in bad.splitlines() if "abc" in l)) + 1


def test_ragged_row_is_malformed():
    bad = TWO_BUS.replace("2	1	50	20	0	10	1	1.0	0	135	1	1.1	0.9;", "2	1	50	20	0	10	1	1.0	0	135	1	1.1;")
    with pytest.raises(MalformedRow):
        parse_case(bad)


@pytest.mark.parametrize("row", ["1	0	0	2	0	0	20	50;", "2	0	0	4	1	0.01	20	5;"])
def test_unsupported_cost_models(row):
    with pytest.raises(UnsupportedCostModel):
        parse_case(TWO_BUS.replace("2	0	0	3	0.01	20	5;", row))


def test_gen_at_unknown_bus_is_invalid():
    with pytest.raises(InvalidCase):
        parse_case(TWO_BUS.replace("1	0	0	100	-100", "7	0	0	100	-100"))


def test_per_unit_conversion(two_bus):
    b1, b2 = two_bus.buses
    br = two_bus.branches[0]
    assert b2.demand == pytest.approx(0.5 + 0.2j)
    # MATPOWER shunt Gs + jBs is consumption; stored with the opposite sign
    assert b2.y_shunt == pytest.approx(-0.1j)
    assert b1.s_max == pytest.approx(2.0 + 1.0j)
    assert b1.s_min == pytest.approx(0.0 - 1.0j)
    assert (b1.c0, b1.c1, b1.c2) == (5.0, 20.0, 0.01)
    assert not b2.has_generator and b2.s_min == 0 and b2.s_max == 0
    assert br.y_line == pytest.approx(0.9900990099 - 9.900990099j, rel=1e-9)
    assert br.t == 1 + 0j
    assert br.y_c_from == pytest.approx(0.01j) and br.y_c_to == pytest.approx(0.01j)
    assert br.f_max_from == pytest.approx(1.5)
    assert br.theta_min == pytest.approx(-np.pi / 6) and br.theta_max == pytest.approx(np.pi / 6)


def test_transformer_ratio_from_tap_and_shift(three_bus):
    br = three_bus.branches[1]
    assert br.t == pytest.approx(1.02 * np.exp(1j * np.deg2rad(3)))


def test_generators_aggregate_per_bus():
    text = TWO_BUS.replace(
        "	1	0	0	100	-100	1.0	100	1	200	0;\n",
        "	1	0	0	100	-100	1.0	100	1	100	0;\n	1	0	0	50	-50	1.0	100	1	200	0;\n",
    ).replace("	2	0	0	3	0.01	20	5;\n", "	2	0	0	3	0.01	20	5;\n	2	0	0	2	30	1;\n")
    sys = build_system(parse_case(text))
    b = sys.buses[0]
    assert b.s_max.real == pytest.approx(3.0)
    assert b.s_max.imag == pytest.approx(1.5)
    assert (b.c0, b.c1, b.c2) == pytest.approx((6.0, 50.0, 0.01))


def test_out_of_service_generator_and_branch_dropped():
    text = THREE_BUS.replace("2	50	0	60	-40	1.00	100	1	120	0;", "2	50	0	60	-40	1.00	100	0	120	0;")
    text = text.replace("1	3	0.03	0.12	0.02	90	90	90	0	0	1", "1	3	0.03	0.12	0.02	90	90	90	0	0	0")
    sys = build_system(parse_case(text))
    assert sys.n_branches == 2
    assert not sys.buses[1].has_generator


def test_zero_rating_becomes_sentinel_and_wide_angles_clamp():
    text = TWO_BUS.replace("150	150	150	0	0	1	-30	30", "0	0	0	0	0	1	-360	360")
    br = build_system(parse_case(text)).branches[0]
    assert br.f_max_from == FLOW_LIMIT_SENTINEL and br.f_max_to == FLOW_LIMIT_SENTINEL
    assert br.theta_min == -np.pi / 2 and br.theta_max == np.pi / 2


def test_zero_impedance_branch_rejected():
    with pytest.raises(ZeroImpedanceBranch):
        build_system(parse_case(TWO_BUS.replace("0.01	0.1	0.02", "0	0	0.02")))


def test_parallel_branches_kept_or_rejected():
    row = "	1	2	0.01	0.1	0.02	150	150	150	0	0	1	-30	30;\n"
    text = TWO_BUS.replace(row, row + row)
    assert build_system(parse_case(text)).n_branches == 2
    with pytest.raises(DuplicateBranchDirection):
        build_system(parse_case(text), allow_parallel=False)


def test_per_unit_idempotence_on_unit_base():
    text = """mpc.baseMVA = 1;
mpc.bus = [1 3 0.5 0.2 0.1 0.3 1 1 0 1 1 1.1 0.9; 2 1 0.4 0.1 0 0 1 1 0 1 1 1.1 0.9];
mpc.gen = [1 0 0 0.7 -0.7 1 1 1 1.5 0.1];
mpc.branch = [1 2 0.01 0.1 0.02 0.9 0 0 0 0 1 -30 30];
mpc.gencost = [2 0 0 3 1 2 3];
"""
    sys = build_system(parse_case(text))
    b1, b2 = sys.buses
    assert b1.demand == 0.5 + 0.2j
    assert b1.y_shunt == -(0.1 + 0.3j)
    assert b1.s_max == 1.5 + 0.7j and b1.s_min == 0.1 - 0.7j
    assert sys.branches[0].f_max_from == 0.9


def test_adjacency_has_self_first_and_matches_branches(three_bus):
    adj = three_bus.adjacency
    assert [a[0] for a in adj] == [0, 1, 2]
    assert sorted(adj[0][1:]) == [1, 2]
    assert sum(len(a) - 1 for a in adj) == 2 * three_bus.n_branches


@pytest.mark.parametrize("name,n", [("case30_ieee", 30), ("case57_ieee", 57), ("case118_ieee", 118),
                                    ("pglib_opf_case179_goc", 179), ("case300_ieee", 300)])
def test_builtin_cases_load_and_are_finite(name, n):
    sys = load_case(name)
    assert sys.n_buses == n
    A = sys.arrays
    for field in A.__dataclass_fields__:
        assert np.all(np.isfinite(getattr(A, field))), field
    assert np.all(A.v_min <= A.v_max)
    assert np.all(A.s_min.real <= A.s_max.real) and np.all(A.s_min.imag <= A.s_max.imag)
    assert np.all(A.theta_min <= A.theta_max)
    assert np.all(A.f_max_from > 0) and np.all(A.t != 0)
    load = ~A.gen_mask.astype(bool)
    assert np.all(A.s_min[load] == 0) and np.all(A.s_max[load] == 0)


def test_builtin_case_names():
    assert "pglib_opf_case30_ieee" in builtin_cases()
    with pytest.raises(FileNotFoundError):
        load_case("no_such_case")


def test_row_counts_round_trip(case30):
    raw_branches = 41
    assert case30.n_buses == 30 and case30.n_branches == raw_branches


def test_permuted_keeps_ids(three_bus):
    p = three_bus.permuted([2, 0, 1])
    assert [b.id for b in p.buses] == [3, 1, 2]
    assert p.ref_index == 1
    with pytest.raises(ValueError):
        three_bus.permuted([0, 0, 1])
