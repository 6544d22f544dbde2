import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voltmesh.lp import (INFEASIBLE, NUMERICAL_FAILURE, OPTIMAL, UNBOUNDED, LinearProgram, dual_bound, dump,
                         enumerate_vertices, solve)


def test_hand_solvable():
    # max x1 + x2 s.t. x1 + x2 <= 1, 0 <= x <= 1
    lp = LinearProgram.from_senses([-1, -1], [[1, 1]], ["<="], [1], 0, 1)
    r = solve(lp)
    assert r.status == OPTIMAL and -r.objective == pytest.approx(1.0)


def test_contradictory_bounds():
    lp = LinearProgram.from_senses([1.0], np.zeros((0, 1)), [], [], lb=2.0, ub=1.0)
    assert solve(lp).status == INFEASIBLE


def test_infeasible_rows_and_unbounded():
    lp = LinearProgram.from_senses([1, 0], [[1, 1], [1, 1]], ["<=", ">="], [1, 2], 0, np.inf)
    assert solve(lp).status == INFEASIBLE
    lp = LinearProgram.from_senses([-1, 0], [[1, -1]], ["<="], [1], 0, np.inf)
    assert solve(lp).status == UNBOUNDED


def test_free_variables_and_equalities():
    # min |shift| style: x free, x = 3 - y, y in [0, 1], minimise x  -> x = 2
    lp = LinearProgram.from_senses([1, 0], [[1, 1]], ["="], [3], [-np.inf, 0], [np.inf, 1])
    r = solve(lp)
    assert r.ok and r.x == pytest.approx([2.0, 1.0])


BEALE = dict(
    c=[-0.75, 20, -0.5, 6],
    A=[[0.25, -8, -1, 9], [0.5, -12, -0.5, 3], [0, 0, 1, 0]],
    senses=["<=", "<=", "<="], b=[0, 0, 1],
)


@pytest.mark.parametrize("bland_after", [0, 1, 50])
def test_beale_cycling_example_terminates(bland_after):
    lp = LinearProgram.from_senses(BEALE["c"], BEALE["A"], BEALE["senses"], BEALE["b"], 0, np.inf)
    r = solve(lp, bland_after=bland_after)
    assert r.status == OPTIMAL
    assert r.objective == pytest.approx(-1.25, abs=1e-9)


def test_iteration_cap_reports_numerical_failure():
    rng = np.random.default_rng(0)
    A = rng.uniform(0.1, 1.0, size=(8, 8))
    lp = LinearProgram.from_senses(-np.ones(8), A, ["<="] * 8, np.ones(8), 0, np.inf)
    assert solve(lp, max_iter=1).status == NUMERICAL_FAILURE
    assert solve(lp).ok


def random_lp(rng, m, n):
    A = rng.integers(-4, 5, size=(m, n)).astype(float)
    senses = rng.choice(["<=", ">=", "="], size=m, p=[0.5, 0.3, 0.2])
    b = rng.integers(-5, 8, size=m).astype(float)
    c = rng.integers(-5, 6, size=n).astype(float)
    lb = rng.integers(-3, 1, size=n).astype(float)
    ub = lb + rng.integers(1, 5, size=n)
    return LinearProgram.from_senses(c, A, senses, b, lb, ub)


@settings(max_examples=100)
@given(seed=st.integers(0, 2**31), m=st.integers(1, 5), n=st.integers(1, 5))
def test_matches_vertex_enumeration(seed, m, n):
    lp = random_lp(np.random.default_rng(seed), m, n)
    ref, _ = enumerate_vertices(lp)
    r = solve(lp)
    if ref is None:
        assert r.status == INFEASIBLE
    else:
        assert r.status == OPTIMAL
        assert abs(r.objective - ref) <= 1e-8 * max(1.0, abs(ref))
        assert lp.residual(r.x) <= 1e-7


@settings(max_examples=100)
@given(seed=st.integers(0, 2**31), m=st.integers(1, 6), n=st.integers(1, 6))
def test_strong_duality(seed, m, n):
    lp = random_lp(np.random.default_rng(seed), m, n)
    r = solve(lp)
    if r.ok:
        assert abs(dual_bound(lp, r.duals) - r.objective) <= 1e-6 * max(1.0, abs(r.objective))


def test_dual_bound_is_a_lower_bound():
    rng = np.random.default_rng(5)
    for _ in range(50):
        lp = random_lp(rng, 3, 3)
        r = solve(lp)
        if not r.ok:
            continue
        y = rng.normal(size=3)
        y[np.isinf(lp.row_lo) & (y > 0)] = 0.0
        y[np.isinf(lp.row_hi) & (y < 0)] = 0.0
        assert dual_bound(lp, y) <= r.objective + 1e-9


def test_dump_grammar():
    lp = LinearProgram.from_senses([1, -2], [[1, 1], [1, 0]], ["<=", "="], [4, 1], [0, 0], [3, np.inf],
                                   names=["a", "b"], row_names=["cap", "fix"])
    text = dump(lp)
    assert text.splitlines() == [
        "minimize",
        "  obj: 1 a - 2 b",
        "subject to",
        "  cap: 1 a + 1 b <= 4",
        "  fix: 1 a = 1",
        "bounds",
        "  0 <= a <= 3",
        "  0 <= b <= inf",
    ]


def test_rejects_non_finite_data():
    with pytest.raises(ValueError):
        LinearProgram.from_senses([np.nan], [[1.0]], ["<="], [1.0])
    with pytest.raises(ValueError):
        LinearProgram.from_senses([1.0], [[1.0]], ["<"], [1.0])
