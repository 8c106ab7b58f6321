"""Smoke test for the pycrbc extension module."""

import math

import pycrbc


def main():
    mesh = pycrbc.Mesh.family_level("square", 2)
    assert mesh.num_boundary_edges % 2 == 1, mesh

    problem = pycrbc.Problem.manufactured_inactive(mesh, alpha=1.0)
    sol = problem.solve()
    assert sol.kkt_residual < 1e-6, sol
    control_err, state_err, flux_err = sol.errors
    assert control_err < 1.0 and state_err < 0.1, sol.errors
    assert sol.active_count == 0
    history = sol.objective_history()
    assert all(b <= a + 1e-12 * (1 + abs(a)) for a, b in zip(history, history[1:]))

    u = [0.3 * c for c in sol.control]
    g = problem.gradient(u)
    lengths = mesh.boundary_lengths()
    d = [math.sin(3.0 * i) for i in range(len(u))]
    eps = 1e-4
    fd = (problem.objective([a + eps * b for a, b in zip(u, d)])
          - problem.objective([a - eps * b for a, b in zip(u, d)])) / (2 * eps)
    analytic = sum(l * gi * di for l, gi, di in zip(lengths, g, d))
    assert abs(fd - analytic) <= 1e-6 * abs(analytic), (fd, analytic)

    active = pycrbc.Problem.manufactured_active(mesh, alpha=1.0, clip=0.5)
    asol = active.solve()
    lo, hi = active.bounds
    assert asol.active_count > 0
    assert all(lo <= c <= hi for c in asol.control)

    small = pycrbc.Mesh.family_level("pentagon", 0)
    custom = pycrbc.Problem.custom(small, "10 * math::sin(pi * x)", "x * y", alpha=0.1, bounds=(-0.2, 0.3))
    oracle_u, oracle_j = custom.oracle()
    csol = custom.solve(tol=1e-12)
    assert max(abs(a - b) for a, b in zip(oracle_u, csol.control)) < 1e-8
    assert abs(oracle_j - csol.objective) <= 1e-12 * (1 + abs(oracle_j))

    z = pycrbc.p1_tilde([1.0, 2.0, 3.0])
    assert [0.5 * (z[i] + z[(i + 1) % 3]) for i in range(3)] == [1.0, 2.0, 3.0]
    try:
        pycrbc.p1_tilde([1.0, 2.0])
    except ValueError:
        pass
    else:
        raise AssertionError("even boundary accepted")

    table = pycrbc.study("inactive", levels=3)
    rows = table.strip().splitlines()
    assert rows[0].startswith("level,h,boundary_edges,control_error,control_eoc")
    assert len(rows) == 4

    print("pycrbc", pycrbc.__version__, "smoke test passed:", sol)


if __name__ == "__main__":
    main()
