#!/usr/bin/env python3
"""Re-solve a conic program dump with cvxpy and print the optimal objective.

Usage: resolve_program.py PROGRAM.json [--solver CVXOPT]

Prints one JSON object: {"status": ..., "objective": ..., "solver": ...}.
Exits 2 when cvxpy or the requested solver is unavailable.
"""

import argparse
import json
import sys

import numpy as np


def affine_parts(expr, n):
    """Coefficient row and constant of an affine expression."""
    row = np.zeros(n)
    for k, coef in expr["terms"].items():
        row[int(k)] += coef
    return row, expr["constant"]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("program")
    parser.add_argument("--solver", default="CVXOPT")
    args = parser.parse_args()

    try:
        import cvxpy as cp
    except ImportError:
        print(json.dumps({"status": "unavailable", "reason": "cvxpy not installed"}))
        return 2
    if args.solver not in cp.installed_solvers():
        print(json.dumps({"status": "unavailable", "reason": f"{args.solver} not installed"}))
        return 2

    with open(args.program) as fh:
        prog = json.load(fh)

    n = prog["num_vars"]
    x = cp.Variable(n)
    constraints = []
    if prog["equalities"]:
        a_eq = np.zeros((len(prog["equalities"]), n))
        b_eq = np.zeros(len(prog["equalities"]))
        for r, row in enumerate(prog["equalities"]):
            for k, coef in row["coeffs"].items():
                a_eq[r, int(k)] += coef
            b_eq[r] = row["rhs"]
        constraints.append(a_eq @ x == b_eq)
    for block in prog["psd_blocks"]:
        dim = block["dim"]
        coef = np.zeros((dim * dim, n))
        const = np.zeros(dim * dim)
        for i, j, expr in block["entries"]:
            row, c = affine_parts(expr, n)
            for p, q in {(i, j), (j, i)}:
                coef[p * dim + q] = row
                const[p * dim + q] = c
        mat = cp.reshape(coef @ x + const, (dim, dim), order="C")
        constraints.append((mat + mat.T) / 2 >> 0)

    obj_row, obj_const = affine_parts(prog["objective"], n)
    problem = cp.Problem(cp.Minimize(obj_row @ x + obj_const), constraints)
    opts = {"kktsolver": "robust"} if args.solver == "CVXOPT" else {}
    problem.solve(solver=args.solver, **opts)
    print(json.dumps({"status": problem.status, "objective": problem.value, "solver": args.solver}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
