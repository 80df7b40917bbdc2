"""Compare the Riccati value of the systemic-risk model with Monte-Carlo returns.

    python3 demos/riccati_vs_monte_carlo.py [--paths 2000] [--dt 0.01]

The Monte-Carlo estimate is a left Riemann sum on a finite horizon, so it
differs from the Riccati value by roughly ``dt/2`` times the initial reward.
The starting points off the lines ``s = mbar`` and ``mbar = 0`` show the
representative agent's cross term, which the Riccati quadratic leaves out.
"""

import argparse

import numpy as np

from mfac import InitialCondition, estimate_value, load_experiment, optimal_policy, solve_riccati
from mfac.config import shipped_config
from mfac.measures import EmpiricalMeasure
from mfac.riccati import optimal_value


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--paths", type=int, default=2000)
    parser.add_argument("--dt", type=float, default=0.01)
    parser.add_argument("--horizon", type=float, default=10.0)
    args = parser.parse_args()

    model = load_experiment(shipped_config("sysrisk")).model
    sol = solve_riccati(model)
    policy = optimal_policy(sol, model)
    print(f"K = {sol.K[0, 0]:.7f}  Lambda = {sol.Lambda[0, 0]:.7f}  R = {sol.R:.7f}")
    print(f"optimal gains: {policy.weights.ravel()}")

    print(f"{'s0':>6} {'mbar0':>6} {'Riccati V':>12} {'MC mean':>12} {'MC s.e.':>9}")
    for s0, m0 in [(0.0, 0.0), (1.0, 1.0), (2.0, -1.0), (-1.0, 0.5)]:
        exact = float(optimal_value(sol, model, np.array([s0]), EmpiricalMeasure(np.array([[m0]]))))
        init = InitialCondition([s0], [[0.0]], [m0])
        est = estimate_value(model, policy, init, args.horizon, args.dt, args.paths, seed=1)
        print(f"{s0:6.2f} {m0:6.2f} {exact:12.5f} {est.value:12.5f} {est.std_err:9.5f}")


if __name__ == "__main__":
    main()
