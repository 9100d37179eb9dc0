"""Solve a two-content instance and draw its optimal policy as a grid.

Each cell is the content scheduled at (Q1, Q2); the boundary between the
1s and 2s is the switch curve of content 2.  Also shows how many full
minimizations the structured solver skipped.

    python3 demos/switch_curves.py
"""

import numpy as np

from cachecast import SystemConfig, extract_switch_curves, per_user_zipf_arrivals, solve
from cachecast.approx import BasePolicy, ssa


def draw(policy, config):
    n1, n2 = config.caps
    grid = np.asarray(policy).reshape(n1 + 1, n2 + 1)
    print("      Q2 " + " ".join(f"{q:>2}" for q in range(n2 + 1)))
    for q1 in range(n1, -1, -1):
        print(f"Q1 {q1:>2}    " + " ".join(f"{a:>2}" for a in grid[q1]))


def main():
    config = SystemConfig.uniform((10, 10), cached={1}, fetch_base=3.0, power=2.0,
                                  num_users=2)
    arrivals = per_user_zipf_arrivals(config, 0.75)

    plain = solve(config, arrivals, "rvia")
    fast = solve(config, arrivals, "srvia")
    print(f"optimal average cost {fast.average_cost:.6f} "
          f"({fast.iterations} iterations, {fast.skip_fraction:.1%} of updates skipped)")
    assert np.array_equal(plain.policy, fast.policy)
    draw(fast.policy, config)

    _, curve = extract_switch_curves(fast.policy, config)
    print("switch curve of content 2 (least Q2 that schedules it, per Q1):")
    print("  ", curve.sentinel().tolist())

    approx = ssa(config, arrivals, BasePolicy.zipf(2, 0.75))
    agree = np.mean(approx.policy == fast.policy)
    print(f"\nthe decomposition-based policy agrees with the optimum on {agree:.1%} of states")
    draw(approx.policy, config)


if __name__ == "__main__":
    main()
