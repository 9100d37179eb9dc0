"""Compare policies across fetch and power weights with exact evaluation.

Reads configs/weights_uniform.json (or a path given on the command line)
and prints each policy's average cost components per grid point.

    python3 demos/weight_sweep.py [config.json]
"""

import json
import sys
from pathlib import Path

from cachecast.cli import ExperimentSpec, run_experiment

DEFAULT = Path(__file__).resolve().parent.parent / "configs" / "weights_uniform.json"


def main(path=DEFAULT):
    spec = ExperimentSpec.from_raw(json.loads(Path(path).read_text()))
    rows, _ = run_experiment(spec)
    print(f"{'w_f':>4} {'w_p':>4} {'policy':>8} {'delay':>8} {'power':>8} {'fetch':>8} "
          f"{'total':>8}")
    for r in rows:
        print(f"{r['weight_fetch']:>4} {r['weight_power']:>4} {r['policy']:>8} "
              f"{r['delay']:8.3f} {r['power']:8.3f} {r['fetch']:8.3f} {r['total']:8.3f}")


if __name__ == "__main__":
    main(*sys.argv[1:2])
