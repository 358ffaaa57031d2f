"""Regenerate the shipped stochastic volatility observations.

Parameters and noise are drawn from the model priors with a fixed seed, so
running this script reproduces src/kickkac/data/sv_observations.csv exactly.
"""

import sys
from pathlib import Path

import numpy as np

from kickkac.targets import simulate_sv_observations

SEED = 20240611
N_OBS = 100


def main(out: Path) -> None:
    y = simulate_sv_observations(N_OBS, np.random.default_rng(SEED))
    out.write_text("y\n" + "".join(f"{v!r}\n" for v in y.tolist()))


if __name__ == "__main__":
    default = Path(__file__).resolve().parents[1] / "src/kickkac/data/sv_observations.csv"
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else default)
