"""Regenerate the synthetic choice datasets bundled with the package."""
from pathlib import Path

import numpy as np

from matchlab.choice import BASE_COVARIATES, LogitParams, simulate_choice_data
from matchlab.market import RngStream

OUT = Path(__file__).resolve().parents[1] / "src" / "matchlab" / "data"
SEED = 20240611
N_STUDENTS = 1000
N_PROGRAMS = 8

TRUTH = LogitParams(
    beta=np.array([0.6, 0.35, -0.008, 4e-6, 0.4]),
    theta=np.array([0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.0]),
    covariates=BASE_COVARIATES,
    programs=tuple(range(1, N_PROGRAMS + 1)),
)


def main():
    for tag, mode in ((1, "acceptance"), (2, "ranked")):
        data = simulate_choice_data(N_STUDENTS, N_PROGRAMS, TRUTH, RngStream(SEED, (tag,)), mode=mode, feasible_share=0.7)
        data.write_csv(OUT / f"synthetic_{mode}.csv")
    with open(OUT / "synthetic_truth.csv", "w", encoding="utf-8") as fh:
        fh.write("name,value\n")
        for name, v in zip(TRUTH.names, TRUTH.vector):
            fh.write(f"{name},{float(v)!r}\n")


if __name__ == "__main__":
    main()
