import math

import numpy as np
import pytest
from scipy.special import expit

from betamrf.calibration import beta_pdf

from betamrf.rnd import strike_from_delta

CRITERIA: dict[int, tuple[bool, str]] = {}

SMILE_DATES = ("2021-03-01", "2021-03-02", "2021-03-03")
SMILE_TENORS = (0.25, 0.5, 1.0)
SMILE_DELTAS = (0.9, 0.75, 0.5, 0.25, 0.1)


@pytest.fixture
def criterion():
    """Record one acceptance-criterion outcome for the end-of-run summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        CRITERIA[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        passed, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'} {detail}")


def write_smile_fixture(directory, flat: bool = False, bad_vol_row: int | None = None):
    """3 dates x 3 tenors of smiles plus realised levels; returns (smile_csv, realized_csv)."""
    smile = directory / "smiles.csv"
    realized = directory / "realized.csv"
    lines = ["date,tenor_years,spot,forward,rate,delta,sigma"]
    levels = ["date,tenor_years,level"]
    for i, date in enumerate(SMILE_DATES):
        spot, rate = 100.0 + i, 0.02
        for tau in SMILE_TENORS:
            fwd = spot * math.exp(rate * tau)
            for d in SMILE_DELTAS:
                vol = 0.15 if flat else 0.15 + 0.06 * (d - 0.5) + 0.04 * (d - 0.5) ** 2
                lines.append(f"{date},{tau},{spot},{fwd!r},{rate},{d},{vol!r}")
            # a level inside the curve's bulk
            level = strike_from_delta(fwd, 0.5 - 0.1 * (i - 1), 0.15, tau)
            levels.append(f"{date},{tau},{level!r}")
    if bad_vol_row is not None:
        parts = lines[bad_vol_row].split(",")
        parts[-1] = "-0.15"
        lines[bad_vol_row] = ",".join(parts)
    smile.write_text("\n".join(lines) + "\n")
    realized.write_text("\n".join(levels) + "\n")
    return smile, realized


def proximity_oracle(theta, x0, n=64):
    """Midpoint-grid marginal CDFs of the four free PITs of a T = 3, M = 2, p = 1 field.

    The field density is the product of its four local factors; the
    4-d grid is contracted directly.
    """
    u = (np.arange(n) + 0.5) / n
    a0, a1 = theta.alpha_coeffs(0), theta.alpha_coeffs(1)
    b01, b10 = theta.beta_coeffs(0)[1], theta.beta_coeffs(1)[0]
    g0, g1 = theta.gamma(0), theta.gamma(1)

    def factor(y, eta, g):
        mu = expit(eta)
        return beta_pdf(y, mu * g, (1 - mu) * g)

    # axes: (y10, y11, y20, y21)
    Y10, Y11, Y20, Y21 = np.meshgrid(u, u, u, u, indexing="ij", sparse=True)
    dens = (
        factor(Y10, a0[0] + a0[1] * x0[0] + b01 * Y11, g0)
        * factor(Y11, a1[0] + a1[1] * x0[1] + b10 * Y10, g1)
        * factor(Y20, a0[0] + a0[1] * Y10 + b01 * Y21, g0)
        * factor(Y21, a1[0] + a1[1] * Y11 + b10 * Y20, g1)
    )
    dens /= dens.sum()
    cdfs = []
    for axis in range(4):
        others = tuple(a for a in range(4) if a != axis)
        cdfs.append(np.cumsum(dens.sum(axis=others)))
    edges = np.arange(1, n + 1) / n
    return edges, cdfs
