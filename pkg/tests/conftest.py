import numpy as np
import pytest

from ratingspace.ingest import from_triples


def random_dataset(rng, n_items, n_users, density=0.6, scale=(1.0, 5.0), integer=True):
    """Random partially observed ratings; every item and user keeps one rating."""
    mask = rng.random((n_items, n_users)) < density
    mask[np.arange(n_items), rng.integers(0, n_users, n_items)] = True
    mask[rng.integers(0, n_items, n_users), np.arange(n_users)] = True
    ii, uu = np.nonzero(mask)
    if integer:
        vals = rng.integers(int(scale[0]), int(scale[1]) + 1, len(ii)).astype(float)
    else:
        vals = rng.uniform(scale[0], scale[1], len(ii))
    return from_triples(ii, uu, vals, scale=scale)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
