import numpy as np
import pytest

from recurforge.feature_store import FeatureMatrix, normalize
from recurforge.synthetic import planted_groups, records_for


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    """Print one PASS/FAIL line per acceptance criterion."""
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker and report.when == "call":
        status = "PASS" if report.passed else "FAIL"
        print(f"\nACCEPTANCE [{marker.args[0]}]: {status}")


@pytest.fixture(scope="session")
def small_random_matrix() -> FeatureMatrix:
    rng = np.random.default_rng(11)
    rows = rng.standard_normal((200, 16)).astype(np.float32)
    return normalize(FeatureMatrix(rows))


@pytest.fixture(scope="session")
def planted_corpus():
    """30 groups of 4 with within-group cosine ~0.95 (inside the band)."""
    matrix, group_of = planted_groups(30, 4, dim=64, pair_sim=0.95, seed=3)
    records = records_for(matrix, group_of, seed=3)
    return matrix, records, group_of


@pytest.fixture(scope="session")
def mixed_band_corpus():
    """Groups planted inside, above, and below the retained band.

    12 groups at 0.95 (in band), 4 at 0.99 (near-duplicates), 4 at 0.85
    (below): designed ge3 share is 60%.
    """
    sims = [0.95] * 12 + [0.99] * 4 + [0.85] * 4
    matrix, group_of = planted_groups(20, 4, dim=64, pair_sim=sims, seed=5)
    records = records_for(matrix, group_of, seed=5)
    return matrix, records, group_of, sims
