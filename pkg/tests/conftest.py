from __future__ import annotations

import numpy as np
import pytest

from pmelm.model import fit_ml
from pmelm.simulate import ContaminationSpec, GenSpec, contaminate, generate


@pytest.fixture(scope="session")
def clean_panel():
    return generate(GenSpec(sigma1=0.5, seed=11))


@pytest.fixture(scope="session")
def clean_fit(clean_panel):
    return fit_ml(clean_panel)


@pytest.fixture(scope="session")
def method4_panel(clean_panel):
    return contaminate(clean_panel, ContaminationSpec(4))


@pytest.fixture(scope="session")
def method4_fit(method4_panel):
    return fit_ml(method4_panel)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
