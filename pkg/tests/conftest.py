"""
Shared fixtures: small deterministic joint datasets and model documents
"""

import copy
import logging
from typing import Any, Dict

import numpy as np
import pandas as pd
import pytest

from src.services.assembly import assemble
from src.services.inference import fit
from src.services.model_spec import parse_config
from src.services.oracle import SimScenario, simulate_joint

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def make_joint_data(n_subjects: int = 12, seed: int = 3):
    """Gaussian marker with a random intercept and an exponential event time per subject"""
    rng = np.random.default_rng(seed)
    long_rows, surv_rows = [], []
    for i in range(1, n_subjects + 1):
        x = float(i % 2)
        b = rng.normal(0.0, 0.7)
        stime = float(rng.exponential(4.0)) + 0.2
        event = int(stime < 5.0)
        stime = min(stime, 5.0)
        for t in (0.0, 1.0, 2.0, 3.0):
            if t > stime:
                break
            y = 1.0 + 0.3 * t - 0.5 * x + b + rng.normal(0.0, 0.4)
            long_rows.append({"id": i, "time": t, "y": y, "x": x})
        surv_rows.append({"id": i, "stime": stime, "event": event, "x": x})
    return pd.DataFrame(long_rows), pd.DataFrame(surv_rows)


LMM_DOC: Dict[str, Any] = {
    "id_column": "id",
    "time_column": "time",
    "longitudinal": [{"response": "y", "family": "gaussian", "fixed": ["1", "time", "x"], "random": ["1"]}],
}

JOINT_DOC: Dict[str, Any] = {
    "id_column": "id",
    "time_column": "time",
    "longitudinal": [{"response": "y", "family": "gaussian", "fixed": ["1", "time", "x"], "random": ["1"]}],
    "survival": [{"exit_time": "stime", "event": "event", "fixed": ["x"], "baseline": "rw1", "n_intervals": 5}],
    "assoc": [["CV"]],
}

SURV_DOC: Dict[str, Any] = {
    "id_column": "id",
    "time_column": "time",
    "survival": [{"exit_time": "stime", "event": "event", "fixed": ["x"], "baseline": "exponential"}],
}


@pytest.fixture
def joint_data():
    """(longitudinal, survival) tables of 12 subjects"""
    return make_joint_data()


@pytest.fixture
def lmm_doc():
    return copy.deepcopy(LMM_DOC)


@pytest.fixture
def joint_doc():
    return copy.deepcopy(JOINT_DOC)


@pytest.fixture
def surv_doc():
    return copy.deepcopy(SURV_DOC)


@pytest.fixture
def lmm_spec(joint_data, lmm_doc):
    long_data, _ = joint_data
    return parse_config(lmm_doc, long_data)


@pytest.fixture
def joint_spec(joint_data, joint_doc):
    long_data, surv_data = joint_data
    return parse_config(joint_doc, long_data, surv_data)


@pytest.fixture
def surv_spec(joint_data, surv_doc):
    _, surv_data = joint_data
    return parse_config(surv_doc, None, surv_data)


# ==================== Fitted models (session scope) ====================

SIM_SCENARIO: Dict[str, Any] = {
    "n_subjects": 80,
    "beta": (1.0, 0.3, -0.5),
    "sigma_eps": 0.5,
    "re_cov": [[0.5]],
    "baseline": "exponential",
    "rate": 0.1,
    "gamma": 0.3,
    "phi": 0.4,
    "association": "CV",
    "visits": (0.0, 1.0, 2.0, 3.0, 4.0),
    "max_follow_up": 6.0,
    "censoring_rate": 0.05,
    "seed": 11,
}


def rw_document() -> Dict[str, Any]:
    """Scenario model document with an RW1 baseline over 8 intervals"""
    doc = SimScenario(**SIM_SCENARIO).model_document()
    doc["survival"][0].update(baseline="rw1", n_intervals=8)
    return doc


@pytest.fixture(scope="session")
def sim_data():
    """(longitudinal, survival) tables simulated from SIM_SCENARIO"""
    return simulate_joint(SimScenario(**SIM_SCENARIO))


@pytest.fixture(scope="session")
def rw_model(sim_data):
    """Joint model with a gaussian marker, RW1 baseline and current-value association"""
    return assemble(parse_config(rw_document(), *sim_data))


@pytest.fixture(scope="session")
def rw_fit(rw_model):
    return fit(rw_model, threads=1)


@pytest.fixture(scope="session")
def weibull_fit(sim_data):
    """Survival-only Weibull fit"""
    doc = {
        "id_column": "id", "time_column": "time",
        "survival": [{"exit_time": "stime", "event": "event", "fixed": ["x"], "baseline": "weibull"}],
    }
    model = assemble(parse_config(doc, None, sim_data[1]))
    return fit(model, threads=1)
