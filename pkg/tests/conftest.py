import numpy as np
import pytest

from slmil.connectome import Parcellation, RoiTimeSeries, build_brain_graph
from slmil.gctrans import GctransConfig
from slmil.milhead import MilConfig
from slmil.synth import SynthConfig, generate_cohort
from slmil.training import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_parc():
    # 7 subnets with sizes 1..3, ROIs interleaved so instance node ids are not contiguous
    assignment = np.array([0, 1, 2, 3, 4, 5, 6, 0, 2, 4, 6, 1, 3])
    return Parcellation(assignment)


@pytest.fixture
def small_gcfg():
    return GctransConfig(layers=2, d_model=8, heads=2, ff_width=8, shorten=2)


@pytest.fixture
def small_mcfg():
    return MilConfig(hidden=4)


@pytest.fixture
def tiny_cohort():
    cfg = SynthConfig(subjects_per_class=6, scans_per_subject=2, n_time=16, rois_per_subnet=2,
                      seed=3)
    return generate_cohort(cfg)


@pytest.fixture
def tiny_graphs(tiny_cohort):
    scans, parc = tiny_cohort
    return [build_brain_graph(s, parc) for s in scans]


@pytest.fixture
def fast_tcfg():
    return TrainConfig(learning_rate=3e-3, epochs=2, batch_size=4, splits=2, patience=2)


def random_series(rng, n, t, scan_id="s0", subject_id="p0", label=0):
    return RoiTimeSeries(scan_id, subject_id, label, rng.standard_normal((n, t)))
