import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from protocol import ProtocolConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """
    Four classes in two phases with short training, for fast end-to-end runs
    """
    return ProtocolConfig(
        num_classes=4,
        classes_per_phase=2,
        nodes_per_class=12,
        test_nodes_per_class=8,
        d_v=8,
        d_t=6,
        gnn_hidden=8,
        gnn_epochs=5,
        plan_refresh=5,
        fan_width=16,
        fan_layers=2,
        fan_epochs=10,
        comp_width=16,
        comp_epochs=5,
        naive_epochs=20,
        ot_max_outer=5,
        ot_max_sinkhorn=200,
    )
