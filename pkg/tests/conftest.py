import numpy as np
import pytest

from gapfill.service import schemas as S
from gapfill.service.core import train as core_train
from gapfill.synthetic import sinusoid_series
from gapfill.workflows import write_csv_matrix

TINY_TRAIN_CONFIG = """
# tiny smoke model
data = {csv}
window_length = 24
patch_length = 6
stride = 4
layers = 1
heads = 2
width = 8
max_seq = 8
dropout = 0.0
epochs = 2
batch_size = 8
lr = 0.003
alpha = 0.0
patience = 5
seed = 1
split_seed = 0
"""


@pytest.fixture(scope="session")
def tiny_workspace(tmp_path_factory):
    """A small corpus CSV, a train config, and a trained checkpoint."""
    root = tmp_path_factory.mktemp("tiny")
    series = sinusoid_series(n_variables=6, n_points=72, period_range=(8, 16),
                             noise=0.01, seed=3, domain="sine")
    mask = np.ones_like(series.values)
    mask[5, 1] = 0  # one natively missing cell
    csv_path = root / "corpus.csv"
    write_csv_matrix(csv_path, series.values, series.variables, mask=mask)

    cfg_path = root / "train.cfg"
    cfg_path.write_text(TINY_TRAIN_CONFIG.format(csv=csv_path))

    ckpt = root / "model.ckpt"
    core_train(S.TrainRequest(out=str(ckpt), config_path=str(cfg_path)))
    return {"root": root, "csv": csv_path, "config": cfg_path, "ckpt": ckpt}
