import numpy as np
import pytest
import torch

from canopysr.datamodel import GeoInfo, ReferenceRaster, SITSPatch
from canopysr.model import ModelConfig

torch.set_num_threads(1)


def make_patch(rng, t=6, h=16, w=16, year=2022, geo=None):
    dates = np.sort(rng.choice(np.arange(121, 305), size=t, replace=False)).astype(np.int64)
    return SITSPatch(
        bands=rng.uniform(0, 0.5, (t, 10, h, w)).astype(np.float32),
        cloud=rng.uniform(size=(t, h, w)) < 0.1,
        angles=rng.uniform(0, 2 * np.pi, (t, 4)),
        dates=dates,
        geo=geo or GeoInfo(500000.0, 6500000.0, 10.0, "EPSG:2154"),
        year=year,
    )


def make_reference(rng, h, w, resolution=2.5, geo=None, lidar_date=180):
    heights = rng.uniform(0, 30, (h, w))
    heights[heights < 1.5] = 0.0
    return ReferenceRaster(heights, heights >= 1.5, lidar_date, resolution, geo, 2022)


def tiny_model_config(resolution=2.5, **kw):
    base = dict(n_blocks=1, layers_per_block=2, growth=8, feat_dim=16, heads=4, head_dim=4,
                fused_dim=16, mlp_layers=(16, 16, 16))
    base.update(kw)
    return ModelConfig.for_resolution(resolution, **base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
