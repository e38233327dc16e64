import os

os.environ.setdefault("SHOW_PROGRESS", "false")

import numpy as np
import pytest

from models import PatchMeta, PatchSample, PhantomConfig
from nn.tensor import Tensor, mul, sum_

@pytest.fixture
def rng():
    return np.random.default_rng(1234)

@pytest.fixture
def weighted_sum(rng):
    """Fabrique f(x) = sum(w * op(x)) avec w aléatoire fixé, pour les vérifications de gradient"""

    def make(op, out_shape):
        w = Tensor(rng.standard_normal(out_shape))
        return lambda x: sum_(mul(op(x), w))

    return make

@pytest.fixture
def small_phantom_config():
    return PhantomConfig(dims=(2, 256, 256), electrode_thickness=32, dendrite_count=4,
                         max_steps=30, noise_sigma=0.0, porosity=0.0, seed=7)

def make_patch(image: np.ndarray, mask: np.ndarray, y: int = 0, x: int = 0, volume_id: str = "test") -> PatchSample:
    return PatchSample(image=image.astype(np.float32), mask=mask.astype(np.uint8),
                       meta=PatchMeta(volume_id=volume_id, slice_index=0, y=y, x=x))

@pytest.fixture
def disk_patches():
    """Huit patches 128x128 avec un disque clair sur fond sombre"""
    samples = []
    yy, xx = np.mgrid[:128, :128]
    for i in range(8):
        cy, cx, r = 40 + 6 * i, 50 + 4 * i, 12 + i
        mask = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.uint8)
        image = np.where(mask, 0.8, 0.2).astype(np.float32)
        samples.append(make_patch(image, mask, volume_id=f"disk-{i}"))
    return samples
