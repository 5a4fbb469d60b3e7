import numpy as np
import pytest

from qbae.imaging import ImageTensor


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def random_rgb(rng):
    def make(h=64, w=64, c=3):
        data = rng.random((c, h, w), dtype=np.float32)
        return ImageTensor(data, colorspace="gray" if c == 1 else "rgb", normalized=False)

    return make


@pytest.fixture(scope="session")
def toy_spec():
    from qbae.encoder import BackboneSpec

    return BackboneSpec(
        depth=4, width=64, heads=4, patch_size=8, special_tokens=1, tap_layers=(1, 3), pos_grid=8
    )


@pytest.fixture(scope="session")
def toy_backbone(toy_spec):
    from qbae.encoder import make_toy_backbone

    return make_toy_backbone(42, toy_spec)
