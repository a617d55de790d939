import numpy as np
import pytest

from avagen.model import ArchSpec, AvatarModel, new_model
from avagen.skeleton import humanoid6


@pytest.fixture(scope="session")
def mini_arch():
    return ArchSpec(
        n_b=6,
        l_shape=4,
        l_detail=3,
        l_f=4,
        vol_res=6,
        gen_hidden=(8,),
        occ_hidden=(8, 8),
        normal_hidden=(8, 8),
        skin_hidden=(8, 8),
        warp_hidden=(8, 8),
    )


@pytest.fixture()
def mini_model(mini_arch):
    return new_model(mini_arch, humanoid6(), seed=42)


@pytest.fixture()
def fresh_model(mini_arch):
    """Zero-headed model straight out of initialization."""
    return new_model(mini_arch, humanoid6(), seed=7)
