import numpy as np
import pytest
import torch

from ptasyn import data, nets

# the first Adam construction lazily imports torch._dynamo; do it here so
# per-test timings stay honest
torch.optim.Adam([torch.zeros(1, requires_grad=True)], lr=1.0)


@pytest.fixture(scope="session")
def tiny_phantom_cfg():
    return data.PhantomConfig(num_volumes=3, slices_per_volume=6, seed=11)


@pytest.fixture(scope="session")
def tiny_pair(tiny_phantom_cfg):
    hf, lf, pairing = data.build_phantom_pair(tiny_phantom_cfg)
    return hf, lf, pairing


@pytest.fixture(scope="session")
def small_net_cfg():
    return nets.NetworkConfig(base_channels=8, depth=2, embed_dim=16, seed=7)


def random_slice(rng, size=16, tag=data.RANGE_UNIT, volume_id="volX", index=0):
    lo, hi = (0.0, 1.0) if tag == data.RANGE_UNIT else (-1.0, 1.0)
    return data.make_slice(
        rng.uniform(lo, hi, size=(size, size)), tag, "T1", volume_id, index
    )
