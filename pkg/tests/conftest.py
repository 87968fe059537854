"""Shared session fixtures: datasets and trained models are expensive, so
they are built once and reused across test modules."""

import time

import numpy as np
import pytest

from synthclone import dataset as dsmod
from synthclone import experiments as ex
from synthclone import neural as nn


@pytest.fixture(scope="session")
def ds1_g4_timed():
    t0 = time.time()
    ds = dsmod.build_bowed1(grid_step=4)
    return ds, time.time() - t0


@pytest.fixture(scope="session")
def ds1_g4(ds1_g4_timed):
    return ds1_g4_timed[0]


@pytest.fixture(scope="session")
def ds1_g2():
    return dsmod.build_bowed1(grid_step=2)


@pytest.fixture(scope="session")
def ds2():
    return dsmod.build_bowed2(5000, seed=3)


@pytest.fixture(scope="session")
def ds2_half(ds2):
    return dsmod.filter_half(ds2)


@pytest.fixture(scope="session")
def trained_d1_g4_timed(ds1_g4):
    cond = ex.parse_label("D1_Z2_Y")
    cfg = ex.TrainConfig(seed=7)
    t0 = time.time()
    result = ex.train(cond, ds1_g4, cfg)
    return result, time.time() - t0


@pytest.fixture(scope="session")
def trained_d1_g4(trained_d1_g4_timed):
    return trained_d1_g4_timed[0]


@pytest.fixture(scope="session")
def tiny_ckpt(tmp_path_factory):
    """Small random encoder/decoder checkpoint for synth and service tests."""
    rng = np.random.default_rng(0)
    L = 200
    enc = nn.init_mlp(L, 20, 3, rng)
    dec = nn.init_mlp(3, 20, L, rng)
    stats = dsmod.NormStats(
        mean=np.zeros(L), std=np.ones(L),
        param_lo=np.array([0.0, 0.0]), param_hi=np.array([128.0, 128.0]))
    path = tmp_path_factory.mktemp("ckpt") / "tiny.ckpt"
    nn.save_checkpoint(str(path), {"encoder": enc, "decoder": dec}, stats,
                       meta={"n_latent": 1, "m_cond": 2},
                       reference=np.zeros(L + 1))
    return str(path)


@pytest.fixture(scope="session")
def small_ds_file(tmp_path_factory):
    """Tiny saved dataset for CLI round trips."""
    ds = dsmod.build_bowed2(60, seed=1)
    path = tmp_path_factory.mktemp("data") / "small.sfd"
    dsmod.save(ds, str(path))
    return str(path)
