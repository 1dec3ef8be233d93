import math

import numpy as np
import pytest

from visanchor.tensorio import ImageEntry, InstanceBundle, save_instance


def block_tokens(U=4, V=4, block=3, D=16):
    """Tokens whose caption response is 1 on a block x block corner, 0 elsewhere."""
    e1, e2 = np.zeros(D), np.zeros(D)
    e1[0], e2[1] = 1.0, 1.0
    grid = np.tile(e2, (V, U, 1))
    grid[:block, :block] = e1
    return grid.reshape(U * V, D).astype(np.float32), e1[None, :].astype(np.float32)


def block_bundle(n_blank=0, D=16, logits=False):
    tokens, caption = block_tokens(D=D)
    images = [ImageEntry(4, 4, tokens, caption)]
    images += [ImageEntry(4, 4, np.zeros((16, D), np.float32), None) for _ in range(n_blank)]
    question = np.ones((3, D), np.float32)
    lg = lc = None
    if logits:
        lg = np.log(np.array([[0.6, 0.4], [0.9, 0.1]], dtype=np.float64)).astype(np.float32)
        lc = np.log(np.array([[0.2, 0.8], [0.3, 0.7]], dtype=np.float64)).astype(np.float32)
    return InstanceBundle(tuple(images), question, lg, lc).validate()


@pytest.fixture
def block_dir(tmp_path):
    return save_instance(block_bundle(), tmp_path / "block")


@pytest.fixture
def two_image_dir(tmp_path):
    return save_instance(block_bundle(n_blank=1), tmp_path / "two")


@pytest.fixture
def decode_dir(tmp_path):
    return save_instance(block_bundle(n_blank=1, logits=True), tmp_path / "decode")
