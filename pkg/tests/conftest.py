"""Shared fixtures: a real handwritten-digit corpus in IDX format, trained models.

The corpus is sklearn's bundled 8x8 digits smoothly interpolated up to 28x28,
written through our own IDX writer and read back through the package loader,
so the full file path is exercised. Cubic interpolation, not pixel
replication: replicated blocks make most 3x3 patches constant, which starves
the dot-product matcher (every constant patch ranks the prototypes
identically), while interpolated strokes have antialiased edges like real
handwriting scans.
"""

import numpy as np
import pytest
from scipy import ndimage

from pecan.dataio import load_digit_corpus, save_idx_images, save_idx_labels
from pecan.lut import Model
from pecan.network import lenet
from pecan.train import TrainConfig, train


def _upsampled_digits():
    from sklearn.datasets import load_digits

    dig = load_digits()
    imgs = np.stack([np.clip(ndimage.zoom(im / 16.0, 3.5, order=3), 0.0, 1.0) for im in dig.images])
    return np.round(imgs * 255).astype(np.uint8), dig.target.astype(np.uint8)


@pytest.fixture(scope="session")
def digits_dir(tmp_path_factory):
    """Directory holding the four IDX files of the digit corpus."""
    root = tmp_path_factory.mktemp("digits")
    imgs, labels = _upsampled_digits()
    test_mask = np.arange(len(labels)) % 5 == 4  # every fifth sample held out
    save_idx_images(root / "train-images-idx3-ubyte", imgs[~test_mask])
    save_idx_labels(root / "train-labels-idx1-ubyte", labels[~test_mask])
    save_idx_images(root / "t10k-images-idx3-ubyte", imgs[test_mask])
    save_idx_labels(root / "t10k-labels-idx1-ubyte", labels[test_mask])
    return root


@pytest.fixture(scope="session")
def digits(digits_dir):
    """(train_x, train_y, test_x, test_y) loaded back through the IDX reader."""
    return load_digit_corpus(digits_dir)


@pytest.fixture(scope="session")
def digits_small(digits):
    """A 512-image training subset (full test split) for quick training runs."""
    train_x, train_y, test_x, test_y = digits
    return train_x[:512], train_y[:512], test_x, test_y


@pytest.fixture(scope="session")
def baseline_digits(digits_small):
    """A dense net trained from scratch on the digit subset."""
    train_x, train_y, test_x, test_y = digits_small
    spec = lenet("baseline")
    cfg = TrainConfig(epochs=25, batch_size=64, lr=0.01, lr_decay_every=15,
                      strategy="from_scratch", seed=0)
    return train(spec, train_x, train_y, test_x, test_y, cfg)


@pytest.fixture(scope="session")
def pecan_d_digits(digits_small, baseline_digits):
    """pecan_d fine-tuned from the frozen baseline weights."""
    train_x, train_y, test_x, test_y = digits_small
    spec = lenet("pecan_d")
    init = Model(spec, baseline_digits.model.params, {})
    cfg = TrainConfig(epochs=8, batch_size=64, lr=0.01, lr_decay_every=50,
                      strategy="freeze_weights", seed=0, calib_images=128)
    return train(spec, train_x, train_y, test_x, test_y, cfg, init_model=init)


@pytest.fixture(scope="session")
def pecan_a_conv2_digits(digits_small, baseline_digits):
    """pecan_a substituted on conv2 only, fine-tuned from the frozen baseline.

    Swapping a single layer keeps the corpus learnable: each attention blend
    is lossy, and stacking all five substitutions on a corpus this small
    multiplies the reconstruction errors until the logits stop depending on
    the input. One layer shows the attention path training properly.
    """
    from pecan.config import parse_config

    train_x, train_y, test_x, test_y = digits_small
    _, spec = parse_config("conv2.method=pecan_a\n")
    init = Model(spec, baseline_digits.model.params, {})
    cfg = TrainConfig(epochs=8, batch_size=64, lr=0.01, lr_decay_every=50,
                      strategy="freeze_weights", seed=0, calib_images=128)
    return train(spec, train_x, train_y, test_x, test_y, cfg, init_model=init)
