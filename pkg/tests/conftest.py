import numpy as np
import pytest

from schyena.data import SyntheticSpec, generate_synthetic, preprocess
from schyena.model import ModelConfig, ModelParams


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_model(n_genes=8, width=4, n_blocks=2, order=2, n_classes=3, seed=0):
    config = ModelConfig(n_genes=n_genes, width=width, n_blocks=n_blocks, order=order,
                         filter_hidden=8, filter_freqs=4, n_classes=n_classes)
    return ModelParams.init(config, seed=seed)


def small_corpus(n_cells=30, n_genes=32, n_types=2, seed=0, **kw):
    spec = SyntheticSpec(n_cells=n_cells, n_genes=n_genes, n_types=n_types,
                         program_size=kw.pop("program_size", 6),
                         baseline_rate=kw.pop("baseline_rate", 8.0),
                         boost=kw.pop("boost", 20.0),
                         dropout=kw.pop("dropout", 0.2), seed=seed, **kw)
    return preprocess(generate_synthetic(spec))


def centroid_accuracy(train, test):
    """Nearest-centroid baseline on dense log-normalized rows."""
    classes = sorted(set(train.labels))
    centroids = {}
    for c in classes:
        members = [train.row_dense(i) for i in range(train.n_cells) if train.labels[i] == c]
        centroids[c] = np.mean(members, axis=0)
    correct = 0
    for i in range(test.n_cells):
        x = test.row_dense(i)
        pred = min(classes, key=lambda c: float(np.linalg.norm(x - centroids[c])))
        correct += pred == test.labels[i]
    return correct / test.n_cells
