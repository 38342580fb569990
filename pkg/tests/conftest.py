import numpy as np
import pytest
import torch

from stars.data import (
    DatasetManifest,
    SyntheticSceneConfig,
    generate_synthetic_dataset,
    write_raster,
)

torch.set_num_threads(1)

# Criterion verdict lines recorded by tests/test_acceptance.py; replayed
# after the run summary so they stay visible under output capture.
CRITERION_LINES = []


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory) -> DatasetManifest:
    """24 synthetic 64x64 records shared by every test that needs real files."""

    root = tmp_path_factory.mktemp("dataset")
    cfg = SyntheticSceneConfig(seed=5)
    return generate_synthetic_dataset(cfg, 24, root)


@pytest.fixture(scope="session")
def coord_dataset(tmp_path_factory) -> DatasetManifest:
    """Two handmade 64x64 records whose pixel values encode coordinates.

    Lets tests verify that crops stay aligned across both modalities and
    the label without relying on the generator.
    """

    root = tmp_path_factory.mktemp("coords")
    manifest = DatasetManifest(root=root, num_classes=4)
    yy, xx = np.mgrid[0:64, 0:64].astype(np.float32)
    for i in range(2):
        rec_id = f"coord{i}"
        m1 = ((yy * 64 + xx + i) / 8192.0)[:, :, None].astype(np.float32)
        m2 = np.stack([yy / 64.0, xx / 64.0, np.full_like(yy, i)], axis=2) / 2.0
        label = ((yy.astype(np.int64) // 16 + xx.astype(np.int64) // 16 + i) % 4).astype(np.uint8)
        write_raster(manifest.m1_path(rec_id), m1)
        write_raster(manifest.m2_path(rec_id), m2.astype(np.float32))
        write_raster(manifest.label_path(rec_id), label)
        manifest.ids.append(rec_id)
    manifest.save()
    return manifest
