"""Shared fixtures: one small synthetic dataset reused across the suite."""

import numpy as np
import pytest
import torch

from fss.datamodel import ClassCatalog, LabelMask, SegSample
from fss.datasets import SubsetAdapter, SyntheticBlobConfig, split_fixed, synth_blobs
from fss.sampler import make_task

# tiny matmuls are faster single-threaded and reductions become
# bitwise-reproducible run to run
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def blob_splits():
    ds = synth_blobs(SyntheticBlobConfig())
    return split_fixed(ds, 0.5, 0)


@pytest.fixture(scope="session")
def task1(blob_splits):
    """1-shot task on the default blob dataset, full val split as query."""
    train, val = blob_splits
    task, _ = make_task(train, 1, 0, query_source=val)
    return task


@pytest.fixture(scope="session")
def task1_small_query(blob_splits):
    """Same support as task1 but only 6 query images, for fast end-to-end runs."""
    train, val = blob_splits
    qv = SubsetAdapter(val, val.image_ids()[:6], "val")
    task, _ = make_task(train, 1, 0, query_source=qv)
    return task


@pytest.fixture(scope="session")
def flat_catalog():
    return ClassCatalog(classes=((0, "bg"), (1, "a"), (2, "b")), background_is_class=True)


@pytest.fixture(scope="session")
def make_sample(flat_catalog):
    def build(image_id: str, mask: np.ndarray, catalog=None) -> SegSample:
        cat = catalog or flat_catalog
        mask = np.asarray(mask, dtype=np.int64)
        img = np.zeros(mask.shape + (3,), dtype=np.float32)
        return SegSample(image_id=image_id, image=img, mask=LabelMask(mask, cat))

    return build
