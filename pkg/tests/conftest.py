"""Session-scoped artifacts shared by the pipeline and acceptance suites.

Building these once keeps the expensive pieces (the 212-record synthetic
dataset, the trained detector, a briefly trained diffusion model) out of
every individual test.
"""

import numpy as np
import pytest

from localdeblur import imageops, synth
from localdeblur.detector import DetectorConfig, train_detector
from localdeblur.diffusion import DiffusionSchedule, train_diffusion


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    """200 train + 12 eval records at 128x128; returns (root, manifest)."""
    root = tmp_path_factory.mktemp("desk-data")
    specs = synth.default_specs(200, 12, seed=0)
    manifest = synth.generate_dataset(specs, root)
    return root, manifest


@pytest.fixture(scope="session")
def trained_detector(desk_dataset):
    """Detector trained on the desk set; returns (net, log, cfg, ckpt path)."""
    root, manifest = desk_dataset
    cfg = DetectorConfig()
    net, log = train_detector(manifest, root, cfg, epochs=14, lr=2e-3, seed=0)
    path = root / "detector.ckpt"
    net.save(path)
    return net, log, cfg, path


@pytest.fixture(scope="session")
def trained_diffusion(desk_dataset):
    """Diffusion model trained briefly on 16x16 crops; returns
    (model, schedule, ckpt path)."""
    root, manifest = desk_dataset
    rng = np.random.default_rng(0)
    crops = []
    for rec in manifest.split("train")[:40]:
        sharp = imageops.load_png(root / rec.sharp)
        short = imageops.load_png(root / rec.short)
        mask = imageops.load_png(root / rec.mask)
        ys, xs = np.where(mask > 0)
        cy = int(np.clip(ys.mean(), 8, mask.shape[0] - 8))
        cx = int(np.clip(xs.mean(), 8, mask.shape[1] - 8))
        sl = np.s_[cy - 8 : cy + 8, cx - 8 : cx + 8]
        crops.append({"x0": sharp[sl].transpose(2, 0, 1),
                      "ref": short[sl].transpose(2, 0, 1),
                      "mask": mask[sl]})
        y = int(rng.integers(0, mask.shape[0] - 16))
        x = int(rng.integers(0, mask.shape[1] - 16))
        sl = np.s_[y : y + 16, x : x + 16]
        crops.append({"x0": sharp[sl].transpose(2, 0, 1),
                      "ref": short[sl].transpose(2, 0, 1),
                      "mask": mask[sl]})
    schedule = DiffusionSchedule()
    model, _ = train_diffusion(crops, steps=400, seed=0, lr=2e-3,
                               schedule=schedule)
    path = root / "diffusion.ckpt"
    model.save(path)
    return model, schedule, path
