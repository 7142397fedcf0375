"""Smoke test for the ssseg_py extension.

Build and install it first:

    cd crates/python && maturin build --release -o dist && pip install dist/*.whl

Then run ``python python/smoke_test.py``. It generates a tiny dataset,
trains fcn-tiny for a few iterations, and checks prediction, metrics and
the schedule.
"""

import math
import pathlib
import tempfile

import numpy as np
from PIL import Image

import ssseg_py

CONFIGS = pathlib.Path(__file__).resolve().parent.parent / "configs"


def main():
    assert ssseg_py.lr_at(0.01, 1000, 0) == 0.01
    assert ssseg_py.lr_at(0.01, 1000, 1000) == 0.0
    assert abs(ssseg_py.lr_at(0.01, 1000, 500) - 0.01 * 0.5**0.9) <= 1e-12
    try:
        ssseg_py.lr_at(0.01, 1000, 1001)
    except ValueError:
        pass
    else:
        raise AssertionError("iteration past max_iters was accepted")

    gt = np.array([[0, 1], [1, 255]], dtype=np.uint8)
    pred = np.array([[0, 1], [0, 2]], dtype=np.uint8)
    m = ssseg_py.segmentation_metrics(pred.tobytes(), gt.tobytes(), 3)
    assert math.isclose(m["aacc"], 2 / 3)
    # class 0 and class 1 each have IoU 1/2; class 2 never occurs
    assert math.isclose(m["miou"], 0.5)

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        data = tmp / "data"
        meta = ssseg_py.gen_data(str(data), count=20, size=(32, 32), classes=4)
        assert meta["num_classes"] == 4 and meta["train_images"] == 16

        overrides = [
            f"dataset.source.root={data}",
            "dataset.source.count=20",
            "dataset.source.size=[32,32]",
            "scheduler.max_iters=20",
            "runtime.checkpoint_interval=10",
            "runtime.eval_interval=10",
        ]
        cfg = ssseg_py.resolve_config(str(CONFIGS / "fcn_tiny.json"), overrides)
        assert cfg["model"]["segmentor"]["type"] == "fcn"
        try:
            ssseg_py.resolve_config(str(CONFIGS / "fcn_tiny.json"), ["model.missing=1"])
        except ValueError:
            pass
        else:
            raise AssertionError("unknown override key was accepted")

        run = tmp / "run"
        report = ssseg_py.train(str(CONFIGS / "fcn_tiny.json"), str(run), overrides)
        assert 0.0 <= report["miou"] <= 1.0
        ckpt = run / "checkpoints" / "latest.ckpt"
        names = ssseg_py.Model.checkpoint_tensors(str(ckpt))
        assert any(n.startswith("backbone.") for n in names)

        model = ssseg_py.Model(str(run / "config.json"), str(ckpt))
        assert model.num_classes == 4
        image = np.asarray(Image.open(next((data / "images").glob("*.png"))).convert("RGB"))
        labels, h, w = model.predict(image.tobytes(), image.shape[0], image.shape[1])
        labels = np.frombuffer(labels, dtype=np.uint8).reshape(h, w)
        assert (h, w) == image.shape[:2]
        assert labels.max() < 4
        again, _, _ = model.predict(image.tobytes(), image.shape[0], image.shape[1])
        assert again == labels.tobytes()

    print("ssseg_py smoke test passed")


if __name__ == "__main__":
    main()
