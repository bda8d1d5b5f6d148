"""Train the desk base model and round-trip it through the checkpoint format.

The base session sees only the first class pair (classes 0 and 1).  Training
minimizes the temperature-scaled cosine cross-entropy; the resulting state
carries the conv parameters, one weight vector per seen class, and feature
statistics for the regularized label-space inversion variants.
"""

import tempfile
from pathlib import Path

import numpy as np

from anchorinv import (accuracy, get_preset, materialize_synth, predict_batch,
                       train_base)
from anchorinv.presets import build_split
from anchorinv.serialization import load_checkpoint, save_checkpoint


def main():
    preset = get_preset("desk")
    train, test = materialize_synth(preset)
    split = build_split(preset, train)
    print(f"base session: classes {split.base.classes()}, "
          f"{len(split.base.y)} samples")
    print(f"held-back incremental pools: "
          f"{[spec.class_ids for spec in split.pool_specs]}\n")

    state = train_base(split.base.x, split.base.y, preset.backbone_config,
                       preset.base_train)
    losses = state.train_losses
    marks = [0, len(losses) // 4, len(losses) // 2, 3 * len(losses) // 4, -1]
    print("loss curve:", "  ".join(f"{losses[i]:.4f}" for i in marks))
    print(f"train accuracy: {accuracy(state, split.base.x, split.base.y):.4f}")

    base_test = test.of_classes(split.base.classes())
    preds = predict_batch(state, base_test.x)
    print(f"base test accuracy: {float(np.mean(preds == base_test.y)):.4f}")

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "checkpoint.bin"
        save_checkpoint(path, state)
        restored = load_checkpoint(path)
        same = all(
            np.array_equal(state.backbone.params[n].data,
                           restored.backbone.params[n].data)
            for n in state.backbone.param_names())
        print(f"\ncheckpoint round trip bit-exact: {same} "
              f"({path.stat().st_size} bytes)")


if __name__ == "__main__":
    main()
