"""Named experiment presets bundling dataset geometry and hyperparameters.

"desk" is the self-contained preset: it carries a synthetic-data spec and
small iteration counts, so the whole pipeline (base training, inversion,
incremental adaptation, multi-trial evaluation) runs in minutes on a laptop.
"bci", "nhie", and "grabmyo" record the full-scale recording configurations
— session geometry and training/inversion/finetuning hyperparameters — and
expect externally supplied data manifests.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .adaptation import AdaptationConfig, FinetuneConfig
from .data import (Dataset, SessionSplit, SynthSpec, desk_synth_spec,
                   paired_gain_spec, split_sessions, synth_arrays)
from .inversion import InversionConfig
from .model import BACKBONE_PRESETS, BaseTrainConfig, ConvBackboneConfig

__all__ = [
    "ExperimentPreset",
    "EXPERIMENT_PRESETS",
    "get_preset",
    "materialize_synth",
    "build_split",
    "with_synth_classes",
]

DEFAULT_SEED = 5


@dataclass(frozen=True)
class ExperimentPreset:
    """One experiment: backbone, session geometry, and all hyperparameters."""

    name: str
    backbone: str
    num_classes: int
    base_classes: tuple[int, ...]
    way: int
    shot: int
    trials: int
    master_seed: int
    methods: tuple[str, ...]
    base_train: BaseTrainConfig
    adaptation: AdaptationConfig
    synth: SynthSpec | None = None  # set only for synthetic presets

    def __post_init__(self):
        if self.backbone not in BACKBONE_PRESETS:
            raise KeyError(f"unknown backbone preset '{self.backbone}'; "
                           f"valid: {sorted(BACKBONE_PRESETS)}")
        if not set(self.base_classes) <= set(range(self.num_classes)):
            raise ValueError("base classes outside the class range")

    @property
    def backbone_config(self) -> ConvBackboneConfig:
        return BACKBONE_PRESETS[self.backbone]


def _desk_preset() -> ExperimentPreset:
    return ExperimentPreset(
        name="desk",
        backbone="desk",
        num_classes=4,
        base_classes=(0, 1),
        way=1,
        shot=10,
        trials=20,
        master_seed=DEFAULT_SEED,
        methods=("anchorinv", "finetune", "protonet", "realreplay"),
        base_train=BaseTrainConfig(epochs=300, learning_rate=5e-3, seed=DEFAULT_SEED),
        adaptation=AdaptationConfig(
            finetune=FinetuneConfig(replay_weight=1.0, learning_rate=5e-4,
                                    iterations=300, trainable_layers=("spatial",),
                                    prototype_init=True, seed=DEFAULT_SEED),
            inversion=InversionConfig(init="normal", learning_rate=1e-2,
                                      iterations=800, seed=DEFAULT_SEED),
            label_inversion_iterations=300,
            anchors_per_class=25,
            anchor_strategy="random_sample",
            real_per_class=25,
        ),
        synth=paired_gain_spec(frequencies=(3.0, 5.0), train_per_class=30,
                               test_per_class=20, seed=DEFAULT_SEED),
    )


def _bci_preset() -> ExperimentPreset:
    # 4 motor-imagery classes: first two form the base session, then two
    # 1-way-10-shot sessions; 100 paired trials
    return ExperimentPreset(
        name="bci",
        backbone="bci",
        num_classes=4,
        base_classes=(0, 1),
        way=1,
        shot=10,
        trials=100,
        master_seed=DEFAULT_SEED,
        methods=("anchorinv", "finetune", "protonet", "teen"),
        base_train=BaseTrainConfig(epochs=1500, learning_rate=2e-4, seed=DEFAULT_SEED),
        adaptation=AdaptationConfig(
            finetune=FinetuneConfig(replay_weight=1.0, learning_rate=2e-5,
                                    iterations=1550, trainable_layers=("spatial",),
                                    prototype_init=False, seed=DEFAULT_SEED),
            inversion=InversionConfig(init="normal", learning_rate=1e-2,
                                      iterations=4000, seed=DEFAULT_SEED),
            anchors_per_class=50,
            anchor_strategy="random_sample",
            real_per_class=50,
        ),
    )


def _nhie_preset() -> ExperimentPreset:
    # 4 severity grades; first two are base classes; class imbalance handled
    # by a weighted base loss
    return ExperimentPreset(
        name="nhie",
        backbone="nhie",
        num_classes=4,
        base_classes=(0, 1),
        way=1,
        shot=10,
        trials=100,
        master_seed=DEFAULT_SEED,
        methods=("anchorinv", "finetune", "protonet", "teen"),
        base_train=BaseTrainConfig(epochs=2000, learning_rate=1e-5,
                                   weighted_loss=True, seed=DEFAULT_SEED),
        adaptation=AdaptationConfig(
            finetune=FinetuneConfig(replay_weight=1.0, learning_rate=1e-5,
                                    iterations=1250, trainable_layers=("spatial",),
                                    prototype_init=False, seed=DEFAULT_SEED),
            inversion=InversionConfig(init="normal", learning_rate=1e-2,
                                      iterations=4000, seed=DEFAULT_SEED),
            anchors_per_class=50,
            anchor_strategy="random_sample",
            real_per_class=50,
        ),
    )


def _grabmyo_preset() -> ExperimentPreset:
    # 16 gestures: 10 base classes, six 1-way-10-shot sessions; new-class
    # weights start from prototypes
    return ExperimentPreset(
        name="grabmyo",
        backbone="grabmyo",
        num_classes=16,
        base_classes=tuple(range(10)),
        way=1,
        shot=10,
        trials=20,
        master_seed=DEFAULT_SEED,
        methods=("anchorinv", "finetune", "protonet", "teen"),
        base_train=BaseTrainConfig(epochs=2000, learning_rate=5e-5, seed=DEFAULT_SEED),
        adaptation=AdaptationConfig(
            finetune=FinetuneConfig(replay_weight=1.0, learning_rate=5e-6,
                                    iterations=1300, trainable_layers=("spatial",),
                                    prototype_init=True, seed=DEFAULT_SEED),
            inversion=InversionConfig(init="normal", learning_rate=1e-2,
                                      iterations=2000, seed=DEFAULT_SEED),
            anchors_per_class=50,
            anchor_strategy="random_sample",
            real_per_class=50,
        ),
    )


EXPERIMENT_PRESETS: dict[str, ExperimentPreset] = {
    "desk": _desk_preset(),
    "bci": _bci_preset(),
    "nhie": _nhie_preset(),
    "grabmyo": _grabmyo_preset(),
}


def get_preset(name: str) -> ExperimentPreset:
    if name not in EXPERIMENT_PRESETS:
        raise KeyError(f"unknown preset '{name}'; valid: {sorted(EXPERIMENT_PRESETS)}")
    return EXPERIMENT_PRESETS[name]


def materialize_synth(preset: ExperimentPreset) -> tuple[Dataset, Dataset]:
    """Generate the preset's (train, test) datasets; synthetic presets only."""
    if preset.synth is None:
        raise ValueError(f"preset '{preset.name}' has no synthetic data spec; "
                         f"supply dataset manifests instead")
    return synth_arrays(preset.synth)


def build_split(preset: ExperimentPreset, train: Dataset) -> SessionSplit:
    return split_sessions(train, preset.base_classes, preset.way, preset.shot)


def with_synth_classes(preset: ExperimentPreset, num_classes: int,
                       noise_sigma: float | None = None) -> ExperimentPreset:
    """Clone a synthetic preset with a different class count (keeps geometry
    fields that still make sense; callers adjust way/base as needed)."""
    if preset.synth is None:
        raise ValueError(f"preset '{preset.name}' is not synthetic")
    sigma = preset.synth.classes[0].noise_sigma if noise_sigma is None else noise_sigma
    synth = desk_synth_spec(num_classes=num_classes,
                            train_per_class=preset.synth.train_per_class,
                            test_per_class=preset.synth.test_per_class,
                            channels=preset.synth.channels,
                            timesteps=preset.synth.timesteps,
                            seed=preset.synth.seed,
                            noise_sigma=sigma)
    return replace(preset, num_classes=num_classes, synth=synth)
