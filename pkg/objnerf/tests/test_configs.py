from os import listdir
from pathlib import Path

import hyperstate

from objnerf.config import ExperimentConfig, TrainConfig
from objnerf.experiment import sweep_cells


def test_configs() -> None:
    config_dir = Path(__file__).parent.parent.parent / "configs" / "experiments"
    for config_file in listdir(config_dir):
        print(config_file)
        cfg = hyperstate.load(ExperimentConfig, config_dir / config_file)
        assert cfg.name == Path(config_file).stem
        assert len(sweep_cells(cfg)) > 0


def test_overrides() -> None:
    cfg = hyperstate.load(
        TrainConfig, None, ["n_steps=10", "optim.field_lr=0.005", "field.grid.n_levels=4"]
    )
    assert cfg.n_steps == 10
    assert cfg.optim.field_lr == 0.005
    assert cfg.field.grid.n_levels == 4
    assert cfg.field.grid.table_size == 2**19


def test_presets() -> None:
    assert TrainConfig.desk() == TrainConfig()
    full = TrainConfig.full_scale()
    assert full.n_samples_per_ray > TrainConfig().n_samples_per_ray
