import pytest

from diamondseg.config import coerce, load_config
from diamondseg.errors import InvalidConfig, MissingFile
from diamondseg.grid import GridConfig
from diamondseg.models import TrainConfig
from diamondseg.pipeline import PipelineConfig
from diamondseg.preprocess import PreprocessConfig
from diamondseg.synthgen import GrowthRunSpec


def write(tmp_path, text):
    path = tmp_path / "c.ini"
    path.write_text(text)
    return path


def test_load_and_coerce(tmp_path):
    raw = load_config(write(tmp_path, "[train]\nepochs = 30\nlr = 3e-4\nloss = cross_entropy\n"
                                      "[grid]\nresolutions = 32, 64\nfamilies = fcn8\n"))
    t = coerce(TrainConfig, raw["train"])
    assert (t.epochs, t.lr, t.loss) == (30, 3e-4, "cross_entropy")
    g = coerce(GridConfig, raw["grid"])
    assert g.resolutions == (32, 64) and g.families == ("fcn8",)


def test_optional_tuple_and_base(tmp_path):
    assert coerce(TrainConfig, {"focal_alpha": "1, 2, 2, 1"}).focal_alpha == (1.0, 2.0, 2.0, 1.0)
    assert coerce(TrainConfig, {"focal_alpha": "none"}).focal_alpha is None
    base = PipelineConfig(epochs_per_round=3)
    assert coerce(PipelineConfig, {"seed": "4"}, base) == PipelineConfig(seed=4, epochs_per_round=3)


def test_errors(tmp_path):
    with pytest.raises(MissingFile):
        load_config(tmp_path / "absent.ini")
    with pytest.raises(InvalidConfig):
        load_config(write(tmp_path, "[bogus]\na = 1\n"))
    with pytest.raises(InvalidConfig):
        load_config(write(tmp_path, "no section header\n"))
    with pytest.raises(InvalidConfig):
        coerce(TrainConfig, {"epochz": "3"})
    with pytest.raises(InvalidConfig):
        coerce(TrainConfig, {"epochs": "many"})
    with pytest.raises(InvalidConfig):
        coerce(TrainConfig, {"epochs": "500"})
    with pytest.raises(InvalidConfig):
        coerce(PipelineConfig, {"noise": "0.1"})
    with pytest.raises(InvalidConfig):
        coerce(PreprocessConfig, {"resample_window_min": "0"})


def test_synth_spec_fields():
    spec = coerce(GrowthRunSpec, {"frames": "12", "diamond_shape": "octagon", "canvas": "96, 96"})
    assert spec.frames == 12 and spec.diamond_shape == "octagon" and spec.canvas == (96, 96)
